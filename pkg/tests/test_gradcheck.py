import numpy as np
import pytest

from tomoseg import autodiff as ad
from tomoseg.autodiff import Tensor
from tomoseg.gradcheck import GradSample, check_gradients
from tomoseg.models import C3dModel, ModelConfig
from tomoseg.training import l2_loss


def test_rel_error_definition():
    assert GradSample("w", "element", 1.0, 1.1).rel_error == pytest.approx(0.1 / 1.1)
    assert GradSample("w", "element", 0.0, 1e-14).rel_error == 0.0


def test_detects_a_wrong_gradient(rng):
    w = Tensor(rng.normal(size=3), requires_grad=True)

    def broken(x):
        out = ad.square(x)
        out._backward = lambda g: (3.0 * x.data * g,)  # should be 2x
        return out

    samples = check_gradients(lambda: ad.sum(broken(w)), [("w", w)], rng)
    assert max(s.rel_error for s in samples) > 0.1


def test_relu_kink_is_not_reported(rng):
    w = Tensor(np.array([1e-7, -1e-7, 0.5]), requires_grad=True)
    samples = check_gradients(lambda: ad.sum(ad.relu(w * 3.0)), [("w", w)], rng, eps=1e-4)
    assert max(s.rel_error for s in samples) < 1e-6


def test_c3d_forward_gradients_on_small_window():
    cfg = ModelConfig(height=8, width=8, window=5, shared_channels=(2, 2), branch_channels=(2, 2, 2, 2, 2, 2),
                      hidden_size=6, dtype="float64", seed=3)
    model = C3dModel(cfg)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 5, 8, 8)))
    target = rng.uniform(-0.5, 0.5, size=(1, 2, 8))
    samples = check_gradients(lambda: l2_loss(model(x)[0], target), list(model.named_parameters()), rng, eps=1e-5)
    assert {s.name for s in samples} == {n for n, _ in model.named_parameters()}
    assert max(s.rel_error for s in samples) < 1e-4
