import dataclasses

import numpy as np
import pytest

from tomoseg import autodiff as ad
from tomoseg import models
from tomoseg.autodiff import Tensor, no_grad
from tomoseg.models import (
    C3dModel, CombinedModel, ModelConfig, RnnModel, SurfaceGrid, _branch_pool_plan, c2d_variant, c3d_forward,
    canonical_mode, combined_forward, predict_sequence, reconstruct_surfaces, rnn_forward, sequence_windows,
)


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


def window(cfg, rng):
    return Tensor(rng.normal(size=(cfg.window, cfg.height, cfg.width)))


# C3D ------------------------------------------------------------------------------------

def test_c3d_forward_shapes_and_finite(tiny_config, rng):
    model = C3dModel(tiny_config)
    preds, feats = c3d_forward(model, window(tiny_config, rng))
    assert preds.shape == (2, 16) and feats.shape == (2, 8)
    assert np.isfinite(preds.data).all()


def test_c3d_forward_is_deterministic(tiny_config, rng):
    model = C3dModel(tiny_config)
    w = window(tiny_config, rng)
    np.testing.assert_array_equal(c3d_forward(model, w)[0].data, c3d_forward(model, w)[0].data)
    np.testing.assert_array_equal(C3dModel(tiny_config).shared[0].weight.data, model.shared[0].weight.data)


def test_identical_branches_give_identical_outputs(tiny_config, rng):
    model = C3dModel(tiny_config)
    for (_, a), (_, b) in zip(model.branches[0].named_parameters(), model.branches[1].named_parameters()):
        b.data = a.data.copy()
    preds, feats = c3d_forward(model, window(tiny_config, rng))
    np.testing.assert_array_equal(preds.data[0], preds.data[1])
    np.testing.assert_array_equal(feats.data[0], feats.data[1])


def test_c3d_rejects_wrong_window(tiny_config):
    with pytest.raises(ValueError):
        C3dModel(tiny_config)(Tensor(np.zeros((1, 5, 16, 16))))


def test_default_config_layer_shapes():
    cfg = ModelConfig()
    model = C3dModel(dataclasses.replace(cfg, hidden_size=4))
    assert model.shared[0].weight.shape == (16, 1, 3, 5, 3)
    assert model.shared[1].weight.shape == (32, 16, 3, 5, 3)
    assert [c.weight.shape[0] for c in model.branches[0].convs] == [32, 32, 64, 64, 64, 64]
    # 64 -> 32 -> 16 after the shared pools, then /2 three times in the branch
    assert model.branches[0].flat_features == 64 * 5 * 2 * 64


@pytest.mark.parametrize("height, final", [(64, 2), (16, 2), (8, 2), (4, 1)])
def test_branch_pool_plan_keeps_height_positive(height, final):
    plan, h = _branch_pool_plan(height)
    assert h == final and len(plan) == 6
    assert not any(plan[i] for i in (0, 2, 4))


# RNN ------------------------------------------------------------------------------------

def count_steps(monkeypatch):
    calls = []
    real = models.gru_step

    def counting(cell, x, h, **kwargs):
        calls.append(cell)
        return real(cell, x, h, **kwargs)

    monkeypatch.setattr(models, "gru_step", counting)
    return calls


def test_single_column_runs_one_step_per_cell(monkeypatch):
    cfg = ModelConfig(height=16, width=1, hidden_size=4, dtype="float64")
    model = RnnModel(cfg)
    calls = count_steps(monkeypatch)
    preds = rnn_forward(model, Tensor(np.ones((16, 1))), Tensor(np.zeros((2, 4))))
    assert preds.shape == (2, 1)
    assert calls == model.cells


def test_step_count_is_layers_times_columns(monkeypatch, tiny_config):
    calls = count_steps(monkeypatch)
    RnnModel(tiny_config)(Tensor(np.ones((3, 16, 16))), Tensor(np.zeros((3, 2, 8))))
    assert len(calls) == 2 * 16


def test_step_count_holds_without_tape(monkeypatch, tiny_config):
    calls = count_steps(monkeypatch)
    with no_grad():
        RnnModel(tiny_config)(Tensor(np.ones((3, 16, 16))), Tensor(np.zeros((3, 2, 8))))
    assert len(calls) == 2 * 16


def test_untaped_forward_matches_taped_forward(tiny_config, rng):
    model = RnnModel(tiny_config)
    x, h0 = Tensor(rng.normal(size=(3, 16, 16))), Tensor(rng.normal(size=(3, 2, 8)))
    taped_preds, taped_hidden = model(x, h0)
    assert taped_preds.requires_grad
    with no_grad():
        preds, hidden = model(x, h0)
    np.testing.assert_allclose(preds.data, taped_preds.data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(hidden.data, taped_hidden.data, rtol=0, atol=1e-12)


def test_zero_rnn_predicts_midline(tiny_config, rng):
    model = RnnModel(tiny_config)
    zero_params(model)
    preds = rnn_forward(model, Tensor(rng.normal(size=(16, 16))), Tensor(rng.normal(size=(2, 8))))
    assert not preds.data.any()
    np.testing.assert_array_equal(reconstruct_surfaces(preds.data[:, None, :], 16).values, 8.0)


def test_cross_layer_path_runs_downward_only(tiny_config, rng):
    model = RnnModel(tiny_config)
    x, h0 = Tensor(rng.normal(size=(16, 16))), Tensor(rng.normal(size=(2, 8)))
    base = rnn_forward(model, x, h0).data
    model.cells[0].U_in.data += 0.5
    upper_changed = rnn_forward(model, x, h0).data
    assert not np.allclose(base[1], upper_changed[1])
    model.cells[0].U_in.data -= 0.5
    model.cells[1].U_in.data += 0.5
    lower_changed = rnn_forward(model, x, h0).data
    np.testing.assert_allclose(base[0], lower_changed[0], atol=1e-14, rtol=0)
    assert not np.allclose(base[1], lower_changed[1])


def test_init_hidden_acts_as_previous_state(tiny_config, rng):
    cfg = dataclasses.replace(tiny_config, width=1)
    model = RnnModel(cfg)
    x, h0 = rng.normal(size=(16, 1)), rng.normal(size=(2, 8))
    preds = rnn_forward(model, Tensor(x), Tensor(h0)).data
    col = model.column_proj(Tensor(x[:, 0])).data
    h1, s1 = models.gru_step(model.cells[0], Tensor(col), Tensor(h0[0]))
    _, s2 = models.gru_step(model.cells[1], Tensor(col + h1.data), Tensor(h0[1]))
    np.testing.assert_allclose(preds[:, 0], [s1.data.item(), s2.data.item()], atol=1e-14)


# combined ---------------------------------------------------------------------------------

def test_mode_aliases_and_validation():
    assert canonical_mode("c3d_only") == "c3d"
    assert canonical_mode("rnn_only") == "rnn"
    with pytest.raises(ValueError, match="unknown mode"):
        canonical_mode("lstm")


def test_c3d_only_returns_c3d_predictions(tiny_config, rng):
    model = CombinedModel(tiny_config, "c3d_only")
    w = window(tiny_config, rng)
    np.testing.assert_array_equal(combined_forward(model, w).data, c3d_forward(model.cnn, w)[0].data)
    assert model.rnn is None


def test_rnn_only_starts_from_zero_state(tiny_config, rng):
    model = CombinedModel(tiny_config, "rnn_only")
    assert model.cnn is None and model.window_length == 1
    w = Tensor(rng.normal(size=(1, 16, 16)))
    expected = rnn_forward(model.rnn, w[0], Tensor(np.zeros((2, 8))))
    np.testing.assert_array_equal(combined_forward(model, w).data, expected.data)


def test_zeroed_rnn_ignores_c3d_features(tiny_config, rng):
    model = CombinedModel(tiny_config, "c3d+rnn")
    zero_params(model.rnn)
    out = combined_forward(model, window(tiny_config, rng), Tensor(rng.normal(size=(2, 8))))
    assert not out.data.any()


def test_combined_uses_c3d_features_as_initial_state(tiny_config, rng):
    model = CombinedModel(tiny_config, "c3d+rnn")
    w, handoff = window(tiny_config, rng), rng.normal(size=(2, 8))
    _, feats = c3d_forward(model.cnn, w)
    expected = rnn_forward(model.rnn, w[tiny_config.window // 2], Tensor(feats.data + handoff))
    np.testing.assert_allclose(combined_forward(model, w, Tensor(handoff)).data, expected.data, atol=1e-14)


def test_handoff_rejected_outside_combined_modes(tiny_config, rng):
    model = CombinedModel(tiny_config, "c3d")
    with pytest.raises(ValueError, match="cross-slice"):
        model(Tensor(rng.normal(size=(1, 3, 16, 16))), Tensor(np.zeros((1, 2, 8))))


def test_window_length_mismatch_rejected(tiny_config):
    with pytest.raises(ValueError, match="windows of length"):
        CombinedModel(tiny_config, "c2d+rnn")(Tensor(np.zeros((1, 3, 16, 16))))


# 2D variant -------------------------------------------------------------------------------

def test_c2d_variant_kernel_and_size(tiny_config):
    cfg2 = c2d_variant(tiny_config)
    assert cfg2.kernel == (1, 5, 3) and cfg2.window == 1
    assert C3dModel(cfg2).num_parameters() < C3dModel(tiny_config).num_parameters()
    assert CombinedModel(tiny_config, "c2d").cnn.shared[0].weight.shape[2:] == (1, 5, 3)


def test_c3d_collapses_to_c2d_on_depth_constant_input(tiny_config, rng):
    m2 = C3dModel(c2d_variant(tiny_config))
    m3 = C3dModel(tiny_config)
    kd, L = tiny_config.kernel[0], tiny_config.window
    convs2 = m2.shared + [c for b in m2.branches for c in b.convs]
    convs3 = m3.shared + [c for b in m3.branches for c in b.convs]
    for c2, c3 in zip(convs2, convs3):
        c3.weight.data = np.repeat(c2.weight.data / kd, kd, axis=2)
        c3.bias.data = c2.bias.data.copy()
    for b2, b3 in zip(m2.branches, m3.branches):
        hid = b2.fc1.weight.shape[0]
        w = b2.fc1.weight.data.reshape(hid, tiny_config.branch_channels[-1], 1, -1)
        b3.fc1.weight.data = np.repeat(w / L, L, axis=2).reshape(hid, -1)
        b3.fc1.bias.data = b2.fc1.bias.data.copy()
        b3.fc2.weight.data = b2.fc2.weight.data.copy()
        b3.fc2.bias.data = b2.fc2.bias.data.copy()
    image = rng.normal(size=(16, 16))
    p2, f2 = m2(Tensor(image[None, None]))
    p3, f3 = m3(Tensor(np.repeat(image[None, None], L, axis=1)))
    np.testing.assert_allclose(p3.data, p2.data, atol=1e-12)
    np.testing.assert_allclose(f3.data, f2.data, atol=1e-12)


# sequences and surfaces ---------------------------------------------------------------------

def test_sequence_windows_edge_replicate():
    s = np.arange(7.0)[:, None, None] * np.ones((7, 2, 2))
    w = sequence_windows(s, 5)
    assert w.shape == (7, 5, 2, 2)
    np.testing.assert_array_equal(w[0, :, 0, 0], [0, 0, 0, 1, 2])
    np.testing.assert_array_equal(w[6, :, 0, 0], [4, 5, 6, 6, 6])


@pytest.mark.parametrize("mode", ["c3d+rnn", "c3d", "rnn"])
def test_predict_sequence_matches_slice_by_slice_forward(tiny_config, rng, mode):
    model = CombinedModel(tiny_config, mode)
    slices = rng.normal(size=(5, 16, 16))
    got = predict_sequence(model, slices, chunk=2)
    windows = sequence_windows(slices, model.window_length)
    state = None
    for d in range(5):
        preds, hidden = model(Tensor(windows[d:d + 1]), None if state is None else Tensor(state))
        np.testing.assert_allclose(got[:, d], preds.data[0], atol=1e-12)
        if model.combined:
            state = hidden.data
    assert got.shape == (2, 5, 16)


def test_reconstruct_examples():
    grid = reconstruct_surfaces(np.array([[[0.0, 1.5, -3.0]]]), 64)
    np.testing.assert_array_equal(grid.values, [[[32.0, 64.0, 1.0]]])


def test_reconstruct_single_slice_is_identity_assembly():
    p = np.array([[0.25, -0.5], [0.5, 0.75]])
    grid = reconstruct_surfaces([p], 64)
    np.testing.assert_array_equal(grid.values[:, 0], 32 + 32 * p)


def test_reconstruct_from_mapping_and_missing_slices():
    p = np.zeros((2, 3))
    assert reconstruct_surfaces({0: p, 1: p}, 16).shape == (2, 2, 3)
    with pytest.raises(ValueError, match="missing"):
        reconstruct_surfaces({0: p, 2: p}, 16)
    with pytest.raises(ValueError, match="missing"):
        reconstruct_surfaces([p, None], 16)


def test_surface_csv_round_trip(tmp_path, rng):
    grid = SurfaceGrid(rng.uniform(1, 64, size=(2, 3, 4)), 64)
    grid.to_csv(tmp_path / "g.csv")
    back = SurfaceGrid.from_csv(tmp_path / "g.csv", 64)
    np.testing.assert_array_equal(back.values, grid.values)
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "k,d,w,row"


def test_surface_csv_rejects_incomplete(tmp_path):
    (tmp_path / "g.csv").write_text("k,d,w,row\n0,0,0,1.0\n0,0,2,1.0\n")
    with pytest.raises(ValueError, match="missing"):
        SurfaceGrid.from_csv(tmp_path / "g.csv", 64)


def test_ordering_violations():
    values = np.array([[[1.0, 5.0]], [[2.0, 4.0]]])
    assert SurfaceGrid(values, 8).ordering_violations() == 1


def test_model_config_round_trip_and_validation():
    cfg = ModelConfig(hidden_size=32)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ModelConfig(window=4)
