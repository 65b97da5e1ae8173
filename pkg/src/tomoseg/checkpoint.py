"""Binary checkpoint container.

Layout (little-endian)::

    b"TOMOCKPT" | u32 version | u64 header length | JSON header | tensor blob

The header carries the model config, the ablation mode, free-form ``extra``
metadata and a tensor index of ``name, dtype, shape, offset, nbytes``
entries pointing into the blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import CombinedModel, ModelConfig

MAGIC = b"TOMOCKPT"
VERSION = 1


def save_checkpoint(path, model: CombinedModel, extra: dict | None = None) -> None:
    index, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format": "tomoseg-checkpoint",
        "config": model.config.to_dict(),
        "mode": model.mode,
        "extra": extra or {},
        "tensors": index,
    }).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def _read(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen])
    return header, data[start + hlen:]


def read_header(path) -> dict:
    return _read(path)[0]


def load_into(model: CombinedModel, path) -> dict:
    """Copy checkpoint tensors into ``model``; returns the ``extra`` metadata.

    The stored config and mode must equal the model's, and every tensor must
    match by name, dtype and shape.
    """
    header, blob = _read(path)
    if ModelConfig.from_dict(header["config"]) != model.config or header["mode"] != model.mode:
        raise ValueError(
            f"{path}: checkpoint architecture ({header['mode']}, {header['config']}) does not match the model "
            f"({model.mode}, {model.config.to_dict()})"
        )
    params = dict(model.named_parameters())
    stored = {t["name"]: t for t in header["tensors"]}
    if set(stored) != set(params):
        raise ValueError(f"{path}: parameter names differ from the model's")
    for name, p in params.items():
        t = stored[name]
        dtype = np.dtype(t["dtype"])
        if tuple(t["shape"]) != p.shape or dtype.newbyteorder("=") != p.dtype:
            raise ValueError(f"{path}: tensor {name} is {t['dtype']}{t['shape']}, model has {p.dtype}{p.shape}")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(t["shape"], dtype=np.int64)), offset=t["offset"])
        p.data = arr.reshape(t["shape"]).astype(p.dtype)
    return header["extra"]


def load_checkpoint(path) -> tuple[CombinedModel, dict]:
    header = read_header(path)
    model = CombinedModel(ModelConfig.from_dict(header["config"]), header["mode"])
    extra = load_into(model, path)
    return model, extra
