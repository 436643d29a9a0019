"""JSON checkpoint container.

Arrays are stored as base64 of their little-endian bytes together with dtype
and shape, so a load/save cycle reproduces the file byte for byte and the
arrays bit for bit.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .adam import AdamConfig
from .net import NetConfig, NetParams

FORMAT = "ladder-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _enc(a: np.ndarray) -> dict:
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": le.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii"),
    }


def _dec(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"])
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


def dumps(cfg: NetConfig, params: NetParams, adam: AdamConfig | None = None, extra: dict | None = None) -> str:
    doc = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "epsilon": adam.epsilon,
        },
        "step": params.step,
        "tensors": {k: _enc(v) for k, v in params.tensors.items()},
        "adam_m": {k: _enc(v) for k, v in params.adam_m.items()},
        "adam_v": {k: _enc(v) for k, v in params.adam_v.items()},
        "extra": extra or {},
    }
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def loads(text: str) -> tuple[NetConfig, NetParams, AdamConfig | None, dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"not a JSON checkpoint: {e}") from e
    if doc.get("format") != FORMAT:
        raise CheckpointError("missing or wrong format tag")
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {doc.get('format_version')}")
    cfg = NetConfig.from_dict(doc["config"])
    params = NetParams(
        {k: _dec(v) for k, v in doc["tensors"].items()},
        {k: _dec(v) for k, v in doc["adam_m"].items()},
        {k: _dec(v) for k, v in doc["adam_v"].items()},
        int(doc["step"]),
    )
    adam = None if doc.get("adam") is None else AdamConfig(**doc["adam"])
    return cfg, params, adam, doc.get("extra", {})


def save_checkpoint(path, cfg: NetConfig, params: NetParams, adam: AdamConfig | None = None, extra: dict | None = None):
    Path(path).write_text(dumps(cfg, params, adam, extra))


def load_checkpoint(path):
    return loads(Path(path).read_text())
