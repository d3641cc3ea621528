"""Binary checkpoint format.

Layout (little-endian)::

    b"EXFC1" | uint16 version | uint32 header_len | header JSON | float64 payload

The header echoes the model config, seed, standardizer statistics and a tensor
table of ``(name, shape, offset)``; tensors are stored row-major.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .dataset import Standardizer, WindowSpec
from .errors import ConfigConflictError, ResflowError
from .net import ForecastNet, ModelConfig
from .timegrid import SlotGrid
from .training import Forecaster

MAGIC = b"EXFC1"
VERSION = 1


class CheckpointError(ResflowError):
    pass


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    spec = dict(d.pop("spec"))
    grid = SlotGrid(**spec.pop("grid"))
    spec["res_feature_lags"] = tuple(spec["res_feature_lags"])
    return ModelConfig(spec=WindowSpec(grid=grid, **spec), **d)


def save_checkpoint(forecaster: Forecaster, path, extra: dict | None = None) -> None:
    tensors, payload, offset = [], [], 0
    for name, t in forecaster.model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f8", copy=False)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(np.ascontiguousarray(arr).tobytes())
        offset += arr.size
    header = {
        "model_config": model_config_to_dict(forecaster.config),
        "seed": forecaster.seed,
        "standardizer": forecaster.standardizer.to_dict(),
        "tensors": tensors,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def read_header(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<HI", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<HI")
    header = json.loads(data[start:start + n].decode("utf-8"))
    return header, data[start + n:]


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[Forecaster, dict]:
    """Rebuild the forecaster; ``expected`` must match the stored config if given."""
    header, payload = read_header(path)
    cfg = model_config_from_dict(header["model_config"])
    if expected is not None and expected != cfg:
        want = json.loads(json.dumps(model_config_to_dict(expected)))
        diffs = [k for k, v in want.items() if header["model_config"].get(k) != v]
        raise ConfigConflictError(f"checkpoint config differs from requested config in: {diffs}")
    values = np.frombuffer(payload, dtype="<f8")
    model = ForecastNet(cfg, seed=header["seed"])
    state = model.state_dict()
    if {t["name"] for t in header["tensors"]} != set(state):
        raise CheckpointError(f"{path}: tensor table does not match the model layout")
    new_state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = values[t["offset"]:t["offset"] + count].reshape(t["shape"])
        if tuple(state[t["name"]].shape) != tuple(arr.shape):
            raise CheckpointError(f"{path}: tensor {t['name']} has shape {arr.shape}")
        new_state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(new_state)
    model.eval()
    return (Forecaster(model, Standardizer.from_dict(header["standardizer"]), header["seed"]),
            header.get("extra", {}))
