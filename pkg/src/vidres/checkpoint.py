"""Checkpoint container: ``meta.json`` plus one little-endian float32 file per array."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import torch

FORMAT_VERSION = 1


def _fname(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def save_arrays(directory: str | os.PathLike, kind: str, config: dict[str, Any], step: int,
                arrays: dict[str, np.ndarray | torch.Tensor], extra: dict[str, Any] | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(arrays):
        value = arrays[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value)
        dtype = str(arr.dtype)
        data = arr.astype("<f4", copy=False)
        if dtype.startswith("int") and not np.array_equal(data.astype(arr.dtype), arr):
            raise ValueError(f"{name}: integer values not representable in float32")
        fname = _fname(name)
        (out / fname).write_bytes(np.ascontiguousarray(data).tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": dtype}
    meta = {"format_version": FORMAT_VERSION, "kind": kind, "config": config, "step": int(step),
            "arrays": entries, "extra": extra or {}}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_meta(directory: str | os.PathLike) -> dict[str, Any]:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    return json.loads(path.read_text())


def load_arrays(directory: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    meta = load_meta(directory)
    arrays = {}
    for name, info in meta["arrays"].items():
        raw = np.frombuffer((Path(directory) / info["file"]).read_bytes(), dtype="<f4")
        arr = raw.reshape(info["shape"]).astype(info["dtype"])
        arrays[name] = arr
    return meta, arrays


def state_arrays(modules: dict[str, torch.nn.Module]) -> dict[str, torch.Tensor]:
    out = {}
    for prefix, module in modules.items():
        for key, value in module.state_dict().items():
            out[f"{prefix}/{key}"] = value
    return out


def optimizer_arrays(optimizers: dict[str, torch.optim.Optimizer]) -> dict[str, torch.Tensor]:
    """Flatten Adam moment buffers and step counters into named arrays."""
    out = {}
    for prefix, opt in optimizers.items():
        state = opt.state_dict()["state"]
        for pid in sorted(state):
            for key, value in state[pid].items():
                out[f"optim/{prefix}/{pid}/{key}"] = torch.as_tensor(value)
    return out


def restore_modules(modules: dict[str, torch.nn.Module], arrays: dict[str, np.ndarray]) -> None:
    for prefix, module in modules.items():
        own = module.state_dict()
        loaded = {}
        for key, ref in own.items():
            name = f"{prefix}/{key}"
            if name not in arrays:
                raise KeyError(f"checkpoint lacks {name}")
            loaded[key] = torch.from_numpy(np.array(arrays[name])).to(ref.dtype).reshape(ref.shape)
        module.load_state_dict(loaded)


def restore_optimizers(optimizers: dict[str, torch.optim.Optimizer], arrays: dict[str, np.ndarray]) -> None:
    for prefix, opt in optimizers.items():
        sd = opt.state_dict()
        state: dict[int, dict[str, torch.Tensor]] = {}
        head = f"optim/{prefix}/"
        for name, arr in arrays.items():
            if not name.startswith(head):
                continue
            pid, key = name[len(head):].split("/", 1)
            t = torch.from_numpy(np.array(arr))
            state.setdefault(int(pid), {})[key] = t.float() if key != "step" else t.to(torch.float32)
        sd["state"] = state
        opt.load_state_dict(sd)
