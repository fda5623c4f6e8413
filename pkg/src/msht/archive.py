"""Parameter archives: named arrays + metadata in a single .npz file.

Used for model checkpoints and for loading pretrained backbone weights.
Array values round-trip bit-exactly (npz storage is lossless).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

ARCHIVE_VERSION = 1

_VERSION_KEY = "__archive_version__"
_META_KEY = "__meta_json__"
_RESERVED = (_VERSION_KEY, _META_KEY)


class LoadReport(NamedTuple):
    """Outcome of loading an archive into a module."""

    loaded: tuple[str, ...]
    missing: tuple[str, ...]     # wanted by the module, absent from the archive
    unexpected: tuple[str, ...]  # present in the archive, unknown to the module


def save_archive(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata blob and a format-version field."""
    for key in _RESERVED:
        if key in arrays:
            raise ValueError(f"array name {key!r} is reserved")
    if "file" in arrays:
        raise ValueError("array name 'file' collides with numpy's savez signature")
    payload = {name: np.asarray(value) for name, value in arrays.items()}
    payload[_VERSION_KEY] = np.array(ARCHIVE_VERSION, dtype=np.int64)
    payload[_META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        np.savez(handle, **payload)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta). Rejects files that are not parameter archives."""
    with np.load(path, allow_pickle=False) as data:
        if _VERSION_KEY not in data.files:
            raise ValueError(f"{path}: not a parameter archive (missing version field)")
        version = int(data[_VERSION_KEY])
        if version > ARCHIVE_VERSION:
            raise ValueError(f"{path}: archive version {version} is newer than supported ({ARCHIVE_VERSION})")
        meta = json.loads(data[_META_KEY].item()) if _META_KEY in data.files else {}
        arrays = {name: data[name] for name in data.files if name not in _RESERVED}
    return arrays, meta


def module_state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Snapshot a module's parameters and buffers as numpy arrays."""
    return {name: tensor.detach().cpu().numpy().copy() for name, tensor in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> LoadReport:
    """Copy matching arrays into the module's parameters/buffers in place.

    Raises on any shape conflict, listing the offending names; entries the
    archive lacks are reported as missing, extra entries as unexpected.
    """
    state = module.state_dict()
    conflicts = sorted(
        name for name in arrays
        if name in state and tuple(state[name].shape) != tuple(arrays[name].shape)
    )
    if conflicts:
        raise ValueError("shape conflict for parameters: " + ", ".join(conflicts))

    loaded = []
    with torch.no_grad():
        for name, tensor in state.items():
            if name in arrays:
                # np.array keeps 0-d shapes intact (ascontiguousarray would not)
                tensor.copy_(torch.from_numpy(np.array(arrays[name])))
                loaded.append(name)
    missing = tuple(name for name in state if name not in arrays)
    unexpected = tuple(sorted(name for name in arrays if name not in state))
    return LoadReport(tuple(loaded), missing, unexpected)
