"""Checkpoint archive: dotted parameter names -> little-endian float64 arrays.

The archive is a zip with one ``.npy`` member per parameter (the npy header
carries dtype and shape) and a ``metadata.json`` member. Member order and
timestamps are fixed so identical parameters give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def to_float64(params: Mapping[str, torch.Tensor | np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, value in params.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        out[name] = np.ascontiguousarray(value, dtype="<f8")
    return out


def checkpoint_bytes(params: Mapping[str, torch.Tensor | np.ndarray], metadata: Mapping | None = None) -> bytes:
    return archive_bytes(to_float64(params), metadata)


def archive_bytes(arrays: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    """Deterministic zip of arrays in their own dtype (used for exports)."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arrays[name]), version=(1, 0), allow_pickle=False)
            zf.writestr(_member(f"{name}.npy"), member.getvalue())
        zf.writestr(_member("metadata.json"), json.dumps(dict(metadata or {}), indent=1, sort_keys=True))
    return buf.getvalue()


def save_checkpoint(path: str | Path, params: Mapping[str, torch.Tensor | np.ndarray],
                    metadata: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params, metadata))
    return path


def save_archive(path: str | Path, arrays: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(archive_bytes(arrays, metadata))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    arrays, metadata = {}, {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == "metadata.json":
                metadata = json.loads(data)
            elif name.endswith(".npy"):
                arrays[name[: -len(".npy")]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    return arrays, metadata


def trainable_state(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Detached copies of the parameters that require gradients."""
    return {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}


def load_into(model: torch.nn.Module, params: Mapping[str, torch.Tensor | np.ndarray]) -> None:
    named = dict(model.named_parameters())
    missing = set(params) - set(named)
    if missing:
        raise KeyError(f"checkpoint has parameters the model lacks: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, value in params.items():
            p = named[name]
            p.copy_(torch.as_tensor(np.asarray(value) if not isinstance(value, torch.Tensor) else value, dtype=p.dtype))
