"""Flat-blob checkpoint directory format.

A checkpoint is a directory holding `manifest.json` plus one binary blob of
little-endian float32 values.  The manifest records, per tensor name, the
shape and byte offset into the blob, so single tensors can be read without
touching the rest.  Every read goes through an access log, which lets tests
prove that inference never loads training-only weights.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from fico.errors import ConfigError

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(
    path: str | Path, arrays: Mapping[str, np.ndarray], extra: dict | None = None
) -> Path:
    """Serialize named float arrays into a checkpoint directory.

    Args:
        path: target directory (created if needed).
        arrays: name -> array; values are cast to little-endian float32.
        extra: JSON-serializable metadata stored in the manifest.

    Returns:
        The checkpoint directory path.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=_DTYPE)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "f32",
        "endianness": "little",
        "blob": BLOB_NAME,
        "entries": entries,
        "extra": extra or {},
    }
    # Blob lands before the manifest; a manifest therefore marks a complete checkpoint.
    atomic_write_bytes(out / BLOB_NAME, b"".join(chunks))
    atomic_write_text(out / MANIFEST_NAME, json.dumps(manifest, indent=1, sort_keys=True))
    return out


class CheckpointReader:
    """Random access to checkpoint tensors with a read log."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        manifest_path = self.path / MANIFEST_NAME
        if not manifest_path.is_file():
            raise ConfigError(f"no checkpoint manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("dtype") != "f32" or manifest.get("endianness") != "little":
            raise ConfigError(f"unsupported checkpoint encoding in {manifest_path}")
        self._entries = {e["name"]: e for e in manifest["entries"]}
        self.extra: dict = manifest.get("extra", {})
        self._blob = (self.path / manifest["blob"]).read_bytes()
        self.access_log: list[str] = []

    @property
    def names(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def read(self, name: str) -> np.ndarray:
        if name not in self._entries:
            raise KeyError(f"checkpoint has no tensor named {name!r}")
        self.access_log.append(name)
        e = self._entries[name]
        flat = np.frombuffer(self._blob, dtype=_DTYPE, count=e["nbytes"] // 4, offset=e["offset"])
        return flat.reshape(e["shape"]).copy()


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module's state dict into checkpoint arrays under `prefix.`."""
    out = {}
    for key, value in module.state_dict().items():
        out[f"{prefix}.{key}"] = value.detach().cpu().numpy().astype(_DTYPE)
    return out


def load_module(reader: CheckpointReader, module: torch.nn.Module, prefix: str) -> None:
    """Restore a module's state dict from checkpoint arrays under `prefix.`."""
    state = module.state_dict()
    restored = {}
    for key, value in state.items():
        arr = reader.read(f"{prefix}.{key}")
        restored[key] = torch.from_numpy(arr).to(dtype=value.dtype).reshape(value.shape)
    module.load_state_dict(restored)


def arrays_digest(arrays: Mapping[str, np.ndarray]) -> str:
    """Order-independent sha256 over named float32 arrays."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arrays[name], dtype=_DTYPE).tobytes())
    return h.hexdigest()


def module_digest(module: torch.nn.Module, prefix: str = "m") -> str:
    return arrays_digest(module_arrays(module, prefix))


def checkpoint_digest(path: str | Path) -> str:
    """sha256 over manifest and blob bytes."""
    root = Path(path)
    h = hashlib.sha256()
    h.update((root / MANIFEST_NAME).read_bytes())
    h.update((root / BLOB_NAME).read_bytes())
    return h.hexdigest()


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digest(root: str | Path, patterns: Iterable[str] = ("**/*.png",)) -> str:
    """sha256 over relative paths and contents of matching files under root."""
    base = Path(root)
    h = hashlib.sha256()
    paths: list[Path] = []
    for pattern in patterns:
        paths.extend(base.glob(pattern))
    for p in sorted(set(paths)):
        h.update(str(p.relative_to(base)).encode("utf-8"))
        h.update(p.read_bytes())
    return h.hexdigest()
