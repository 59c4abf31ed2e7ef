"""Checkpoint directories: ``manifest.json`` plus one raw float32 file per array.

The manifest records the format version, and for every array its file,
shape, dtype (``f32-le``), byte offset, byte length and CRC32, together
with the step counter, config snapshot and batch-sampler state.
"""
from __future__ import annotations

import json
import shutil
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionError, CorruptCheckpointError

FORMAT_VERSION = 1
DTYPE = "f32-le"
MANIFEST = "manifest.json"


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    step: int
    config: dict
    attribute_names: list[str]
    rng_state: dict | None = None
    version: int = FORMAT_VERSION


def _array_file(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def save_checkpoint(ckpt, path: str | Path) -> Path:
    """Write atomically: build a sibling temp dir, then rename it into place."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = ckpt.to_checkpoint()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".tmp-", dir=path.parent))
    try:
        entries = []
        for name in sorted(ckpt.arrays):
            data = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4").tobytes()
            fname = _array_file(name)
            (tmp / fname).write_bytes(data)
            entries.append({
                "name": name,
                "file": fname,
                "shape": list(ckpt.arrays[name].shape),
                "dtype": DTYPE,
                "offset": 0,
                "nbytes": len(data),
                "crc32": zlib.crc32(data),
            })
        manifest = {
            "format_version": ckpt.version,
            "step": ckpt.step,
            "attribute_names": ckpt.attribute_names,
            "config": ckpt.config,
            "rng_state": ckpt.rng_state,
            "arrays": entries,
        }
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        old = None
        if path.exists():
            old = path.with_name(path.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            path.rename(old)
        tmp.rename(path)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path: str | Path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptCheckpointError(f"corrupt manifest {mpath}: {e}") from e
    if not isinstance(manifest, dict) or "format_version" not in manifest or "arrays" not in manifest:
        raise CorruptCheckpointError(f"manifest {mpath} lacks required fields")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {manifest['format_version']} is not supported (expected {FORMAT_VERSION})"
        )
    return manifest


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest = read_manifest(path)
    arrays = {}
    for entry in manifest["arrays"]:
        try:
            name, fname, shape = entry["name"], entry["file"], tuple(entry["shape"])
            offset, nbytes, crc, dtype = entry["offset"], entry["nbytes"], entry["crc32"], entry["dtype"]
        except (KeyError, TypeError) as e:
            raise CorruptCheckpointError(f"malformed manifest entry {entry!r}") from e
        if dtype != DTYPE:
            raise CorruptCheckpointError(f"array {name!r} has unsupported dtype {dtype!r}")
        fpath = path / fname
        if not fpath.is_file():
            raise CorruptCheckpointError(f"array file {fname} for {name!r} is missing")
        raw = fpath.read_bytes()[offset : offset + nbytes]
        if len(raw) != nbytes or nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(f"array {name!r} is truncated")
        if zlib.crc32(raw) != crc:
            raise CorruptCheckpointError(f"CRC mismatch for array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(
        arrays=arrays,
        step=int(manifest.get("step", 0)),
        config=manifest.get("config", {}),
        attribute_names=list(manifest.get("attribute_names", [])),
        rng_state=manifest.get("rng_state"),
        version=manifest["format_version"],
    )
