"""On-disk run artifacts: binary checkpoints, metric/trace CSVs and run manifests."""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"SNAGCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config_echo: str,
                    task: str) -> None:
    """Layout (little-endian): magic, u32 version, task and config echo as u32-length-prefixed
    UTF-8, u32 tensor count, then per tensor: name, u32 ndim, u32 dims, float64 data."""
    def text(s: str) -> bytes:
        raw = s.encode("utf-8")
        return struct.pack("<I", len(raw)) + raw

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(text(task))
        fh.write(text(config_echo))
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            fh.write(text(name))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[str, str, dict[str, np.ndarray]]:
    """Return ``(task, config_echo, tensors)``."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    def text() -> str:
        return take(u32()).decode("utf-8")

    version = u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    task, echo = text(), text()
    tensors = {}
    for _ in range(u32()):
        name = text()
        ndim = u32()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    return task, echo, tensors


def assign_parameters(params: dict, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into named parameters; names and shapes must match exactly."""
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match the model: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} in checkpoint, "
                                  f"{p.data.shape} in model")
        p.data[...] = tensors[name]


def format_cell(value) -> str:
    """Deterministic text for CSV cells; floats use the shortest round-tripping repr."""
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "nan" if math.isnan(value) else repr(value)
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path: str | Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def aligned_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[format_cell(v) if not isinstance(v, float)
                                         else f"{v:.4f}" for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict:
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("version", "command", "seed", "config"):
        if key not in manifest:
            raise ValueError(f"{path}: manifest lacks {key!r}")
    return manifest
