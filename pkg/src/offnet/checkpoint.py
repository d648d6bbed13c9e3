"""Checkpoint directories: a text manifest plus one little-endian float32 blob.

Layout of ``<dir>/manifest.txt``::

    offnet-checkpoint v1
    iteration 2000
    config levels=3
    ...
    params 2
    param backbone.l0.w float32 8,1,3,3 0
    param backbone.l0.b float32 8 288

The last field is the byte offset into ``<dir>/params.bin``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MANIFEST = "manifest.txt"
BLOB = "params.bin"
_MAGIC = "offnet-checkpoint v1"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict[str, str] = field(default_factory=dict)
    iteration: int = 0

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v.copy(), requires_grad=requires_grad) for k, v in self.params.items()}


def save_checkpoint(
    params: Mapping[str, Tensor | np.ndarray],
    path: str | Path,
    config: Mapping[str, str] | None = None,
    iteration: int = 0,
) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [_MAGIC, f"iteration {int(iteration)}"]
    for key, value in (config or {}).items():
        if any(ch.isspace() for ch in key) or "\n" in str(value):
            raise FormatError(f"config entry {key!r} cannot be stored in a manifest line")
        lines.append(f"config {key}={value}")
    lines.append(f"params {len(params)}")
    chunks = []
    offset = 0
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"param {name} float32 {shape} {offset}")
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    (out / BLOB).write_bytes(b"".join(chunks))
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out


def load_checkpoint(path: str | Path, expected: Iterable[str] | None = None) -> Checkpoint:
    """Read a checkpoint; ``expected`` names parameters that must be present."""
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FormatError(f"{manifest} not found")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise FormatError(f"{manifest}: not an offnet checkpoint")
    blob = (root / BLOB).read_bytes() if (root / BLOB).is_file() else b""

    iteration = 0
    config: dict[str, str] = {}
    declared = None
    entries: list[tuple[str, tuple[int, ...], int, int]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        kind, _, rest = line.partition(" ")
        try:
            if kind == "iteration":
                iteration = int(rest)
            elif kind == "config":
                key, _, value = rest.partition("=")
                config[key] = value
            elif kind == "params":
                declared = int(rest)
            elif kind == "param":
                name, dtype, shape_s, offset_s = rest.split(" ")
                if dtype != "float32":
                    raise FormatError(f"{manifest}:{lineno}: entry {name!r} has unsupported dtype {dtype}")
                shape = tuple(int(d) for d in shape_s.split(",") if d)
                entries.append((name, shape, int(offset_s), lineno))
            elif line.strip():
                raise FormatError(f"{manifest}:{lineno}: unrecognised line {line!r}")
        except ValueError:
            raise FormatError(f"{manifest}:{lineno}: malformed line {line!r}") from None

    if declared is None:
        raise FormatError(f"{manifest}: missing 'params' count")
    if declared != len(entries):
        raise FormatError(f"{manifest}: declares {declared} parameters but lists {len(entries)}")

    params: dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape, offset, lineno in entries:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset != cursor:
            raise FormatError(f"{manifest}:{lineno}: entry {name!r} has offset {offset}, expected {cursor}")
        if offset + nbytes > len(blob):
            raise FormatError(f"{BLOB} truncated: entry {name!r} needs bytes {offset}..{offset + nbytes}")
        if name in params:
            raise FormatError(f"{manifest}:{lineno}: duplicate entry {name!r}")
        params[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        cursor = offset + nbytes
    if cursor != len(blob):
        raise FormatError(f"{BLOB} has {len(blob) - cursor} trailing bytes")
    for name in expected or ():
        if name not in params:
            raise FormatError(f"{manifest}: parameter {name!r} missing")
    return Checkpoint(params=params, config=config, iteration=iteration)
