"""Binary checkpoint files for network parameters.

Layout:

    magic "DMSH" | u32 version | u32 arch length | arch text (utf-8)
    u32 record count
    per record: u32 name length | name (utf-8) | u8 frozen flag
                | u32 ndim | u32 extents... | little-endian f64 data

The arch text is the same line-oriented ``key = value`` format used by the
experiment config files and is enough to rebuild the network before filling
in parameters by name. Optimizer state is deliberately not stored.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import Param

MAGIC = b"DMSH"
VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match expectations."""


def save_checkpoint(path: str | Path, arch_text: str, params: list[Param]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    arch = arch_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(arch)))
    chunks.append(arch)
    chunks.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", 1 if p.frozen else 0))
        chunks.append(struct.pack("<I", p.value.ndim))
        chunks.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[str, list[tuple[str, bool, np.ndarray]]]:
    """Read a checkpoint; returns (arch_text, [(name, frozen, value), ...])."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a checkpoint)")
    off = 4

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, view, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (arch_len,) = take("<I")
    arch_text = bytes(view[off:off + arch_len]).decode("utf-8")
    off += arch_len
    (count,) = take("<I")
    records = []
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[off:off + name_len]).decode("utf-8")
        off += name_len
        (frozen,) = take("<B")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        n_elems = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(view, dtype="<f8", count=n_elems, offset=off)
        off += 8 * n_elems
        records.append((name, bool(frozen), data.astype(np.float64).reshape(shape)))
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return arch_text, records


def fill_params(params: list[Param], records: list[tuple[str, bool, np.ndarray]],
                path: str | Path = "<checkpoint>") -> None:
    """Assign record values onto params, matching by name and shape."""
    by_name = {name: (frozen, value) for name, frozen, value in records}
    for p in params:
        if p.name not in by_name:
            raise CheckpointError(f"{path}: missing parameter '{p.name}'")
        frozen, value = by_name.pop(p.name)
        if value.shape != p.value.shape:
            raise CheckpointError(
                f"{path}: parameter '{p.name}' has shape {value.shape}, "
                f"expected {p.value.shape}")
        p.value = value.copy()
        p.frozen = frozen
    if by_name:
        raise CheckpointError(
            f"{path}: unexpected parameters {sorted(by_name)}")
