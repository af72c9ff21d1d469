"""Persistence formats: the TPD1 named-array container, binary PPM images,
and line-oriented metric records.

Container layout (all integers little-endian):
    magic   4 bytes  b"TPD1"
    version u32      (currently 1)
    count   u32      number of arrays
    entries, one per array:
        name_len u32, name (UTF-8, name_len bytes),
        dtype u32 (0 = float32), rank u32, dims rank*u64, offset u64
    payload: raw little-endian float32 C-order bytes per array, each at its
    absolute offset, offsets 64-byte aligned and non-overlapping.

Round trips are bit-exact. Only float32 arrays are stored; callers cast.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TPD1"
VERSION = 1
ALIGN = 64
DTYPE_F32 = 0


class ContainerError(ValueError):
    """Raised when a container file fails validation on load."""


def _align(offset: int) -> int:
    return (offset + ALIGN - 1) // ALIGN * ALIGN


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays; iteration order of the dict is preserved."""
    items = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f4")
        if a.ndim:  # ascontiguousarray would promote rank-0 to rank-1
            a = np.ascontiguousarray(a)
        items.append((name, a))

    manifest_size = 12
    for name, a in items:
        manifest_size += 4 + len(name.encode()) + 4 + 4 + 8 * a.ndim + 8

    offsets = []
    cursor = _align(manifest_size)
    for _, a in items:
        offsets.append(cursor)
        cursor = _align(cursor + a.nbytes)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for (name, a), off in zip(items, offsets):
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<II", DTYPE_F32, a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
            fh.write(struct.pack("<Q", off))
        for (_, a), off in zip(items, offsets):
            fh.write(b"\x00" * (off - fh.tell()))
            fh.write(a.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a container back; validates header, offsets, and payload bounds."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ContainerError("bad magic bytes")
    if len(blob) < 12:
        raise ContainerError("truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")

    pos = 12
    entries = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode()
            pos += name_len
            dtype, rank = struct.unpack_from("<II", blob, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            entries.append((name, dtype, dims, offset))
    except struct.error as exc:
        raise ContainerError("truncated manifest") from exc

    spans = []
    out = {}
    for name, dtype, dims, offset in entries:
        if dtype != DTYPE_F32:
            raise ContainerError(f"unknown dtype code {dtype} for {name!r}")
        if name in out:
            raise ContainerError(f"duplicate array name {name!r}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))  # rank 0 -> one scalar
        if offset % ALIGN:
            raise ContainerError(f"misaligned offset for {name!r}")
        if offset + nbytes > len(blob):
            raise ContainerError(f"truncated payload for {name!r}")
        spans.append((offset, offset + nbytes, name))
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset)
        out[name] = arr.reshape(dims).copy()
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if e0 > s1:
            raise ContainerError(f"overlapping payloads: {n0!r} and {n1!r}")
    return out


# ---------------------------------------------------------------------------
# PPM images
# ---------------------------------------------------------------------------


def save_ppm(path, image) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary PPM (P6, 8-bit)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError("not an 8-bit P6 PPM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# metric records
# ---------------------------------------------------------------------------


def format_metric_value(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def append_metrics(path, record: dict) -> None:
    """Append one space-separated key=value line per record."""
    parts = []
    for key, value in record.items():
        text = format_metric_value(value)
        if " " in key or "=" in key or " " in text:
            raise ValueError(f"metric {key!r} would break the line format")
        parts.append(f"{key}={text}")
    with open(path, "a") as fh:
        fh.write(" ".join(parts) + "\n")


def read_metrics(path) -> list[dict[str, str]]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        records.append(dict(part.split("=", 1) for part in line.split(" ")))
    return records
