"""Binary and text file formats shared across the package.

Tensor container: magic ``3DVLA1``, then a little-endian u32 version, then a
sequence of records ``(name_len u32, name utf-8, rank u32, dims u32[rank],
payload f64[prod(dims)] little-endian)`` until end of file. Used both for
parameter checkpoints and for scene tensor sidecars.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"3DVLA1"
VERSION = 1


class FileFormatError(ValueError):
    pass


class UnsupportedVersionError(FileFormatError):
    pass


def fmt(x) -> str:
    """Shortest exact decimal repr of a float (round-trips bit-identically)."""
    return repr(float(x))


def write_tensors(path, tensors: dict[str, np.ndarray], version: int = VERSION) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", version))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise FileFormatError(f"{path}: bad magic, not a tensor container")
    version = struct.unpack_from("<I", raw, len(MAGIC))[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported container version {version}")
    pos = len(MAGIC) + 4
    out: dict[str, np.ndarray] = {}

    def need(n: int, what: str):
        if pos + n > len(raw):
            raise FileFormatError(f"{path}: truncated {what} at offset {pos}")

    while pos < len(raw):
        need(4, "record header")
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(name_len, "record name")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        need(4, "record rank")
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(4 * rank, "record dims")
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(8 * count, "record payload")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out


# ---- PGM (P5) masks --------------------------------------------------------


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a boolean/0-1 mask as binary PGM, foreground = 255."""
    mask = np.asarray(mask)
    h, w = mask.shape
    data = (mask > 0).astype(np.uint8) * 255
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise FileFormatError(f"{path}: not a binary PGM")
    parts = raw.split(b"\n", 3)
    if len(parts) < 4:
        raise FileFormatError(f"{path}: truncated PGM header")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
    return pixels > 127


# ---- ASCII PLY point sets ---------------------------------------------------


def write_ply(path, points: np.ndarray, intensity: np.ndarray | None = None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if intensity is None:
        intensity = np.zeros(len(points))
    intensity = np.asarray(intensity, dtype=np.float64).reshape(-1)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property double x",
        "property double y",
        "property double z",
        "property double intensity",
        "end_header",
    ]
    for (x, y, z), s in zip(points, intensity):
        lines.append(f"{fmt(x)} {fmt(y)} {fmt(z)} {fmt(s)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "ply":
        raise FileFormatError(f"{path}: not a PLY file")
    try:
        header_end = lines.index("end_header")
    except ValueError:
        raise FileFormatError(f"{path}: missing end_header") from None
    count = 0
    for line in lines[:header_end]:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    body = lines[header_end + 1 : header_end + 1 + count]
    if len(body) != count:
        raise FileFormatError(f"{path}: expected {count} vertices, found {len(body)}")
    vals = np.array([[float(v) for v in line.split()] for line in body]).reshape(count, 4)
    return vals[:, :3], vals[:, 3]
