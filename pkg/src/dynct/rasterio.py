"""GR64 rasters, PGM previews and flat key=value text files.

GR64 layout: 16-byte header (magic ``b"GR64"``, little-endian u32 rows,
u32 cols, u32 reserved = 0) followed by row-major little-endian float64.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import FlowField, ImageGrid

MAGIC = b"GR64"
_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode_gr64(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype="<f8")
    if v.ndim != 2:
        raise ValueError("GR64 stores 2D arrays")
    return _HEADER.pack(MAGIC, v.shape[0], v.shape[1], 0) + np.ascontiguousarray(v).tobytes()


def decode_gr64(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise RasterFormatError(f"truncated header: {len(data)} of {_HEADER.size} bytes", len(data))
    magic, rows, cols, reserved = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}", 0)
    if reserved != 0:
        raise RasterFormatError("reserved header field is not zero", 12)
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise RasterFormatError(f"payload size mismatch: expected {expected} bytes, got {len(data)}", min(len(data), expected))
    return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)


def save_gr64(path, values) -> None:
    if isinstance(values, ImageGrid):
        values = values.values
    Path(path).write_bytes(encode_gr64(values))


def load_gr64(path) -> np.ndarray:
    return decode_gr64(Path(path).read_bytes())


def load_image(path) -> ImageGrid:
    return ImageGrid(load_gr64(path))


def flow_paths(stem) -> tuple[Path, Path]:
    stem = str(stem)
    for suffix in (".vx.gr64", ".vy.gr64"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    return Path(stem + ".vx.gr64"), Path(stem + ".vy.gr64")


def save_flow(stem, flow: FlowField) -> tuple[Path, Path]:
    px, py = flow_paths(stem)
    save_gr64(px, flow.vx)
    save_gr64(py, flow.vy)
    return px, py


def load_flow(stem) -> FlowField:
    px, py = flow_paths(stem)
    return FlowField(load_gr64(px), load_gr64(py))


def to_pgm(values: np.ndarray) -> bytes:
    """8-bit binary PGM, ``[min, max]`` mapped linearly to ``[0, 255]``.

    A constant image maps to all zeros.
    """
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        q = np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        q = np.zeros(v.shape, dtype=np.uint8)
    rows, cols = v.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + q.tobytes()


def save_pgm(path, values) -> None:
    if isinstance(values, ImageGrid):
        values = values.values
    # row 0 is y = -n/2; write top row first so the picture is upright
    Path(path).write_bytes(to_pgm(np.asarray(values)[::-1]))


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise RasterFormatError("not a binary PGM", 0)
    cols, rows = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def write_keyvalue(path, mapping: dict) -> None:
    lines = [f"{k}={v}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_keyvalue(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_keyvalue(path) -> dict[str, str]:
    return parse_keyvalue(Path(path).read_text(encoding="utf-8"))


# sinograms: GR64 values plus a key=value sidecar with the protocol

_PROTOCOL_KEYS = ("m", "angles_per_scan", "dt", "n_det", "det_spacing", "border")


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def save_sinogram(path, sino) -> None:
    save_gr64(path, sino.values)
    meta = {k: getattr(sino.protocol, k) for k in _PROTOCOL_KEYS}
    meta["scan_index"] = sino.scan_index
    write_keyvalue(sidecar_path(path), meta)


def load_sinogram(path):
    from .geometry import ScanProtocol
    from .projector import Sinogram

    meta = read_keyvalue(sidecar_path(path))
    try:
        protocol = ScanProtocol(
            m=int(meta["m"]),
            angles_per_scan=int(meta["angles_per_scan"]),
            dt=float(meta["dt"]),
            n_det=int(meta["n_det"]),
            det_spacing=float(meta["det_spacing"]),
            border=int(meta["border"]),
        )
        scan = int(meta["scan_index"])
    except KeyError as exc:
        raise ValueError(f"{sidecar_path(path)}: missing key {exc.args[0]}") from None
    return Sinogram(protocol, scan, load_gr64(path))
