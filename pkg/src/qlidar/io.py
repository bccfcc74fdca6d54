"""Frame-stack files, PGM images and CSV exports."""
from __future__ import annotations

import csv
import re
import struct
from pathlib import Path

import numpy as np

from .core import FrameStack, GateWindow

MAGIC = b"QLFS"
VERSION = 1
# magic, version, width, height, bit_depth, frame_count, gate_start, gate_width, seed
HEADER = struct.Struct("<4sHHHBIQQQ")
PROFILE_COLUMNS = ("gate_time_ps", "mean_intensity", "corr_peak", "corr_snr")


class FrameFileError(ValueError):
    pass


def body_size(width: int, height: int, frame_count: int) -> int:
    return frame_count * width * height


def write_frame_stack(stack: FrameStack, path) -> Path:
    """Write ``stack`` as a QLFS file (little-endian header, one byte per pixel)."""
    path = Path(path)
    n, h, w = stack.frames.shape
    if max(w, h) > 0xFFFF:
        raise FrameFileError("frame dimensions exceed the 16-bit header fields")
    gate = stack.gate
    start, width = (gate.start, gate.width) if gate is not None else (0, 0)
    if start < 0:
        raise FrameFileError("negative gate start cannot be stored")
    header = HEADER.pack(MAGIC, VERSION, w, h, stack.bit_depth, n, start, width,
                         stack.seed & 0xFFFFFFFFFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(stack.frames, dtype=np.uint8).tobytes())
    return path


def read_header(raw: bytes) -> dict:
    if len(raw) < HEADER.size:
        raise FrameFileError(f"file too short for a header ({len(raw)} < {HEADER.size} bytes)")
    magic, version, w, h, bits, n, start, width, seed = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FrameFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FrameFileError(f"unsupported version {version} (reader handles {VERSION})")
    return dict(width=w, height=h, bit_depth=bits, frame_count=n, gate_start=start,
                gate_width=width, seed=seed)


def read_frame_stack(path) -> FrameStack:
    raw = Path(path).read_bytes()
    hdr = read_header(raw)
    size = body_size(hdr["width"], hdr["height"], hdr["frame_count"])
    body = raw[HEADER.size:]
    if len(body) < size:
        raise FrameFileError(f"truncated body: {len(body)} of {size} bytes")
    if len(body) > size:
        raise FrameFileError(f"{len(body) - size} trailing bytes after the body")
    frames = np.frombuffer(body, dtype=np.uint8).reshape(hdr["frame_count"], hdr["height"], hdr["width"])
    # a zero width means the stack was written without a gate
    gate = GateWindow(hdr["gate_start"], hdr["gate_width"]) if hdr["gate_width"] > 0 else None
    return FrameStack(frames.copy(), gate=gate, seed=hdr["seed"], bit_depth=hdr["bit_depth"])


def scale_to_bytes(image) -> np.ndarray:
    """Min-max scale to 0..255 (rounded); a constant image maps to zeros."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.rint((img - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def export_pgm(image, path) -> Path:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    path = Path(path)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scale_to_bytes(img).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte separates the header from the raster
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    body = raw[m.end():m.end() + w * h]
    if len(body) != w * h:
        raise ValueError("truncated PGM raster")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def export_csv(series, path) -> Path:
    """Write a ProfileSeries (or None for an empty one) with a fixed header."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(PROFILE_COLUMNS)
        if series is not None:
            for row in zip(series.gate_times, series.mean_intensity, series.corr_peak, series.corr_snr):
                wr.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    return path


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = list(zip(*body)) if body else [()] * len(header)
    return {name: np.array(col, dtype=np.float64) for name, col in zip(header, cols)}


def write_rows(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)
    return path
