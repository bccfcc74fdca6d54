"""Photon-coincidence estimators built on frame-to-frame differences.

For frames I_1..I_N the joint distribution is estimated as

    G(i, j) = 1/(N-1) * sum_{l=2..N} I_l(i) * (I_l(j) - I_{l-1}(j))

so that coincidences within a frame are kept and accidental ones (estimated
from consecutive frames) are removed. Sum-coordinate projections and the
anti-diagonal are computed without materialising G.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.fft

from .core import FrameStack

MAX_JPD_PIXELS = 32 * 32
FOUR_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))
EIGHT_NEIGHBOURS = FOUR_NEIGHBOURS + ((-1, -1), (-1, 1), (1, -1), (1, 1))


@dataclass(frozen=True, eq=False)
class JpdMatrix:
    """Dense JPD over a small region: ``numerator / denominator``.

    Entry (i, j) refers to flat (row-major) pixel indices of the region.
    """

    numerator: np.ndarray
    denominator: int
    shape: tuple[int, int]

    @property
    def values(self) -> np.ndarray:
        return self.numerator / self.denominator

    def pixel_index(self, row: int, col: int) -> int:
        return row * self.shape[1] + col


@dataclass(frozen=True)
class PeakStats:
    peak_value: float
    peak_location: tuple[int, int]
    background_mean: float
    background_std: float
    snr: float


def _require_pairs(stack: FrameStack):
    if stack.n_frames < 2:
        raise ValueError("correlation needs at least two frames")


def _crop(stack: FrameStack, region):
    if region is None:
        return stack.frames
    r0, c0, h, w = region
    if r0 < 0 or c0 < 0 or r0 + h > stack.height or c0 + w > stack.width:
        raise ValueError(f"region {region} outside the {stack.shape} frame grid")
    return stack.frames[:, r0:r0 + h, c0:c0 + w]


def jpd_bruteforce(stack: FrameStack, region=None) -> JpdMatrix:
    """Full JPD over ``region`` = (row0, col0, height, width), exact integers.

    Only meant as an oracle: regions are limited to 32x32 pixels.
    """
    _require_pairs(stack)
    frames = _crop(stack, region)
    n, h, w = frames.shape
    if h * w > MAX_JPD_PIXELS:
        raise ValueError(f"region of {h * w} pixels exceeds the {MAX_JPD_PIXELS}-pixel JPD limit")
    a = frames.reshape(n, h * w).astype(np.int64)
    num = a[1:].T @ (a[1:] - a[:-1])
    return JpdMatrix(num, n - 1, (h, w))


@numba.njit(cache=True)
def _gamma_plus_direct(frames):
    n, h, w = frames.shape
    acc = np.zeros((2 * h - 1, 2 * w - 1), dtype=np.int64)
    diff = np.empty((h, w), dtype=np.int64)
    for ell in range(1, n):
        for r in range(h):
            for c in range(w):
                diff[r, c] = np.int64(frames[ell, r, c]) - np.int64(frames[ell - 1, r, c])
        for r1 in range(h):
            for c1 in range(w):
                v = np.int64(frames[ell, r1, c1])
                for r2 in range(h):
                    row = acc[r1 + r2]
                    drow = diff[r2]
                    for c2 in range(w):
                        row[c1 + c2] += v * drow[c2]
    return acc


def gamma_plus_numerator(stack: FrameStack) -> np.ndarray:
    """Exact integer numerator of the sum-coordinate image (direct convolution)."""
    _require_pairs(stack)
    return _gamma_plus_direct(stack.frames)


def _fft_gamma_plus(frames: np.ndarray, chunk: int = 64) -> np.ndarray:
    n, h, w = frames.shape
    shape = (scipy.fft.next_fast_len(2 * h - 1, real=True), scipy.fft.next_fast_len(2 * w - 1, real=True))
    acc = None
    prev = None
    for lo in range(0, n, chunk):
        block = scipy.fft.rfft2(frames[lo:lo + chunk].astype(np.float64), s=shape, axes=(1, 2))
        if prev is None:
            cur, before = block[1:], block[:-1]
        else:
            cur, before = block, np.concatenate([prev[None], block[:-1]])
        term = (cur * (cur - before)).sum(axis=0)
        acc = term if acc is None else acc + term
        prev = block[-1]
    full = scipy.fft.irfft2(acc, s=shape)
    return full[: 2 * h - 1, : 2 * w - 1]


def gamma_plus(stack: FrameStack, method: str = "fft") -> np.ndarray:
    """Spatially-averaged correlation image over sum coordinates r1 + r2.

    Returns a (2H-1, 2W-1) array indexed by the sum coordinate (row, col);
    ordered pixel pairs are counted, so each unordered pair contributes twice.
    """
    _require_pairs(stack)
    n = stack.n_frames
    if method == "direct":
        return gamma_plus_numerator(stack) / (n - 1)
    if method == "fft":
        return _fft_gamma_plus(stack.frames) / (n - 1)
    raise ValueError(f"unknown method {method!r}; expected 'direct' or 'fft'")


def sum_image_center(shape: tuple[int, int]) -> tuple[int, int]:
    """Sum coordinate of the geometric centre of a (2H-1, 2W-1) image."""
    return (shape[0] // 2, shape[1] // 2)


def _partner_index(h: int, w: int, center):
    s0r, s0c = center
    rows = s0r - np.arange(h)[:, None]
    cols = s0c - np.arange(w)[None, :]
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    return np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1), valid


def gamma_antidiag_numerator(stack: FrameStack, center=None) -> np.ndarray:
    _require_pairs(stack)
    n, h, w = stack.frames.shape
    if center is None:
        center = (h - 1, w - 1)
    rows, cols, valid = _partner_index(h, w, center)
    f = stack.frames.astype(np.int64)
    partner = f[:, rows, cols]
    num = (f[1:] * (partner[1:] - partner[:-1])).sum(axis=0)
    num[~valid] = 0
    return num


def gamma_antidiag(stack: FrameStack, center=None) -> np.ndarray:
    """Coincidences between each pixel r and its mirror ``center - r``.

    ``center`` is a sum coordinate (row, col); the default is the grid centre.
    Pixels whose partner falls off the grid are 0.
    """
    return gamma_antidiag_numerator(stack, center) / (stack.n_frames - 1)


def _offsets(neighborhood, include_self: bool):
    if neighborhood in (4, "4"):
        offsets = list(FOUR_NEIGHBOURS)
    elif neighborhood in (8, "8"):
        offsets = list(EIGHT_NEIGHBOURS)
    else:
        offsets = [tuple(d) for d in neighborhood]
    if include_self and (0, 0) not in offsets:
        offsets.append((0, 0))
    return offsets


def crosstalk_numerator(stack: FrameStack, neighborhood=4, include_self: bool = False) -> np.ndarray:
    """Integer contribution of pixel pairs (r, r + d), d in the neighbourhood, to the sum image."""
    _require_pairs(stack)
    n, h, w = stack.frames.shape
    f = stack.frames.astype(np.int64)
    diff = f[1:] - f[:-1]
    out = np.zeros((2 * h - 1, 2 * w - 1), dtype=np.int64)
    for dr, dc in _offsets(neighborhood, include_self):
        # r ranges over pixels whose partner r + d stays on the grid
        r0, r1 = max(0, -dr), min(h, h - dr)
        c0, c1 = max(0, -dc), min(w, w - dc)
        if r0 >= r1 or c0 >= c1:
            continue
        prod = (f[1:, r0:r1, c0:c1] * diff[:, r0 + dr:r1 + dr, c0 + dc:c1 + dc]).sum(axis=0)
        out[2 * r0 + dr:2 * (r1 - 1) + dr + 1:2, 2 * c0 + dc:2 * (c1 - 1) + dc + 1:2] += prod
    return out


def remove_crosstalk(sum_image: np.ndarray, stack: FrameStack, neighborhood=4, include_self: bool = False) -> np.ndarray:
    """Subtract the coincidences of directly neighbouring pixels from a sum image.

    ``stack`` must be the one ``sum_image`` was computed from. With
    ``include_self`` the same-pixel terms (afterpulsing, shot-noise diagonal) go too.
    """
    corr = crosstalk_numerator(stack, neighborhood, include_self)
    if corr.shape != np.shape(sum_image):
        raise ValueError("sum image does not belong to this stack")
    return np.asarray(sum_image, dtype=np.float64) - corr / (stack.n_frames - 1)


def peak_stats(sum_image: np.ndarray, exclusion: int = 4, search: int = 0, outer: int | None = 8) -> PeakStats:
    """Peak of the central window and its SNR against the surrounding background.

    The peak is the maximum inside the central (2*search+1)^2 window. Background
    statistics use pixels outside the central (2*exclusion+1)^2 window and, if
    ``outer`` is given, inside the central (2*outer+1)^2 window.
    SNR = peak / background std (infinite when the background is flat).
    """
    if exclusion < search:
        raise ValueError("exclusion window must contain the search window")
    img = np.asarray(sum_image, dtype=np.float64)
    cr, cc = sum_image_center(img.shape)
    if cr < exclusion or cc < exclusion:
        raise ValueError(f"image {img.shape} smaller than the exclusion window")
    win = img[cr - search:cr + search + 1, cc - search:cc + search + 1]
    k = int(np.argmax(win))
    loc = (cr - search + k // win.shape[1], cc - search + k % win.shape[1])
    peak = float(win.flat[k])

    bg = np.ones(img.shape, dtype=bool)
    bg[cr - exclusion:cr + exclusion + 1, cc - exclusion:cc + exclusion + 1] = False
    if outer is not None:
        if outer <= exclusion:
            raise ValueError("outer window must be larger than the exclusion window")
        inside = np.zeros(img.shape, dtype=bool)
        inside[max(cr - outer, 0):cr + outer + 1, max(cc - outer, 0):cc + outer + 1] = True
        bg &= inside
    values = img[bg]
    if values.size == 0:
        raise ValueError("no background pixels left")
    mean = float(values.mean())
    std = float(values.std())
    snr = peak / std if std > 0 else float("inf")
    return PeakStats(peak, loc, mean, std, snr)
