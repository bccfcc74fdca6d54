"""Shared domain types, time/depth conversion and detector-defect handling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s, exact
# millimetres travelled per picosecond, halved for the round trip
_MM_PER_PS_ROUND_TRIP = SPEED_OF_LIGHT * 1e3 / 1e12 / 2.0


@dataclass(frozen=True)
class GateWindow:
    """Sensitive window of the SPAD relative to the laser trigger (picoseconds)."""

    start: int
    width: int
    edge_sigma: float = 0.0

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"gate width must be positive, got {self.width}")
        if self.edge_sigma < 0:
            raise ValueError(f"edge_sigma must be >= 0, got {self.edge_sigma}")
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "width", int(self.width))

    def shifted(self, start: int) -> "GateWindow":
        return GateWindow(start=int(start), width=self.width, edge_sigma=self.edge_sigma)


@dataclass(frozen=True)
class GateSchedule:
    """Linear gate scan: ``count`` windows starting at ``start0`` every ``step`` ps."""

    start0: int
    step: int
    count: int
    window: GateWindow

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("schedule step must be positive")
        if self.count < 1:
            raise ValueError("schedule needs at least one gate position")

    def start(self, index: int) -> int:
        return self.start0 + index * self.step

    def gate(self, index: int) -> GateWindow:
        if not 0 <= index < self.count:
            raise IndexError(f"gate index {index} outside schedule of {self.count}")
        return self.window.shifted(self.start(index))

    @property
    def times(self) -> np.ndarray:
        return self.start0 + self.step * np.arange(self.count, dtype=np.int64)

    def index_of(self, t_ps: float) -> int:
        """Nearest gate index to time ``t_ps`` (not clipped to the schedule)."""
        return int(np.floor((t_ps - self.start0) / self.step + 0.5))

    def __iter__(self) -> Iterator[GateWindow]:
        return (self.gate(i) for i in range(self.count))

    def __len__(self):
        return self.count


@dataclass(frozen=True, eq=False)
class FrameStack:
    """Frames acquired at one gate position.

    ``frames`` has shape (N, height, width); each frame holds per-pixel counts
    no larger than ``2**bit_depth - 1``.
    """

    frames: np.ndarray
    gate: GateWindow | None = None
    seed: int = 0
    bit_depth: int = 8

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ValueError(f"frames must be (N, H, W), got shape {frames.shape}")
        if self.bit_depth not in (1, 8):
            raise ValueError(f"bit_depth must be 1 or 8, got {self.bit_depth}")
        if frames.size and (frames.min() < 0 or frames.max() > (1 << self.bit_depth) - 1):
            raise ValueError(f"frame values exceed {self.bit_depth}-bit range")
        # a read-only view, so the caller's array stays writable
        frames = frames.astype(np.uint8, copy=False).view()
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def __len__(self):
        return self.n_frames

    def with_frames(self, frames: np.ndarray) -> "FrameStack":
        return FrameStack(frames, gate=self.gate, seed=self.seed, bit_depth=self.bit_depth)

    def __eq__(self, other):
        if not isinstance(other, FrameStack):
            return NotImplemented
        return (
            self.gate == other.gate
            and self.seed == other.seed
            and self.bit_depth == other.bit_depth
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(frozen=True, eq=False)
class HotPixelMask:
    """Boolean (H, W) grid of flagged pixels and the dark-count threshold used."""

    flags: np.ndarray
    threshold: float = 200

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool).view()
        if flags.ndim != 2:
            raise ValueError("hot pixel mask must be two-dimensional")
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @classmethod
    def empty(cls, shape: tuple[int, int], threshold: float = 200) -> "HotPixelMask":
        return cls(np.zeros(shape, dtype=bool), threshold)

    @property
    def shape(self) -> tuple[int, int]:
        return self.flags.shape

    @property
    def coordinates(self) -> set[tuple[int, int]]:
        return {(int(r), int(c)) for r, c in zip(*np.nonzero(self.flags))}

    def __len__(self):
        return int(self.flags.sum())


@dataclass(frozen=True)
class DepthEntry:
    t_ps: float
    depth_mm: float
    label: str
    image: str | None = None
    ambiguous: bool = False


@dataclass(frozen=True)
class DepthReport:
    entries: tuple[DepthEntry, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def quantum(self) -> tuple[DepthEntry, ...]:
        return tuple(e for e in self.entries if e.label == "quantum")


def time_to_depth(t_ps):
    """Round-trip time of flight in picoseconds to depth in millimetres (d = c t / 2)."""
    t = np.asarray(t_ps, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("time of flight must be non-negative")
    d = t * _MM_PER_PS_ROUND_TRIP
    return float(d) if d.ndim == 0 else d


def sum_intensity(stack: FrameStack) -> np.ndarray:
    """Pixel-wise sum of all frames, as exact int64 counts."""
    if stack.n_frames < 1:
        raise ValueError("cannot sum an empty stack")
    return stack.frames.sum(axis=0, dtype=np.int64)


def build_hot_pixel_mask(dark_stack: FrameStack, threshold: float = 200) -> HotPixelMask:
    """Flag pixels whose summed dark count exceeds ``threshold``."""
    if dark_stack.n_frames == 0:
        raise ValueError("dark stack is empty")
    return HotPixelMask(sum_intensity(dark_stack) > threshold, threshold)


def _check_grid(mask: HotPixelMask, shape):
    if mask.shape != tuple(shape):
        raise ValueError(f"mask grid {mask.shape} does not match frame grid {tuple(shape)}")


def zero_hot_pixels(stack: FrameStack, mask: HotPixelMask) -> FrameStack:
    _check_grid(mask, stack.shape)
    if not mask.flags.any():
        return stack
    frames = stack.frames.copy()
    frames[:, mask.flags] = 0
    return stack.with_frames(frames)


def smooth_hot_pixels(image: np.ndarray, mask: HotPixelMask) -> np.ndarray:
    """Replace flagged pixels by the mean of their unflagged 8-neighbours.

    A flagged pixel with no unflagged neighbour becomes 0. Display use only.
    """
    image = np.asarray(image)
    _check_grid(mask, image.shape)
    out = image.astype(np.float64)
    if not mask.flags.any():
        return out
    h, w = image.shape
    good = ~mask.flags
    for r, c in zip(*np.nonzero(mask.flags)):
        r0, r1 = max(r - 1, 0), min(r + 2, h)
        c0, c1 = max(c - 1, 0), min(c + 2, w)
        sel = good[r0:r1, c0:c1]
        out[r, c] = image[r0:r1, c0:c1][sel].mean() if sel.any() else 0.0
    return out
