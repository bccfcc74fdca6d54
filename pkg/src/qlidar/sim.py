"""Monte Carlo generation of gated SPAD frame stacks.

Scenes combine a photon-pair source, any number of classical sources
(synchronous or asynchronous with the camera) and a detector model with
dark counts, hot pixels, crosstalk and afterpulsing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from . import _kernel
from .core import FrameStack, GateSchedule, GateWindow, sum_intensity

DARK_GATE_INDEX = 0xFFFF_FFFF  # seed stream reserved for dark-frame acquisition


@dataclass(frozen=True, eq=False)
class ObjectTarget:
    mask: np.ndarray  # reflectivity in [0, 1], shape (H, W)
    range_delay: int  # round-trip arrival time at the camera, ps

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        if mask.ndim != 2:
            raise ValueError("target mask must be 2-D")
        if mask.size and (mask.min() < 0 or mask.max() > 1):
            raise ValueError("target reflectivity must lie in [0, 1]")
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True, eq=False)
class PairSourceSpec:
    pairs_per_pulse: float
    beam_profile: np.ndarray
    target: ObjectTarget
    corr_sigma: float = 0.5
    corr_center: tuple[int, int] | None = None  # (row, col) sum-coordinate; None = grid centre

    def __post_init__(self):
        if self.corr_sigma < 0:
            raise ValueError("corr_sigma must be non-negative")
        if self.pairs_per_pulse < 0:
            raise ValueError("pair rate must be non-negative")
        beam = np.asarray(self.beam_profile, dtype=np.float64)
        if beam.shape != self.target.mask.shape:
            raise ValueError("beam profile and target mask differ in shape")
        if beam.min() < 0:
            raise ValueError("beam profile must be non-negative")
        object.__setattr__(self, "beam_profile", beam)

    @property
    def center(self) -> tuple[int, int]:
        if self.corr_center is not None:
            return tuple(int(v) for v in self.corr_center)
        h, w = self.beam_profile.shape
        return (h - 1, w - 1)


@dataclass(frozen=True)
class Synchronous:
    delay: int = 0  # extra emission delay added to the target's range delay, ps


@dataclass(frozen=True)
class Asynchronous:
    period: int = 50_000  # ps

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("asynchronous period must be positive")


@dataclass(frozen=True, eq=False)
class ClassicalSourceSpec:
    photons_per_pulse: float
    illumination: np.ndarray
    target: ObjectTarget
    sync: Synchronous | Asynchronous = field(default_factory=Synchronous)

    def __post_init__(self):
        if self.photons_per_pulse < 0:
            raise ValueError("classical rate must be non-negative")
        illum = np.asarray(self.illumination, dtype=np.float64)
        if illum.shape != self.target.mask.shape:
            raise ValueError("illumination and target mask differ in shape")
        object.__setattr__(self, "illumination", illum)

    @property
    def spatial_weights(self) -> np.ndarray:
        return self.illumination * self.target.mask


@dataclass(frozen=True)
class DetectorSpec:
    pdp: float = 0.25
    dark_rate: float = 2e-4  # mean dark counts per pixel per 1-bit exposure
    hot_pixels: tuple[tuple[tuple[int, int], float], ...] = ()
    crosstalk_p: float = 0.0
    afterpulse_p: float = 0.0
    laser_period: int = 50_000  # ps (20 MHz)
    exposure: int = 350_000  # ps per 1-bit frame
    bits_per_frame: int = 255

    def __post_init__(self):
        for name in ("pdp", "crosstalk_p", "afterpulse_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.dark_rate < 0:
            raise ValueError("dark_rate must be non-negative")
        if self.laser_period <= 0 or self.exposure < self.laser_period:
            raise ValueError("exposure must span at least one laser period")
        if self.bits_per_frame < 1 or self.bits_per_frame > 255:
            raise ValueError("bits_per_frame must be in 1..255")

    @property
    def pulses_per_exposure(self) -> int:
        return self.exposure // self.laser_period

    def dark_map(self, shape: tuple[int, int]) -> np.ndarray:
        rates = np.full(shape, self.dark_rate, dtype=np.float64)
        for (r, c), mult in self.hot_pixels:
            rates[r, c] = self.dark_rate * mult
        return rates


@dataclass(frozen=True, eq=False)
class Scene:
    height: int
    width: int
    pair_source: PairSourceSpec | None = None
    classical_sources: tuple[ClassicalSourceSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "classical_sources", tuple(self.classical_sources))
        for src in ([self.pair_source] if self.pair_source else []) + list(self.classical_sources):
            if src.target.mask.shape != self.shape:
                raise ValueError(f"source grid {src.target.mask.shape} != scene grid {self.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def dark(self) -> "Scene":
        return Scene(self.height, self.width)


def gate_transmission(arrival, gate: GateWindow):
    """Probability that light arriving at ``arrival`` ps passes a soft-edged gate."""
    a = np.asarray(arrival, dtype=np.float64)
    if gate.edge_sigma == 0:
        t = ((a >= gate.start) & (a <= gate.start + gate.width)).astype(np.float64)
    else:
        t = ndtr((a - gate.start) / gate.edge_sigma) - ndtr((a - gate.start - gate.width) / gate.edge_sigma)
    return float(t) if t.ndim == 0 else t


def periodic_transmission(arrival, gate: GateWindow, period: int) -> float:
    """Gate transmission with the gate repeated once per laser period."""
    a = np.asarray(arrival, dtype=np.float64)
    total = sum(gate_transmission(a + k * period, gate) for k in range(-2, 3))
    return np.minimum(total, 1.0)


def async_mean_transmission(gate: GateWindow, period: int) -> float:
    """Mean transmission for arrivals uniform over one period (exactly width/period)."""
    return min(gate.width / period, 1.0)


def _cdf(weights: np.ndarray) -> np.ndarray:
    return np.cumsum(np.asarray(weights, dtype=np.float64).ravel())


class _KernelArgs:
    """Flattened per-gate arguments for the compiled frame loop."""

    def __init__(self, scene: Scene, detector: DetectorSpec, gate: GateWindow):
        h, w = scene.shape
        npix = h * w
        pulses = detector.pulses_per_exposure
        period = detector.laser_period
        ps = scene.pair_source
        if ps is not None and ps.pairs_per_pulse > 0 and ps.beam_profile.sum() > 0:
            t = float(periodic_transmission(ps.target.range_delay, gate, period))
            self.pair_rate = ps.pairs_per_pulse * pulses * t
            self.beam_cdf = _cdf(ps.beam_profile)
            self.s0 = ps.center
            self.corr_sigma = float(ps.corr_sigma)
            self.pair_refl = ps.target.mask.ravel().copy()
        else:
            self.pair_rate = 0.0
            self.beam_cdf = np.ones(npix)
            self.s0 = (h - 1, w - 1)
            self.corr_sigma = 0.0
            self.pair_refl = np.zeros(npix)

        sync_map = np.zeros(npix)
        async_rates, async_cdfs = [], []
        for src in scene.classical_sources:
            weights = src.spatial_weights.ravel()
            if src.photons_per_pulse <= 0 or weights.sum() <= 0:
                continue
            dist = weights / weights.sum()
            if isinstance(src.sync, Synchronous):
                t = float(periodic_transmission(src.target.range_delay + src.sync.delay, gate, period))
                sync_map += src.photons_per_pulse * pulses * detector.pdp * t * dist
            else:
                # one arrival phase per camera pulse; rate rescaled to the camera period
                async_rates.append(src.photons_per_pulse * period / src.sync.period)
                async_cdfs.append(_cdf(dist))
        self.sync_rate = float(sync_map.sum())
        self.sync_cdf = _cdf(sync_map) if self.sync_rate > 0 else np.ones(npix)
        self.async_rates = np.array(async_rates, dtype=np.float64)
        self.async_cdf = np.array(async_cdfs, dtype=np.float64).reshape(len(async_rates), npix)
        if async_rates:
            # 1 ps phase bins, centred; far finer than any gate edge
            phase = np.arange(period, dtype=np.float64) + 0.5
            self.async_table = np.asarray(periodic_transmission(phase, gate, period), dtype=np.float64)
        else:
            self.async_table = np.zeros(1)

        dark = detector.dark_map(scene.shape)
        self.dark_total = float(dark.sum())
        self.dark_cdf = _cdf(dark) if self.dark_total > 0 else np.ones(npix)
        self.detector = detector
        self.gate = gate
        self.shape = (h, w)

    def run(self, seeds: np.ndarray, bits: int) -> np.ndarray:
        h, w = self.shape
        d = self.detector
        return _kernel.simulate_frames(
            seeds, w, h, bits, d.pulses_per_exposure,
            self.pair_rate, self.beam_cdf, self.s0[0], self.s0[1], self.corr_sigma,
            self.pair_refl, d.pdp,
            self.sync_rate, self.sync_cdf,
            self.async_rates, self.async_cdf, self.async_table,
            self.dark_total, self.dark_cdf, d.crosstalk_p, d.afterpulse_p,
        )


def simulate_bit_exposure(scene: Scene, detector: DetectorSpec, gate: GateWindow, rng_state: int) -> FrameStack:
    """A single 1-bit exposure, returned as a one-frame 1-bit stack."""
    seeds = _kernel.frame_seeds(rng_state, 0, [0])
    frames = _KernelArgs(scene, detector, gate).run(seeds, 1)
    return FrameStack(frames, gate=gate, seed=rng_state, bit_depth=1)


def acquire_stack(
    scene: Scene,
    detector: DetectorSpec,
    gate: GateWindow,
    n_frames: int,
    seed: int,
    gate_index: int = 0,
) -> FrameStack:
    """N 8-bit frames, each the sum of ``bits_per_frame`` 1-bit exposures."""
    if n_frames < 1:
        raise ValueError("n_frames must be positive")
    seeds = _kernel.frame_seeds(seed, gate_index, np.arange(n_frames))
    frames = _KernelArgs(scene, detector, gate).run(seeds, detector.bits_per_frame)
    return FrameStack(frames, gate=gate, seed=seed, bit_depth=8)


def acquire_dark_stack(scene: Scene, detector: DetectorSpec, n_frames: int, seed: int) -> FrameStack:
    """Frames with all sources off, for hot-pixel calibration."""
    gate = GateWindow(0, detector.laser_period // 2)
    return acquire_stack(scene.dark(), detector, gate, n_frames, seed, gate_index=DARK_GATE_INDEX)


class ScanDataset(Sequence[FrameStack]):
    """One frame stack per gate position of a schedule.

    Stacks come from ``loader(index)``; simulated scans generate them on demand
    so a long scan never has to sit in memory. Intensity images are cached.
    """

    def __init__(self, schedule: GateSchedule, loader: Callable[[int], FrameStack], n_frames: int | None = None):
        self.schedule = schedule
        self._loader = loader
        self.n_frames = n_frames
        self._intensity: dict[int, np.ndarray] = {}

    @classmethod
    def from_stacks(cls, schedule: GateSchedule, stacks: Sequence[FrameStack]) -> "ScanDataset":
        stacks = list(stacks)
        if len(stacks) != schedule.count:
            raise ValueError("one stack per gate position required")
        return cls(schedule, stacks.__getitem__, stacks[0].n_frames if stacks else None)

    def __len__(self):
        return self.schedule.count

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        stack = self._loader(index)
        if index not in self._intensity:
            self._intensity[index] = sum_intensity(stack)
        return stack

    def intensity(self, index: int) -> np.ndarray:
        if index not in self._intensity:
            self[index]
        return self._intensity[index]

    @cached_property
    def times(self) -> np.ndarray:
        return self.schedule.times


def simulate_linear_scan(
    scene: Scene,
    detector: DetectorSpec,
    schedule: GateSchedule,
    n_frames: int,
    seed: int,
) -> ScanDataset:
    """Independent stacks at every gate of ``schedule``; deterministic under ``seed``."""

    def load(i: int) -> FrameStack:
        return acquire_stack(scene, detector, schedule.gate(i), n_frames, seed, gate_index=i)

    return ScanDataset(schedule, load, n_frames)


def sample_pairs(source: PairSourceSpec, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw (r1, r2) positions of ``n`` emitted pairs, as (row, col) arrays.

    Off-grid partners are returned as (-1, -1). Uses the simulator's own draw.
    """
    h, w = source.beam_profile.shape
    s0 = source.center
    flat = _kernel.sample_pair_positions(_cdf(source.beam_profile), w, h, s0[0], s0[1],
                                         float(source.corr_sigma), n, np.uint32(seed & 0xFFFFFFFF))

    def rc(p):
        return np.where(p[:, None] >= 0, np.stack([p // w, p % w], axis=1), -1)

    return rc(flat[:, 0]), rc(flat[:, 1])
