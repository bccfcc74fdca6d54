"""Correlation-driven gate search.

Instead of scanning every gate position, a few probes locate the plateau of
the correlation-peak profile, a bisection narrows down its falling edge and a
final erf fit over the probed points yields the arrival time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import FrameStack
from .correlation import gamma_plus, peak_stats, remove_crosstalk
from .ranging import EdgeFit, NoEdgeFound, PipelineParams, fit_erf_edge

PHASES = ("coarse", "anti-false", "refine", "fit")


class NoQuantumSignal(RuntimeError):
    """No probe showed a correlation peak above the detection threshold."""

    def __init__(self, message, probes=()):
        super().__init__(message)
        self.probes = list(probes)


@dataclass(frozen=True)
class Probe:
    index: int
    corr_peak: float
    corr_snr: float
    phase: str


@dataclass(frozen=True)
class SearchParams:
    range_gates: int = 2800
    coarse_interval: int = 700
    check_offset: int = 45
    stop_width: int = 90
    snr_threshold: float = 3.0
    # a probe counts as "high" when its peak reaches this fraction of the best peak
    high_fraction: float = 0.5
    # probes added inside the final bracket before fitting; more are added
    # only while the fit has fewer than min_fit_points samples
    extra_probes: int = 1
    min_fit_points: int = 8
    step_ps: float = 18.0
    start_ps: float = 0.0
    # gate width in gate steps, if known; it bounds how far past a high probe
    # the edge can be. Without it only the coarse interval is assumed.
    gate_gates: int | None = None
    # laser period in gate steps, if known. The gate profile repeats with the
    # laser, so a probe below the plateau is also a baseline sample one period
    # later, behind the falling edge.
    period_gates: float | None = None

    @property
    def plateau(self) -> int:
        return self.gate_gates if self.gate_gates else self.coarse_interval


@dataclass
class SearchState:
    range_gates: int
    probed: list[Probe] = field(default_factory=list)
    bracket: tuple[int, int] | None = None
    phase: str = "coarse"
    widths: list[int] = field(default_factory=list)

    def seen(self, index: int) -> bool:
        return any(p.index == index for p in self.probed)

    def get(self, index: int) -> Probe:
        for p in self.probed:
            if p.index == index:
                return p
        raise KeyError(index)

    def set_bracket(self, lo: int, hi: int):
        if not lo < hi:
            raise ValueError(f"empty bracket ({lo}, {hi})")
        if not (0 <= lo < self.range_gates and 0 <= hi <= self.range_gates):
            raise ValueError(f"bracket ({lo}, {hi}) outside the scan range")
        self.bracket = (lo, hi)
        self.widths.append(hi - lo)


@dataclass
class SearchResult:
    edge: EdgeFit
    probes: list[Probe]
    bracket: tuple[int, int]
    widths: list[int] = field(default_factory=list)  # bracket width after each update

    @property
    def n_probes(self) -> int:
        return len(self.probes)

    @property
    def t0_index(self) -> float:
        return self.edge.t0


# 5000 8-bit frames take 13.5 s on the camera: 2.7 ms per frame, about 370 fps
ACQUISITION_FPS = 5000 / 13.5


def probe_cost_model(n_probes: int, n_frames: int, fps: float = ACQUISITION_FPS, bits: int = 255) -> float:
    """Acquisition time in seconds: one 8-bit frame (``bits`` exposures) per 1/fps.

    Rounded to the nanosecond so that, e.g., 300 frames cost 0.81 s rather
    than 0.8099999999999999 s.
    """
    if n_probes < 0 or n_frames < 0 or fps <= 0 or bits <= 0:
        raise ValueError("probe cost inputs must be positive")
    return round(n_probes * n_frames * (bits / 255) / fps, 9)


def stack_peak(stack: FrameStack, params: PipelineParams = PipelineParams()) -> tuple[float, float]:
    """(peak, SNR) of the crosstalk-corrected sum image of one stack."""
    g = gamma_plus(stack, params.method)
    g = remove_crosstalk(g, stack, params.neighborhood, params.include_self)
    st = peak_stats(g, params.exclusion, params.search, params.outer)
    return st.peak_value, st.snr


class _Searcher:
    def __init__(self, measure: Callable[[int], tuple[float, float]], params: SearchParams):
        self.measure = measure
        self.p = params
        self.state = SearchState(params.range_gates)

    def probe(self, index: int, phase: str) -> Probe:
        index = int(min(max(index, 0), self.p.range_gates - 1))
        if self.state.seen(index):
            return self.state.get(index)
        peak, snr = self.measure(index)
        pr = Probe(index, float(peak), float(snr), phase)
        self.state.probed.append(pr)
        return pr

    def reference(self) -> float:
        good = [p.corr_peak for p in self.state.probed if p.corr_snr >= self.p.snr_threshold]
        return max(good) if good else np.inf

    def is_high(self, pr: Probe) -> bool:
        return pr.corr_snr >= self.p.snr_threshold and pr.corr_peak >= self.p.high_fraction * self.reference()

    def ordered(self) -> list[Probe]:
        return sorted(self.state.probed, key=lambda p: p.index)

    def run(self) -> SearchResult:
        p, st = self.p, self.state
        coarse = [self.probe(k, "coarse") for k in range(p.coarse_interval, p.range_gates, p.coarse_interval)]
        if not coarse:
            raise ValueError("scan range shorter than one coarse interval")
        cleared = [c for c in coarse if c.corr_snr >= p.snr_threshold]
        cand = max(cleared or coarse, key=lambda c: c.corr_peak)

        st.phase = "anti-false"
        self.probe(cand.index - p.check_offset, st.phase)
        self.probe(cand.index + p.check_offset, st.phase)
        if not any(pr.corr_snr >= p.snr_threshold for pr in st.probed):
            raise NoQuantumSignal("no quantum signal in range", st.probed)
        # the best peak may now come from a check probe
        cand = max((pr for pr in st.probed if self.is_high(pr)), key=lambda pr: pr.corr_peak)

        lo, hi = self._bracket_from(cand.index)
        if p.gate_gates:
            # a plateau is one gate width long: the edge follows its first high probe by at most that
            limit = self._run_start(lo, lo - p.range_gates) + p.gate_gates + p.check_offset
            hi = max(min(hi, limit), lo + 1)
        st.set_bracket(lo, hi)

        st.phase = "refine"
        while hi - lo > p.stop_width:
            mid = (lo + hi) // 2
            if self.is_high(self.probe(mid, st.phase)):
                lo = mid
            else:
                hi = mid
            st.set_bracket(lo, hi)

        st.phase = "fit"
        return SearchResult(self._fit(lo, hi), list(st.probed), (lo, hi), list(st.widths))

    def _bracket_from(self, start: int) -> tuple[int, int]:
        """Last high gate at or after ``start`` and the probed gate just after it."""
        lo, hi = start, self.p.range_gates
        for pr in self.ordered():
            if pr.index <= start:
                continue
            if self.is_high(pr):
                lo = pr.index
            else:
                hi = pr.index
                break
        return lo, hi

    def _run_start(self, lo: int, floor: int) -> int:
        """First probe of the contiguous high run ending at ``lo`` (not below ``floor``)."""
        first = lo
        for pr in reversed([q for q in self.ordered() if floor <= q.index <= lo]):
            if not self.is_high(pr):
                break
            first = pr.index
        return first

    def _fit_points(self, lo: int) -> list[tuple[float, Probe]]:
        """(position, probe) samples for the edge fit.

        The high run ending at ``lo`` and everything after it. The run is cut
        short so the rising edge of the plateau (one gate width before the
        falling one) stays out of a single-edge fit. With a known laser period,
        probes before the run that show no peak at all are moved one period on.
        """
        floor = lo - (self.p.plateau - self.p.stop_width - self.p.check_offset)
        first = self._run_start(lo, floor)
        pts = [(float(q.index), q) for q in self.ordered() if q.index >= first]
        if self.p.period_gates:
            pts += [(q.index + self.p.period_gates, q) for q in self.ordered()
                    if q.index < first and q.corr_snr < self.p.snr_threshold]
        return sorted(pts, key=lambda tq: tq[0])

    def _fill_bracket(self, lo: int, top: int) -> bool:
        """Probe the middle of the widest unprobed gap inside the bracket."""
        inside = sorted({lo, top} | {q.index for q in self.state.probed if lo <= q.index <= top})
        gaps = [(b - a, a, b) for a, b in zip(inside, inside[1:]) if b - a > 1]
        if not gaps:
            return False
        _, a, b = max(gaps)
        self.probe((a + b) // 2, "fit")
        return True

    def _fit(self, lo: int, hi: int) -> EdgeFit:
        p = self.p
        top = min(hi, p.range_gates - 1)
        for _ in range(p.extra_probes):
            if not self._fill_bracket(lo, top):
                break
        # the baseline after the edge must be sampled beyond the bracket too
        if sum(x >= top for x, _ in self._fit_points(lo)) < 2 and top < p.range_gates - 1:
            self.probe(top + p.check_offset, "fit")
        while len(self._fit_points(lo)) < p.min_fit_points and self._fill_bracket(lo, top):
            pass
        pts = self._fit_points(lo)
        t = np.array([x for x, _ in pts])
        y = np.array([q.corr_peak for _, q in pts])
        try:
            return fit_erf_edge(t, y, step=1.0, smooth=1)
        except NoEdgeFound as exc:
            raise NoQuantumSignal(f"edge fit failed: {exc}", self.state.probed) from exc


def search_profile(measure: Callable[[int], tuple[float, float]],
                   params: SearchParams = SearchParams()) -> SearchResult:
    """Run the search against ``measure(gate_index) -> (corr_peak, corr_snr)``.

    The returned edge has t0 and sigma in gate-index units.
    """
    return _Searcher(measure, params).run()


def correlation_driven_search(acquire: Callable[[int, int], FrameStack], range_gates: int = 2800,
                              n_frames: int = 300, params: SearchParams | None = None,
                              pipeline: PipelineParams = PipelineParams()) -> tuple[EdgeFit, list[Probe]]:
    """Locate the quantum falling edge with as few gate probes as possible.

    ``acquire(gate_index, n_frames)`` returns the stack recorded at that gate.
    Returns the edge fit (t0 and sigma in picoseconds, label "quantum") and
    the probe log in acquisition order. Raises NoQuantumSignal when no probe
    shows a correlation peak.
    """
    if params is None:
        params = SearchParams(range_gates=range_gates)
    elif params.range_gates != range_gates:
        params = SearchParams(**{**params.__dict__, "range_gates": range_gates})

    def measure(index):
        return stack_peak(acquire(index, n_frames), pipeline)

    res = search_profile(measure, params)
    e = res.edge
    scale = params.step_ps
    edge = EdgeFit(A=e.A, B=e.B, t0=params.start_ps + e.t0 * scale, sigma=e.sigma * scale, rms_residual=e.rms_residual,
                   label="quantum", source="adaptive", n_points=e.n_points)
    return edge, res.probes
