"""From a gate scan to depths: profiles, falling-edge fits and labelling."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.optimize import least_squares
from scipy.special import ndtr, ndtri

from .core import (
    DepthEntry,
    DepthReport,
    HotPixelMask,
    smooth_hot_pixels,
    time_to_depth,
    zero_hot_pixels,
)
from .correlation import gamma_plus, peak_stats, remove_crosstalk
from .sim import ScanDataset

# 90 % -> 10 % span of a Gaussian-blurred step, in units of sigma
FALL_FACTOR = 2.0 * float(ndtri(0.9))
_SQRT_2PI = np.sqrt(2.0 * np.pi)


class NoEdgeFound(ValueError):
    """The profile segment does not contain a resolvable falling edge."""


@dataclass(frozen=True)
class PipelineParams:
    hot_threshold: float = 200
    dark_frames: int = 100
    method: str = "fft"
    neighborhood: int = 4
    include_self: bool = True
    exclusion: int = 4
    search: int = 0
    outer: int | None = 8
    smooth: int = 5
    detect_k: float = 3.0
    window: int = 60
    merge: int = 20
    tolerance: int = 30
    subtraction_offset: int = 45


@dataclass(frozen=True)
class ProfileSeries:
    gate_times: np.ndarray
    mean_intensity: np.ndarray
    corr_peak: np.ndarray
    corr_snr: np.ndarray

    def __post_init__(self):
        n = len(self.gate_times)
        for name in ("mean_intensity", "corr_peak", "corr_snr"):
            if len(getattr(self, name)) != n:
                raise ValueError("profile series must have equal lengths")
        if n > 1 and np.any(np.diff(self.gate_times) <= 0):
            raise ValueError("gate times must be strictly increasing")

    def __len__(self):
        return len(self.gate_times)

    @property
    def step(self) -> float:
        return float(np.median(np.diff(self.gate_times))) if len(self) > 1 else 1.0


@dataclass(frozen=True)
class EdgeFit:
    A: float
    B: float
    t0: float
    sigma: float
    rms_residual: float
    label: str = "unlabeled"
    ambiguous: bool = False
    source: str = ""
    n_points: int = 0

    @property
    def fall_time_90_10(self) -> float:
        return FALL_FACTOR * self.sigma

    def model(self, t):
        return erf_edge(t, self.A, self.B, self.t0, self.sigma)


@dataclass(frozen=True, eq=False)
class SubtractionImage:
    image: np.ndarray
    before_index: int
    after_index: int
    clipped: bool = False


def erf_edge(t, A, B, t0, sigma):
    """B + A/2 * (1 - erf((t - t0) / (sigma sqrt 2))): a blurred falling step."""
    return B + A * ndtr((t0 - np.asarray(t, dtype=np.float64)) / sigma)


def _smoothed(y: np.ndarray, width: int) -> np.ndarray:
    return uniform_filter1d(np.asarray(y, dtype=np.float64), size=max(int(width), 1), mode="nearest")


def fit_erf_edge(t, y, *, step: float | None = None, smooth: int = 5, xtol: float = 1e-6,
                 max_iter: int = 200) -> EdgeFit:
    """Least-squares fit of a single falling erf edge.

    Raises NoEdgeFound on non-convergence, a rising or non-positive step, a
    midpoint outside the data, or an amplitude not above 3x the rms residual.
    """
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if t.shape != y.shape or t.size < 8:
        raise NoEdgeFound("need at least 8 samples")
    order = np.argsort(t)
    t, y = t[order], y[order]
    if np.any(np.diff(t) == 0):
        raise NoEdgeFound("duplicate sample times")
    if step is None:
        step = float(np.median(np.diff(t)))
    # work in gate steps around the segment centre to keep parameters O(1..100)
    origin = t[len(t) // 2]
    u = (t - origin) / step

    lo, hi = float(y.min()), float(y.max())
    amp = hi - lo
    if amp <= 0:
        raise NoEdgeFound("flat profile")
    # steepest descent of the smoothed samples; a slope, so uneven spacing is fine
    d = np.diff(_smoothed(y, smooth)) / np.diff(u)
    k = int(np.argmin(d))
    p0 = np.array([amp, lo, 0.5 * (u[k] + u[k + 1]), 10.0])

    def residuals(p):
        A, B, t0, s = p
        return B + A * ndtr((t0 - u) / s) - y

    def jac(p):
        A, B, t0, s = p
        z = (u - t0) / s
        phi = np.exp(-0.5 * z * z) / _SQRT_2PI
        return np.column_stack([ndtr(-z), np.ones_like(u), A * phi / s, A * phi * z / s])

    try:
        res = least_squares(residuals, p0, jac=jac, method="lm", xtol=xtol, ftol=1e-12,
                            gtol=1e-12, max_nfev=max_iter, x_scale="jac")
    except (ValueError, FloatingPointError) as exc:
        raise NoEdgeFound(f"fit failed: {exc}") from exc
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise NoEdgeFound("fit did not converge")
    A, B, t0, s = res.x
    if s <= 0:
        # a negative width turns the model into a rising step
        raise NoEdgeFound("fitted edge is rising")
    rms = float(np.sqrt(np.mean(res.fun ** 2)))
    if A <= 0 or A <= 3.0 * rms:
        raise NoEdgeFound(f"amplitude {A:.4g} not above 3x residual rms {rms:.4g}")
    if not u[0] <= t0 <= u[-1]:
        raise NoEdgeFound("edge midpoint outside the fitted segment")
    return EdgeFit(A=float(A), B=float(B), t0=float(origin + t0 * step), sigma=float(s * step),
                   rms_residual=rms, n_points=int(t.size))


def detect_falling_edges(t, y, *, smooth: int = 5, k: float = 3.0, window: int = 60,
                         merge: int = 20, source: str = "") -> list[EdgeFit]:
    """Find and fit every falling edge of a scan profile.

    Candidates are local minima of a lagged difference of the box-smoothed
    profile that fall below ``-k`` times its noise scale, estimated robustly
    (MAD) from first differences so that a wide edge on a short scan does not
    inflate it. Each is refined by an erf fit over +-``window`` samples and
    kept only if at least ``smooth`` samples lie on either side of its
    midpoint; fits closer than ``merge`` samples are merged, keeping the
    smaller residual.
    """
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = t.size
    lag = max(int(smooth), 1)
    if n < 8 or n <= lag + 2:
        return []
    step = float(np.median(np.diff(t)))
    s = _smoothed(y, lag)
    d = s[lag:] - s[:-lag]
    # white-noise scale from raw increments, which an edge barely biases, carried
    # through the box filter and lagged difference (variance 2 sigma^2 / lag)
    dy = np.diff(y)
    sigma = 1.4826 * float(np.median(np.abs(dy - np.median(dy)))) / np.sqrt(2.0)
    noise = sigma * np.sqrt(2.0 / lag)
    thresh = -k * noise
    cands = [i for i in range(1, d.size - 1)
             if d[i] < thresh and d[i] <= d[i - 1] and d[i] < d[i + 1]]
    fits: list[EdgeFit] = []
    for i in cands:
        c = i + lag // 2
        lo, hi = max(c - window, 0), min(c + window + 1, n)
        try:
            fit = fit_erf_edge(t[lo:hi], y[lo:hi], step=step)
        except NoEdgeFound:
            continue
        below = int(np.count_nonzero(t[lo:hi] < fit.t0))
        if min(below, hi - lo - below) < lag:
            continue  # a lone outlier at the scan boundary fits as a sharp edge
        fits.append(dataclasses.replace(fit, source=source))
    fits.sort(key=lambda f: f.t0)
    merged: list[EdgeFit] = []
    for f in fits:
        if merged and f.t0 - merged[-1].t0 <= merge * step:
            if f.rms_residual < merged[-1].rms_residual:
                merged[-1] = f
        else:
            merged.append(f)
    return merged


def extract_profiles(dataset: ScanDataset, mask: HotPixelMask | None = None,
                     params: PipelineParams = PipelineParams()) -> ProfileSeries:
    """Per-gate mean intensity and correlation-peak value / SNR."""
    n = len(dataset)
    mean_i = np.empty(n)
    peak = np.empty(n)
    snr = np.empty(n)
    for i in range(n):
        stack = dataset[i]
        if mask is None:
            mask = HotPixelMask.empty(stack.shape, params.hot_threshold)
        img = dataset.intensity(i)
        mean_i[i] = img[~mask.flags].mean() / stack.n_frames
        clean = zero_hot_pixels(stack, mask)
        g = gamma_plus(clean, params.method)
        g = remove_crosstalk(g, clean, params.neighborhood, params.include_self)
        st = peak_stats(g, params.exclusion, params.search, params.outer)
        peak[i] = st.peak_value
        snr[i] = st.snr
    return ProfileSeries(dataset.times.astype(np.float64), mean_i, peak, snr)


def classify_edges(intensity_edges, correlation_edges, tolerance: int = 30, step: float = 18.0) -> list[EdgeFit]:
    """Label edges quantum or classical by pairing the two profiles.

    Correlation edges are quantum. An intensity edge within ``tolerance``
    steps of a correlation edge is folded into it; the others are classical.
    A quantum edge is flagged ambiguous when several intensity edges fold
    into it, or its intensity partner sits more than one edge width away
    (a classical return overlapping the quantum one).
    """
    tol = tolerance * step
    partners: dict[int, list[EdgeFit]] = {i: [] for i in range(len(correlation_edges))}
    out: list[EdgeFit] = []
    for e in intensity_edges:
        if correlation_edges:
            dist = [abs(e.t0 - c.t0) for c in correlation_edges]
            j = int(np.argmin(dist))
            if dist[j] <= tol:
                partners[j].append(e)
                continue
        out.append(dataclasses.replace(e, label="classical"))
    for j, c in enumerate(correlation_edges):
        mates = partners[j]
        ambiguous = len(mates) > 1 or any(
            abs(m.t0 - c.t0) > max(m.sigma, c.sigma) for m in mates)
        out.append(dataclasses.replace(c, label="quantum", ambiguous=ambiguous))
    out.sort(key=lambda f: f.t0)
    return out


def quantum_arrival(labeled) -> EdgeFit | None:
    """The last falling edge of the correlation profile, i.e. the quantum return."""
    q = [e for e in labeled if e.label == "quantum"]
    return max(q, key=lambda e: e.t0) if q else None


def subtraction_difference(dataset: ScanDataset, before: int, after: int,
                           mask: HotPixelMask | None = None) -> np.ndarray:
    """Hot-pixel-smoothed intensity(before) - intensity(after), unclamped."""
    a = dataset.intensity(before)
    b = dataset.intensity(after)
    if mask is not None:
        a = smooth_hot_pixels(a, mask)
        b = smooth_hot_pixels(b, mask)
    return np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)


def edge_subtraction_image(dataset: ScanDataset, edge: EdgeFit, offset: int = 45,
                           mask: HotPixelMask | None = None) -> SubtractionImage:
    """Image of whatever disappears at ``edge``: the gate ``offset`` steps before
    the midpoint minus the gate ``offset`` steps after, clamped at zero."""
    sched = dataset.schedule
    want_lo = sched.index_of(edge.t0 - offset * sched.step)
    want_hi = sched.index_of(edge.t0 + offset * sched.step)
    lo = min(max(want_lo, 0), sched.count - 1)
    hi = min(max(want_hi, 0), sched.count - 1)
    diff = subtraction_difference(dataset, lo, hi, mask)
    return SubtractionImage(np.clip(diff, 0, None), lo, hi, clipped=(lo, hi) != (want_lo, want_hi))


def depth_report(labeled, images: dict[int, str] | None = None) -> DepthReport:
    """Depth of every labelled edge; ``images`` maps edge position to an image reference."""
    images = images or {}
    entries = [
        DepthEntry(t_ps=e.t0, depth_mm=time_to_depth(max(e.t0, 0.0)), label=e.label,
                   image=images.get(i), ambiguous=e.ambiguous)
        for i, e in enumerate(labeled)
    ]
    return DepthReport(tuple(entries))


@dataclass
class ScanResult:
    profiles: ProfileSeries
    intensity_edges: list[EdgeFit]
    correlation_edges: list[EdgeFit]
    labeled: list[EdgeFit]
    images: list[SubtractionImage] = field(default_factory=list)

    @property
    def quantum(self) -> EdgeFit | None:
        return quantum_arrival(self.labeled)


def analyze_scan(dataset: ScanDataset, mask: HotPixelMask | None = None,
                 params: PipelineParams = PipelineParams()) -> ScanResult:
    """Profiles, edges, labels and subtraction images for a whole scan."""
    prof = extract_profiles(dataset, mask, params)
    kw = dict(smooth=params.smooth, k=params.detect_k, window=params.window, merge=params.merge)
    i_edges = detect_falling_edges(prof.gate_times, prof.mean_intensity, source="intensity", **kw)
    c_edges = detect_falling_edges(prof.gate_times, prof.corr_peak, source="correlation", **kw)
    labeled = classify_edges(i_edges, c_edges, params.tolerance, dataset.schedule.step)
    images = [edge_subtraction_image(dataset, e, params.subtraction_offset, mask) for e in labeled]
    return ScanResult(prof, i_edges, c_edges, labeled, images)
