"""Scenario files: YAML documents describing a scene, detector, gate schedule,
acquisition and processing parameters.

Every time value carries a unit suffix (``ps`` or ``ns``) and is normalised to
picoseconds on load. Validation errors name the offending key path, e.g.
``classical_sources[0].target.delay``.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .adaptive import SearchParams
from .core import GateSchedule, GateWindow
from .ranging import PipelineParams
from .sim import (Asynchronous, ClassicalSourceSpec, DetectorSpec, ObjectTarget, PairSourceSpec, Scene,
                  Synchronous)

PRESETS = ("sync-spoof", "async-background", "quantum-only", "classical-only", "empty")
_TIME = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(ps|ns)\s*$")
_PS_PER = {"ps": 1.0, "ns": 1000.0}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    name: str
    scene: Scene
    detector: DetectorSpec
    schedule: GateSchedule
    n_frames: int
    seed: int
    pipeline: PipelineParams = PipelineParams()
    search: SearchParams | None = None
    # ground-truth arrival times (ps) of every source, for reports and checks
    truth: dict[str, float] = field(default_factory=dict)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def _join(path: str, key) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else str(key)


class _Section:
    """Typed access to a mapping that remembers where it lives in the document."""

    def __init__(self, data, path: str):
        if not isinstance(data, dict):
            raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def has(self, key: str) -> bool:
        return key in self.data

    def raw(self, key: str, default: Any = ...):
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                raise ConfigError(_join(self.path, key), "required key missing")
            return default
        return self.data[key]

    def section(self, key: str, default: Any = ...) -> "_Section":
        value = self.raw(key, {} if default is not ... else default)
        return _Section(value, _join(self.path, key))

    def number(self, key: str, default: Any = ..., *, lo=None, hi=None, integer=False):
        value = self.raw(key, default)
        where = _join(self.path, key)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        if integer and value != int(value):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        if lo is not None and value < lo:
            raise ConfigError(where, f"must be >= {lo}, got {value}")
        if hi is not None and value > hi:
            raise ConfigError(where, f"must be <= {hi}, got {value}")
        return int(value) if integer else float(value)

    def time(self, key: str, default: Any = ..., *, integer=True, lo=None) -> float:
        """A duration with a mandatory unit suffix, returned in picoseconds."""
        value = self.raw(key, default)
        where = _join(self.path, key)
        if not isinstance(value, str):
            raise ConfigError(where, f"time values need a unit suffix (ps or ns), got {value!r}")
        m = _TIME.match(value)
        if m is None:
            raise ConfigError(where, f"cannot parse time {value!r}; use e.g. '344 ps' or '15 ns'")
        ps = float(m.group(1)) * _PS_PER[m.group(2)]
        if lo is not None and ps < lo:
            raise ConfigError(where, f"must be >= {lo} ps, got {ps:g} ps")
        if integer:
            if abs(ps - round(ps)) > 1e-6:
                raise ConfigError(where, f"must be a whole number of picoseconds, got {ps:g} ps")
            return int(round(ps))
        return ps

    def finish(self):
        unknown = sorted(set(self.data) - self.used)
        if unknown:
            raise ConfigError(_join(self.path, unknown[0]), "unknown key")


# --- masks -----------------------------------------------------------------
# Shapes are given in normalised coordinates: (y, x) with y = row / height and
# x = col / width measured at pixel centres, so a preset scales with the grid.

def _grid(shape):
    h, w = shape
    yy, xx = np.mgrid[:h, :w]
    return (yy + 0.5) / h, (xx + 0.5) / w


def person_mask(shape) -> np.ndarray:
    y, x = _grid(shape)
    head = np.hypot(y - 0.22, x - 0.5) < 0.14
    body = (y > 0.33) & (y < 0.88) & (np.abs(x - 0.5) < 0.125)
    arms = (y > 0.39) & (y < 0.5) & (np.abs(x - 0.5) < 0.34)
    return head | body | arms


def bike_mask(shape) -> np.ndarray:
    y, x = _grid(shape)
    wheels = (np.hypot(y - 0.64, x - 0.25) < 0.16) | (np.hypot(y - 0.64, x - 0.75) < 0.16)
    frame = (y > 0.39) & (y < 0.47) & (x > 0.25) & (x < 0.75)
    return wheels | frame


def _mask(spec, shape, path: str) -> np.ndarray:
    if isinstance(spec, str):
        spec = {"shape": spec}
    sec = _Section(spec, path)
    kind = sec.raw("shape")
    y, x = _grid(shape)
    if kind == "uniform":
        m = np.ones(shape, dtype=bool)
    elif kind == "none":
        m = np.zeros(shape, dtype=bool)
    elif kind == "disk":
        cy, cx = _pair(sec, "center")
        m = np.hypot(y - cy, x - cx) < sec.number("radius", lo=0)
    elif kind == "rect":
        y0, x0 = _pair(sec, "min")
        y1, x1 = _pair(sec, "max")
        m = (y >= y0) & (y < y1) & (x >= x0) & (x < x1)
    elif kind == "half-plane":
        axis = sec.raw("axis")
        if axis not in ("row", "col"):
            raise ConfigError(_join(path, "axis"), f"expected 'row' or 'col', got {axis!r}")
        coord = y if axis == "row" else x
        at = sec.number("at")
        side = sec.raw("side", "below")
        if side not in ("below", "above"):
            raise ConfigError(_join(path, "side"), f"expected 'below' or 'above', got {side!r}")
        m = coord < at if side == "below" else coord >= at
    elif kind == "person":
        m = person_mask(shape)
    elif kind == "bike":
        m = bike_mask(shape)
    elif kind == "union":
        parts = sec.raw("of")
        if not isinstance(parts, list) or not parts:
            raise ConfigError(_join(path, "of"), "expected a non-empty list of shapes")
        m = np.zeros(shape, dtype=bool)
        for i, part in enumerate(parts):
            m |= _mask(part, shape, _join(_join(path, "of"), i)) > 0
    else:
        raise ConfigError(_join(path, "shape"), f"unknown shape {kind!r}")
    value = sec.number("value", 1.0, lo=0.0, hi=1.0)
    sec.finish()
    return m.astype(np.float64) * value


def _pair(sec: _Section, key: str) -> tuple[float, float]:
    v = sec.raw(key)
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(a, (int, float)) for a in v)):
        raise ConfigError(_join(sec.path, key), f"expected [y, x], got {v!r}")
    return float(v[0]), float(v[1])


# --- sections --------------------------------------------------------------

def _detector(sec: _Section) -> tuple[DetectorSpec, tuple[int, int]]:
    shape = (sec.number("height", integer=True, lo=2), sec.number("width", integer=True, lo=2))
    hot = []
    for i, item in enumerate(sec.raw("hot_pixels", [])):
        hs = _Section(item, _join(_join(sec.path, "hot_pixels"), i))
        r, c = (int(v) for v in _pair(hs, "at"))
        if not (0 <= r < shape[0] and 0 <= c < shape[1]):
            raise ConfigError(_join(hs.path, "at"), f"pixel {(r, c)} outside the {shape} sensor")
        hot.append(((r, c), hs.number("factor", lo=0)))
        hs.finish()
    period = sec.time("laser_period", "50 ns", lo=1)
    exposure = sec.time("exposure", "350 ns", lo=1)
    if exposure < period:
        raise ConfigError(_join(sec.path, "exposure"), "must span at least one laser period")
    det = DetectorSpec(
        pdp=sec.number("pdp", 0.25, lo=0, hi=1),
        dark_rate=sec.number("dark_rate", 2e-4, lo=0),
        hot_pixels=tuple(hot),
        crosstalk_p=sec.number("crosstalk_p", 0.0, lo=0, hi=1),
        afterpulse_p=sec.number("afterpulse_p", 0.0, lo=0, hi=1),
        laser_period=period,
        exposure=exposure,
        bits_per_frame=sec.number("bits_per_frame", 255, integer=True, lo=1, hi=255),
    )
    sec.finish()
    return det, shape


def _schedule(sec: _Section) -> GateSchedule:
    window = GateWindow(0, sec.time("gate_width", lo=1), sec.time("gate_sigma", "0 ps", integer=False, lo=0))
    sched = GateSchedule(sec.time("start", lo=0), sec.time("step", lo=1),
                         sec.number("count", integer=True, lo=1), window)
    sec.finish()
    return sched


def _target(sec: _Section, shape) -> ObjectTarget:
    t = ObjectTarget(_mask(sec.raw("mask"), shape, _join(sec.path, "mask")), sec.time("delay", lo=0))
    sec.finish()
    return t


def _pair_source(sec: _Section, shape) -> PairSourceSpec:
    center = sec.raw("center", None)
    if center is not None:
        center = tuple(int(v) for v in _pair(sec, "center"))
    src = PairSourceSpec(
        pairs_per_pulse=sec.number("pairs_per_pulse", lo=0),
        beam_profile=_mask(sec.raw("beam", "uniform"), shape, _join(sec.path, "beam")),
        target=_target(sec.section("target"), shape),
        corr_sigma=sec.number("corr_sigma", 0.5, lo=0),
        corr_center=center,
    )
    sec.finish()
    return src


def _timing(sec: _Section):
    mode = sec.raw("mode", "sync")
    if mode == "sync":
        out = Synchronous(sec.time("delay", "0 ps", lo=0))
    elif mode == "async":
        out = Asynchronous(sec.time("period", "50 ns", lo=1))
    else:
        raise ConfigError(_join(sec.path, "mode"), f"expected 'sync' or 'async', got {mode!r}")
    sec.finish()
    return out


def _classical(sec: _Section, shape) -> ClassicalSourceSpec:
    src = ClassicalSourceSpec(
        photons_per_pulse=sec.number("photons_per_pulse", lo=0),
        illumination=_mask(sec.raw("illumination", "uniform"), shape, _join(sec.path, "illumination")),
        target=_target(sec.section("target"), shape),
        sync=_timing(sec.section("timing", {})),
    )
    sec.finish()
    return src


def _pipeline(sec: _Section) -> PipelineParams:
    kw = {}
    for f in dataclasses.fields(PipelineParams):
        if not sec.has(f.name):
            continue
        if f.name == "method":
            v = sec.raw("method")
            if v not in ("fft", "direct"):
                raise ConfigError(_join(sec.path, "method"), f"expected 'fft' or 'direct', got {v!r}")
        elif f.name == "include_self":
            v = sec.raw("include_self")
            if not isinstance(v, bool):
                raise ConfigError(_join(sec.path, "include_self"), "expected true or false")
        elif f.name == "outer":
            v = None if sec.data["outer"] is None else sec.number("outer", integer=True, lo=1)
            sec.used.add("outer")
        elif f.name == "neighborhood":
            v = sec.number("neighborhood", integer=True)
            if v not in (4, 8):
                raise ConfigError(_join(sec.path, "neighborhood"), "expected 4 or 8")
        elif isinstance(f.default, int) and not isinstance(f.default, bool):
            v = sec.number(f.name, integer=True, lo=0)
        else:
            v = sec.number(f.name, lo=0)
        kw[f.name] = v
    sec.finish()
    return PipelineParams(**kw)


def search_params_for(schedule: GateSchedule, detector: DetectorSpec, **overrides) -> SearchParams:
    """Search parameters on the grid of ``schedule``.

    The default intervals are defined on an 18 ps grid; they keep their
    duration on coarser grids. The gate width and laser period (both known
    from the hardware) are expressed in gate steps.
    """
    ref = SearchParams()
    scale = ref.step_ps / schedule.step
    base = dict(
        range_gates=schedule.count,
        coarse_interval=max(1, round(ref.coarse_interval * scale)),
        check_offset=max(1, round(ref.check_offset * scale)),
        stop_width=max(2, round(ref.stop_width * scale)),
        step_ps=float(schedule.step),
        start_ps=float(schedule.start0),
        gate_gates=int(round(schedule.window.width / schedule.step)),
        period_gates=detector.laser_period / schedule.step,
    )
    base.update(overrides)
    return SearchParams(**base)


def _search(sec: _Section, schedule, detector) -> SearchParams:
    kw = {}
    for key in ("coarse_interval", "check_offset", "stop_width", "extra_probes", "min_fit_points"):
        if sec.has(key):
            kw[key] = sec.number(key, integer=True, lo=1)
    for key in ("snr_threshold", "high_fraction"):
        if sec.has(key):
            kw[key] = sec.number(key, lo=0)
    sec.finish()
    return search_params_for(schedule, detector, **kw)


def parse_config(doc: dict, name: str = "scenario") -> ScenarioConfig:
    """Validate a parsed YAML document and build the scenario."""
    root = _Section(doc if doc is not None else {}, "")
    name = str(root.raw("name", name))
    detector, shape = _detector(root.section("detector"))
    schedule = _schedule(root.section("schedule"))
    pair_doc = root.raw("pair_source", None)
    pair = _pair_source(_Section(pair_doc, "pair_source"), shape) if pair_doc else None
    sources = root.raw("classical_sources", [])
    if not isinstance(sources, list):
        raise ConfigError("classical_sources", "expected a list")
    classical = tuple(_classical(_Section(s, _join("classical_sources", i)), shape) for i, s in enumerate(sources))
    acq = root.section("acquisition")
    n_frames = acq.number("n_frames", integer=True, lo=2)
    seed = acq.number("seed", integer=True, lo=0)
    acq.finish()
    pipeline = _pipeline(root.section("pipeline", {}))
    search = _search(root.section("adaptive", {}), schedule, detector)
    root.finish()

    truth = {}
    if pair is not None:
        truth["quantum"] = float(pair.target.range_delay)
    for i, src in enumerate(classical):
        delay = src.target.range_delay + (src.sync.delay if isinstance(src.sync, Synchronous) else 0)
        truth[f"classical[{i}]"] = float(delay)
    scene = Scene(shape[0], shape[1], pair, classical)
    return ScenarioConfig(name, scene, detector, schedule, n_frames, seed, pipeline, search, truth)


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError("", f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return Path(str(resources.files("qlidar") / "presets" / f"{name}.yaml"))


def load_config(source) -> ScenarioConfig:
    """Load a scenario from a YAML file path or a preset name."""
    path = Path(source)
    if not path.exists():
        if str(source) not in PRESETS:
            raise ConfigError("", f"no config file {str(source)!r} and no preset of that name "
                                  f"(presets: {', '.join(PRESETS)})")
        path = preset_path(str(source))
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {str(source)!r}: {exc.strerror}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML in {path}: {exc}") from exc
    return parse_config(doc, name=path.stem)
