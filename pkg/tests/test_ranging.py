import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from qlidar.config import bike_mask
from qlidar.core import FrameStack, GateSchedule, GateWindow, HotPixelMask
from qlidar.ranging import (FALL_FACTOR, EdgeFit, NoEdgeFound, PipelineParams, ProfileSeries, analyze_scan,
                            classify_edges, depth_report, detect_falling_edges, edge_subtraction_image, erf_edge,
                            fit_erf_edge, quantum_arrival, subtraction_difference)
from qlidar.sim import ClassicalSourceSpec, DetectorSpec, ObjectTarget, ScanDataset, Scene, simulate_linear_scan

from conftest import random_stack

STEP = 18.0


def edge(t0, label="unlabeled", sigma=344.0, source=""):
    return EdgeFit(A=1.0, B=0.0, t0=t0, sigma=sigma, rms_residual=0.01, label=label, source=source)


def test_fall_factor_is_the_90_10_span():
    # locate the 90 % and 10 % points of the model numerically
    sigma = 344.0
    t90 = brentq(lambda t: erf_edge(t, 1.0, 0.0, 0.0, sigma) - 0.9, -5 * sigma, 0)
    t10 = brentq(lambda t: erf_edge(t, 1.0, 0.0, 0.0, sigma) - 0.1, 0, 5 * sigma, xtol=1e-14)
    assert (t10 - t90) / sigma == pytest.approx(FALL_FACTOR, rel=1e-10)
    assert FALL_FACTOR == pytest.approx(2.5631, abs=5e-5)
    assert edge(0, sigma=sigma).fall_time_90_10 == pytest.approx(882.0, abs=0.5)


@pytest.mark.parametrize("t0,sigma", [(5000.0, 344.0), (5013.7, 120.0), (4990.0, 900.0)])
def test_fit_is_exact_on_noiseless_edges(t0, sigma):
    t = np.arange(t0 - 60 * STEP, t0 + 60 * STEP, STEP) + 3.0
    y = erf_edge(t, 12.0, 1.5, t0, sigma)
    fit = fit_erf_edge(t, y)
    assert fit.t0 == pytest.approx(t0, rel=1e-3)
    assert fit.sigma == pytest.approx(sigma, rel=1e-3)
    assert fit.A == pytest.approx(12.0, rel=1e-3) and fit.B == pytest.approx(1.5, rel=1e-3)
    assert fit.n_points == t.size


def test_fit_accepts_unsorted_irregular_samples():
    rng = np.random.default_rng(3)
    t = np.sort(rng.uniform(0, 4000, 25))
    y = erf_edge(t, 3.0, 0.2, 2100.0, 300.0)
    perm = rng.permutation(t.size)
    fit = fit_erf_edge(t[perm], y[perm], step=STEP)
    assert fit.t0 == pytest.approx(2100.0, rel=1e-3)


def test_fit_rejects_non_edges():
    t = np.arange(100) * STEP
    with pytest.raises(NoEdgeFound):
        fit_erf_edge(t, np.full(100, 4.0))
    with pytest.raises(NoEdgeFound):
        fit_erf_edge(t, erf_edge(t, -2.0, 3.0, 900.0, 300.0))  # rising
    with pytest.raises(NoEdgeFound):
        fit_erf_edge(t[:5], np.arange(5.0))
    with pytest.raises(NoEdgeFound):
        fit_erf_edge(np.zeros(10), np.arange(10.0))
    noise = np.random.default_rng(0).normal(0, 1, 100)
    with pytest.raises(NoEdgeFound):
        fit_erf_edge(t, noise)


def test_fit_is_unbiased_at_snr_5():
    rng = np.random.default_rng(2024)
    t = np.arange(-60, 61) * STEP
    errors, falls = [], []
    for _ in range(100):
        true_t0 = rng.uniform(-STEP, STEP)
        y = erf_edge(t, 5.0, 0.0, true_t0, 344.0) + rng.normal(0, 1.0, t.size)
        fit = fit_erf_edge(t, y)
        errors.append(fit.t0 - true_t0)
        falls.append(fit.fall_time_90_10)
    assert abs(np.mean(errors)) < 0.5 * STEP
    assert np.mean(falls) == pytest.approx(882.0, rel=0.1)


def test_detect_two_edges_on_a_staircase():
    rng = np.random.default_rng(8)
    t = np.arange(1500) * STEP
    y = erf_edge(t, 2.0, 0.0, 9000.0, 344.0) + erf_edge(t, 1.0, 0.5, 18000.0, 344.0)
    fits = detect_falling_edges(t, y + rng.normal(0, 0.05, t.size), source="intensity")
    assert len(fits) == 2
    np.testing.assert_allclose([f.t0 for f in fits], [9000.0, 18000.0], atol=STEP)
    assert all(f.source == "intensity" for f in fits)
    assert fits[0].A == pytest.approx(2.0, rel=0.05) and fits[1].A == pytest.approx(1.0, rel=0.05)


def test_detect_nothing_on_flat_noise():
    t = np.arange(400) * STEP
    for seed in range(10):
        y = 3.0 + np.random.default_rng(seed).normal(0, 0.2, t.size)
        assert detect_falling_edges(t, y) == []
    assert detect_falling_edges(t[:6], np.arange(6.0)[::-1]) == []
    assert detect_falling_edges(t, erf_edge(t, -1.0, 0.0, 3600.0, 344.0)) == []


def test_profile_series_validation():
    with pytest.raises(ValueError):
        ProfileSeries(np.arange(3.0), np.zeros(3), np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        ProfileSeries(np.array([0.0, 2.0, 1.0]), np.zeros(3), np.zeros(3), np.zeros(3))
    assert ProfileSeries(np.array([0.0, 90.0]), *(np.zeros(2),) * 3).step == 90.0


def test_classify_without_correlation_edges():
    out = classify_edges([edge(1000.0), edge(5000.0)], [])
    assert [e.label for e in out] == ["classical", "classical"]


def test_classify_sync_scene_labels():
    i_edges = [edge(16110.0, source="intensity"), edge(24470.0, source="intensity")]
    c_edges = [edge(24455.0, source="correlation")]
    out = classify_edges(i_edges, c_edges)
    assert [(e.label, e.t0) for e in out] == [("classical", 16110.0), ("quantum", 24455.0)]
    assert not out[1].ambiguous
    assert quantum_arrival(out).t0 == 24455.0


def test_classify_lonely_correlation_edge_is_quantum():
    out = classify_edges([], [edge(3000.0)])
    assert len(out) == 1 and out[0].label == "quantum"


def test_classify_coincident_edges_flagged_ambiguous():
    # classical and quantum returns 28 gates apart: inside the 30-gate tolerance
    # but further apart than one edge width
    out = classify_edges([edge(10000.0)], [edge(10500.0)])
    assert len(out) == 1 and out[0].label == "quantum" and out[0].ambiguous
    # within one edge width the intensity edge is the quantum object's own
    assert not classify_edges([edge(10000.0)], [edge(10216.0)])[0].ambiguous
    two = classify_edges([edge(9900.0), edge(10250.0)], [edge(10216.0)])
    assert len(two) == 1 and two[0].ambiguous
    # tolerance boundary: 30 steps = 540 ps
    assert classify_edges([edge(10000.0)], [edge(10540.0)])[0].label == "quantum"
    assert [e.label for e in classify_edges([edge(10000.0)], [edge(10541.0)])] == ["classical", "quantum"]


def test_quantum_arrival_is_last_correlation_edge():
    labeled = [edge(100.0, "quantum"), edge(900.0, "classical"), edge(500.0, "quantum")]
    assert quantum_arrival(labeled).t0 == 500.0
    assert quantum_arrival([edge(1.0, "classical")]) is None


def test_depth_report():
    assert len(depth_report([])) == 0
    rep = depth_report([edge(16110.0, "classical"), edge(24462.0, "quantum")], {1: "edge1.pgm"})
    assert [e.label for e in rep] == ["classical", "quantum"]
    assert rep.entries[1].depth_mm == pytest.approx(3666.7616, abs=1e-3)
    assert rep.entries[1].image == "edge1.pgm" and rep.entries[0].image is None
    assert [e.t_ps for e in rep.quantum] == [24462.0]


def dataset_of(stacks, step=18):
    sched = GateSchedule(0, step, len(stacks), GateWindow(0, 15000, 344.0))
    return ScanDataset.from_stacks(sched, stacks)


@given(st.integers(0, 2**32 - 1))
def test_subtraction_is_antisymmetric(seed):
    g = np.random.default_rng(seed)
    ds = dataset_of([random_stack(g, 5, 6, 7, high=20) for _ in range(3)])
    flags = g.random((6, 7)) < 0.2
    mask = HotPixelMask(flags, 200)
    a = subtraction_difference(ds, 0, 2, mask)
    b = subtraction_difference(ds, 2, 0, mask)
    np.testing.assert_array_equal(a, -b)


def test_subtraction_of_identical_stacks_is_zero(rng):
    s = random_stack(rng, 6, 5, 5, high=9)
    ds = dataset_of([s] * 200)
    img = edge_subtraction_image(ds, edge(100 * 18.0))
    assert not img.image.any() and not img.clipped
    assert (img.before_index, img.after_index) == (55, 145)


def test_subtraction_clips_to_the_scanned_range(rng):
    stacks = [FrameStack(np.full((2, 3, 3), 5 if i < 10 else 1, dtype=np.uint8)) for i in range(20)]
    img = edge_subtraction_image(dataset_of(stacks), edge(10 * 18.0), offset=45)
    assert img.clipped and (img.before_index, img.after_index) == (0, 19)
    np.testing.assert_array_equal(img.image, np.full((3, 3), 8.0))
    # the clamp removes what appears after the edge
    rev = edge_subtraction_image(dataset_of(stacks[::-1]), edge(10 * 18.0), offset=45)
    assert not rev.image.any()


def classical_only_scan(seed, h=16, w=16):
    src = ClassicalSourceSpec(0.3, np.ones((h, w)), ObjectTarget(bike_mask((h, w)), 16_110))
    det = DetectorSpec(crosstalk_p=0.01, afterpulse_p=0.01)
    sched = GateSchedule(16_110 - 4500, 90, 100, GateWindow(0, 15000, 344.0))
    return simulate_linear_scan(Scene(h, w, None, (src,)), det, sched, 100, seed)


def test_classical_only_scans_never_yield_quantum_labels():
    found = 0
    for seed in range(100):
        res = analyze_scan(classical_only_scan(seed), None, PipelineParams())
        assert not any(e.label == "quantum" for e in res.labeled), seed
        found += len(res.intensity_edges) == 1
    # the classical edge itself is still found
    assert found >= 95
