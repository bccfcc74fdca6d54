import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.special import ndtr

from qlidar.core import GateSchedule, GateWindow
from qlidar.correlation import gamma_plus, peak_stats, remove_crosstalk
from qlidar.sim import (Asynchronous, ClassicalSourceSpec, DetectorSpec, ObjectTarget, PairSourceSpec, Scene,
                        Synchronous, acquire_stack, async_mean_transmission, gate_transmission,
                        periodic_transmission, sample_pairs, simulate_bit_exposure, simulate_linear_scan)

QUIET = DetectorSpec(pdp=0.25, dark_rate=0.0)


def pair_scene(h=16, w=16, rate=0.5, delay=30_000, corr_sigma=0.5, mask=None):
    mask = np.ones((h, w)) if mask is None else mask
    return Scene(h, w, PairSourceSpec(rate, np.ones((h, w)), ObjectTarget(mask, delay), corr_sigma=corr_sigma))


def test_gate_transmission_examples():
    assert gate_transmission(7500, GateWindow(0, 15000)) == 1.0
    assert gate_transmission(15001, GateWindow(0, 15000)) == 0.0
    assert gate_transmission(15000, GateWindow(0, 15000, 344.0)) == pytest.approx(0.5, abs=1e-12)
    assert gate_transmission(0, GateWindow(0, 15000, 344.0)) == pytest.approx(0.5, abs=1e-12)


def test_gate_edge_fall_time():
    # a fixed arrival seen by a moving gate falls from 90 % to 10 % over 2.5631 sigma
    sigma, arrival = 344.1, 20_000

    def trans(start):
        return float(ndtr((arrival - start) / sigma) - ndtr((arrival - start - 15000) / sigma))

    t90 = brentq(lambda s: trans(s) - 0.9, arrival - 3000, arrival)
    t10 = brentq(lambda s: trans(s) - 0.1, arrival, arrival + 3000)
    assert t10 - t90 == pytest.approx(882.0, abs=0.5)
    for start in (19_500, 20_000, 20_400):
        assert gate_transmission(arrival, GateWindow(start, 15000, sigma)) == pytest.approx(trans(start), abs=1e-12)


def test_periodic_and_async_transmission():
    g = GateWindow(1000, 15000)
    assert periodic_transmission(1000 + 50_000 + 10, g, 50_000) == 1.0
    assert periodic_transmission(40_000, g, 50_000) == 0.0
    assert async_mean_transmission(g, 50_000) == 0.3
    phases = np.arange(50_000) + 0.5
    soft = GateWindow(1000, 15000, 344.0)
    assert np.mean(periodic_transmission(phases, soft, 50_000)) == pytest.approx(0.3, rel=1e-9)


def test_detector_defaults_and_validation():
    det = DetectorSpec()
    assert det.pulses_per_exposure == 7 and det.bits_per_frame == 255
    for bad in (dict(pdp=1.5), dict(crosstalk_p=-0.1), dict(dark_rate=-1), dict(bits_per_frame=256),
                dict(exposure=10_000)):
        with pytest.raises(ValueError):
            DetectorSpec(**bad)
    rates = DetectorSpec(dark_rate=1e-3, hot_pixels=(((1, 2), 50.0),)).dark_map((4, 4))
    assert rates[1, 2] == pytest.approx(0.05) and rates[0, 0] == 1e-3


def test_scene_validation():
    with pytest.raises(ValueError):
        Scene(8, 8, pair_scene(4, 4).pair_source)
    with pytest.raises(ValueError):
        ObjectTarget(np.full((4, 4), 1.5), 0)
    with pytest.raises(ValueError):
        Asynchronous(0)
    with pytest.raises(ValueError):
        PairSourceSpec(-1, np.ones((4, 4)), ObjectTarget(np.ones((4, 4)), 0))


def test_empty_scene_gives_zero_frames():
    det = DetectorSpec(dark_rate=0.0)
    f = simulate_bit_exposure(Scene(8, 8), det, GateWindow(0, 15000), 1)
    assert f.bit_depth == 1 and not f.frames.any()
    assert not acquire_stack(Scene(8, 8), det, GateWindow(0, 15000), 5, 1).frames.any()


def test_determinism_and_order_independence():
    scene = pair_scene()
    det = DetectorSpec(dark_rate=1e-3, crosstalk_p=0.02, afterpulse_p=0.02)
    g = GateWindow(20_000, 15000, 344.0)
    a = acquire_stack(scene, det, g, 6, seed=9, gate_index=4)
    assert a == acquire_stack(scene, det, g, 6, seed=9, gate_index=4)
    assert a != acquire_stack(scene, det, g, 6, seed=10, gate_index=4)
    # frame streams depend on the frame index only, not on how many frames are taken
    head = acquire_stack(scene, det, g, 3, seed=9, gate_index=4)
    np.testing.assert_array_equal(head.frames, a.frames[:3])

    sched = GateSchedule(15_000, 1000, 6, g)
    fwd = simulate_linear_scan(scene, det, sched, 4, seed=2)
    rev = simulate_linear_scan(scene, det, sched, 4, seed=2)
    stacks_fwd = [fwd[i] for i in range(6)]
    stacks_rev = [rev[i] for i in reversed(range(6))][::-1]
    assert all(x == y for x, y in zip(stacks_fwd, stacks_rev))
    assert len(simulate_linear_scan(scene, det, GateSchedule(0, 18, 1, g), 4, 1)) == 1


def test_one_bit_clipping_and_frame_range():
    # absurd flux: every pixel fires every exposure
    h = w = 6
    src = ClassicalSourceSpec(5000.0, np.ones((h, w)), ObjectTarget(np.ones((h, w)), 100))
    scene = Scene(h, w, None, (src,))
    det = DetectorSpec(pdp=1.0, dark_rate=0.5, crosstalk_p=0.5, afterpulse_p=0.5)
    bit = simulate_bit_exposure(scene, det, GateWindow(0, 15000), 3)
    assert bit.frames.max() == 1
    stack = acquire_stack(scene, det, GateWindow(0, 15000), 3, 3)
    assert stack.frames.max() == 255 and stack.frames.min() == 255


def test_degenerate_correlation_pairs_are_exactly_mirrored():
    # pdp = 1 and a sparse pair rate: exposures with exactly two clicks hold one pair
    h = w = 12
    scene = pair_scene(h, w, rate=0.05, corr_sigma=0.0)
    det = DetectorSpec(pdp=1.0, dark_rate=0.0, bits_per_frame=1)
    frames = acquire_stack(scene, det, GateWindow(20_000, 15000), 4000, seed=5).frames
    s0 = np.array(scene.pair_source.center)
    seen = 0
    for f in frames:
        pos = np.argwhere(f)
        if len(pos) == 2:
            np.testing.assert_array_equal(pos[0] + pos[1], s0)
            seen += 1
    assert seen > 50


def rounded_gauss_var(sigma):
    k = np.arange(-60, 61)
    p = ndtr((k + 0.5) / sigma) - ndtr((k - 0.5) / sigma)
    return float((k ** 2 * p).sum())


@pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0])
def test_pair_anti_correlation_statistics(sigma):
    h = w = 64
    beam = np.zeros((h, w))
    beam[16:48, 16:48] = 1.0  # partners stay on the grid
    src = PairSourceSpec(1.0, beam, ObjectTarget(np.ones((h, w)), 0), corr_sigma=sigma)
    r1, r2 = sample_pairs(src, 20000, seed=11)
    assert (r2 >= 0).all()
    s = r1 + r2 - np.array(src.center)
    n = len(s)
    want_std = np.sqrt(rounded_gauss_var(sigma))
    for axis in range(2):
        se = want_std / np.sqrt(n)
        assert abs(s[:, axis].mean()) < 3 * se
        assert s[:, axis].std() == pytest.approx(want_std, rel=0.03)


def test_off_grid_partners_are_dropped():
    src = PairSourceSpec(1.0, np.ones((8, 8)), ObjectTarget(np.ones((8, 8)), 0), corr_sigma=2.0,
                         corr_center=(3, 3))
    r1, r2 = sample_pairs(src, 2000, seed=1)
    off = (r2 < 0).all(axis=1)
    assert off.any() and not off.all()
    assert ((r2[~off] >= 0) & (r2[~off] < 8)).all()


def async_frame_stats(rate_pix, p, pulses, bits, n_frames):
    """Exact mean/variance of the summed frame counts for a hard-edged gate.

    Per exposure the number of pulses hitting the gate is Binomial(pulses, p);
    given that count S each pixel fires with probability 1 - exp(-a S).
    """
    from scipy.stats import binom
    s = np.arange(pulses + 1)
    ps = binom.pmf(s, pulses, p)
    fire = 1.0 - np.exp(-np.outer(s, rate_pix))  # (S, pixels)
    cond_mean = fire.sum(axis=1)
    cond_var = (fire * (1 - fire)).sum(axis=1)
    mean = (ps * cond_mean).sum()
    var = (ps * cond_var).sum() + (ps * cond_mean ** 2).sum() - mean ** 2
    n = bits * n_frames
    return n * mean, n * var


def test_async_count_is_independent_of_gate_start():
    h = w = 8
    det = DetectorSpec(pdp=0.25, dark_rate=0.0)
    rate = 2.0
    src = ClassicalSourceSpec(rate, np.ones((h, w)), ObjectTarget(np.ones((h, w)), 0), Asynchronous(50_000))
    scene = Scene(h, w, None, (src,))
    width, n_frames = 15000, 10
    mean, var = async_frame_stats(np.full(h * w, rate * det.pdp / (h * w)), width / 50_000,
                                  det.pulses_per_exposure, det.bits_per_frame, n_frames)
    starts = np.linspace(0, 50_000, 200, endpoint=False).astype(int)
    totals = np.array([acquire_stack(scene, det, GateWindow(s, width), n_frames, 7, gate_index=i).frames.sum()
                       for i, s in enumerate(starts)], dtype=float)
    inside = np.abs(totals - mean) < 3 * np.sqrt(var)
    assert inside.mean() >= 0.99
    # no drift with gate position: slope over the sweep well below 1 %
    slope = np.polyfit(starts / 50_000, totals, 1)[0]
    assert abs(slope) < 0.01 * mean
    # mean scales with width / period
    half = np.mean([acquire_stack(scene, det, GateWindow(s, width // 2), n_frames, 8, gate_index=i).frames.sum()
                    for i, s in enumerate(starts[:40])])
    mean_half, _ = async_frame_stats(np.full(h * w, rate * det.pdp / (h * w)), width / 2 / 50_000,
                                     det.pulses_per_exposure, det.bits_per_frame, n_frames)
    assert half == pytest.approx(mean_half, rel=0.03)


def test_sync_classical_follows_gate():
    h = w = 8
    src = ClassicalSourceSpec(0.5, np.ones((h, w)), ObjectTarget(np.ones((h, w)), 16_000), Synchronous(0))
    scene = Scene(h, w, None, (src,))
    on = acquire_stack(scene, QUIET, GateWindow(10_000, 15000), 10, 1).frames.sum()
    off = acquire_stack(scene, QUIET, GateWindow(17_000, 15000), 10, 1).frames.sum()
    assert on > 1000 and off == 0
    delayed = Scene(h, w, None, (ClassicalSourceSpec(0.5, np.ones((h, w)), ObjectTarget(np.ones((h, w)), 16_000),
                                                     Synchronous(2000)),))
    assert acquire_stack(delayed, QUIET, GateWindow(17_000, 15000), 10, 1).frames.sum() > 1000


def test_quantum_profile_plateau_matches_gate_shape():
    delay = 30_000
    scene = pair_scene(16, 16, rate=0.5, delay=delay)
    win = GateWindow(0, 15000, 344.0)
    sched = GateSchedule(delay - 20_000, 500, 51, win)
    ds = simulate_linear_scan(scene, QUIET, sched, 30, seed=4)
    prof = np.array([ds.intensity(i).sum() for i in range(len(ds))], dtype=float)
    want = np.array([gate_transmission(delay, g) for g in sched])
    scale = prof.max()
    assert np.corrcoef(prof, want)[0, 1] > 0.99
    # plateau length ~ gate width
    high = sched.times[prof > 0.5 * scale]
    assert high[-1] - high[0] == pytest.approx(15000, abs=1000)


def test_pairs_share_one_gate_acceptance():
    # halfway down the edge the coincidence peak halves (T), it does not quarter (T^2)
    h = w = 32
    scene = pair_scene(h, w, rate=1.0, delay=30_000, corr_sigma=0.2)
    peaks = []
    for start in (25_000, 30_000):  # transmission 1 and 0.5
        stack = acquire_stack(scene, QUIET, GateWindow(start, 15000, 344.0), 300, seed=1)
        g = remove_crosstalk(gamma_plus(stack), stack, include_self=True)
        peaks.append(peak_stats(g).peak_value)
    assert peaks[1] / peaks[0] == pytest.approx(0.5, abs=0.08)


def test_quantum_peak_sits_at_s0():
    scene = pair_scene(24, 24, rate=0.8, corr_sigma=0.5)
    stack = acquire_stack(scene, QUIET, GateWindow(20_000, 15000), 200, seed=3)
    g = gamma_plus(stack)
    loc = np.unravel_index(np.argmax(g), g.shape)
    assert abs(loc[0] - scene.pair_source.center[0]) <= 1 and abs(loc[1] - scene.pair_source.center[1]) <= 1


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1))
def test_frame_seeds_are_deterministic(seed, gate_index):
    from qlidar._kernel import frame_seeds
    a = frame_seeds(seed, gate_index, np.arange(5))
    np.testing.assert_array_equal(a, frame_seeds(seed, gate_index, np.arange(5)))
    np.testing.assert_array_equal(a[2:], frame_seeds(seed, gate_index, np.arange(2, 5)))
