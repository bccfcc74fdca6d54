"""Compiled inner loops of the frame simulator.

Every frame reseeds numba's generator from its own derived seed, so the
output depends only on (seed, gate index, frame index) and never on the
order in which frames are produced.
"""
import numba
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def frame_seeds(seed: int, gate_index: int, frame_indices) -> np.ndarray:
    """32-bit generator seeds for the given frames of one gate position."""
    with np.errstate(over="ignore"):
        base = _splitmix(np.array([int(seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        base = _splitmix(base ^ np.uint64(int(gate_index) & 0xFFFFFFFFFFFFFFFF))
        idx = np.asarray(frame_indices, dtype=np.uint64)
        h = _splitmix(base ^ (idx * _M2))
    return (h >> np.uint64(32)).astype(np.uint32)


@numba.njit(cache=True)
def _sample(cdf):
    p = np.searchsorted(cdf, np.random.random() * cdf[-1], side="right")
    if p >= cdf.shape[0]:
        p = cdf.shape[0] - 1
    return p


@numba.njit(cache=True)
def _partner(p1, width, height, s0r, s0c, corr_sigma):
    """Flat index of the twin photon: mirrored through s0 plus rounded jitter (-1 off-grid)."""
    r1 = p1 // width
    c1 = p1 % width
    dr = 0
    dc = 0
    if corr_sigma > 0.0:
        dr = int(np.rint(np.random.normal() * corr_sigma))
        dc = int(np.rint(np.random.normal() * corr_sigma))
    r2 = s0r - r1 + dr
    c2 = s0c - c1 + dc
    if 0 <= r2 < height and 0 <= c2 < width:
        return r2 * width + c2
    return -1


@numba.njit(cache=True)
def _draw_pair(beam_cdf, width, height, s0r, s0c, corr_sigma):
    """One photon pair: r1 from the beam profile, r2 mirrored through s0 plus jitter.

    Returns flat indices (-1 for an off-grid photon).
    """
    p1 = _sample(beam_cdf)
    return p1, _partner(p1, width, height, s0r, s0c, corr_sigma)


@numba.njit(cache=True)
def sample_pair_positions(beam_cdf, width, height, s0r, s0c, corr_sigma, n, seed):
    np.random.seed(seed)
    out = np.empty((n, 2), dtype=np.int64)
    for i in range(n):
        p1, p2 = _draw_pair(beam_cdf, width, height, s0r, s0c, corr_sigma)
        out[i, 0] = p1
        out[i, 1] = p2
    return out


@numba.njit(cache=True)
def simulate_frames(
    seeds,
    width,
    height,
    bits,
    pulses,
    # photon-pair source
    pair_rate,  # mean accepted pairs per exposure (gate transmission folded in)
    beam_cdf,
    s0r,
    s0c,
    corr_sigma,
    pair_refl,
    pdp,
    # synchronous classical light, pre-merged into one detected-photon map
    sync_rate,
    sync_cdf,
    # asynchronous classical sources
    async_rates,  # mean photons per laser pulse, per source
    async_cdf,  # (n_async, npix)
    async_table,  # gate transmission per 1 ps of arrival phase within a laser period
    # detector defects
    dark_total,
    dark_cdf,
    crosstalk_p,
    afterpulse_p,
):
    npix = width * height
    n_frames = seeds.shape[0]
    out = np.zeros((n_frames, height, width), dtype=np.uint8)
    counts = np.zeros(npix, dtype=np.int32)
    stamp = np.full(npix, -1, dtype=np.int64)
    cur = np.empty(npix, dtype=np.int64)
    prev = np.empty(npix, dtype=np.int64)
    n_async = async_rates.shape[0]
    n_phase = async_table.shape[0]
    q_pair = 1.0 - (1.0 - pdp) ** 2
    q_cross = 1.0 - (1.0 - crosstalk_p) ** 4
    exposure = 0
    for f in range(n_frames):
        np.random.seed(seeds[f])
        counts[:] = 0
        n_prev = 0
        for b in range(bits):
            exposure += 1
            n_cur = 0
            # pairs share one arrival time and hence one gate acceptance.
            # Poisson thinning: only pairs with at least one photon passing the
            # pdp test are drawn, then split into both / first only / second only.
            if pair_rate > 0.0 and q_pair > 0.0:
                n_pairs = np.random.poisson(pair_rate * q_pair)
                for _ in range(n_pairs):
                    u = np.random.random() * q_pair
                    d1 = u < pdp
                    d2 = u < pdp * pdp or u >= pdp
                    p1 = _sample(beam_cdf)
                    if d1 and np.random.random() < pair_refl[p1]:
                        if stamp[p1] != exposure:
                            stamp[p1] = exposure
                            cur[n_cur] = p1
                            n_cur += 1
                    if not d2:
                        continue
                    p2 = _partner(p1, width, height, s0r, s0c, corr_sigma)
                    if p2 >= 0 and np.random.random() < pair_refl[p2]:
                        if stamp[p2] != exposure:
                            stamp[p2] = exposure
                            cur[n_cur] = p2
                            n_cur += 1
            if sync_rate > 0.0:
                for _ in range(np.random.poisson(sync_rate)):
                    p = _sample(sync_cdf)
                    if stamp[p] != exposure:
                        stamp[p] = exposure
                        cur[n_cur] = p
                        n_cur += 1
            for k in range(n_async):
                if async_rates[k] <= 0.0:
                    continue
                # every pulse arrives at its own random phase; photons from all
                # pulses are pooled (a sum of Poissons is Poisson)
                t = 0.0
                for _ in range(pulses):
                    t += async_table[int(np.random.random() * n_phase)]
                lam = async_rates[k] * pdp * t
                if lam <= 0.0:
                    continue
                for _ in range(np.random.poisson(lam)):
                    p = _sample(async_cdf[k])
                    if stamp[p] != exposure:
                        stamp[p] = exposure
                        cur[n_cur] = p
                        n_cur += 1
            if dark_total > 0.0:
                for _ in range(np.random.poisson(dark_total)):
                    p = _sample(dark_cdf)
                    if stamp[p] != exposure:
                        stamp[p] = exposure
                        cur[n_cur] = p
                        n_cur += 1
            if afterpulse_p > 0.0:
                for i in range(n_prev):
                    p = prev[i]
                    if np.random.random() < afterpulse_p and stamp[p] != exposure:
                        stamp[p] = exposure
                        cur[n_cur] = p
                        n_cur += 1
            if crosstalk_p > 0.0:
                n_primary = n_cur
                for i in range(n_primary):
                    # one draw decides whether any of the 4 neighbours fires;
                    # if so, the 4 Bernoulli trials are redrawn conditioned on that
                    if np.random.random() >= q_cross:
                        continue
                    fire = np.zeros(4, dtype=np.bool_)
                    while True:
                        anyf = False
                        for d in range(4):
                            fire[d] = np.random.random() < crosstalk_p
                            anyf = anyf or fire[d]
                        if anyf:
                            break
                    p = cur[i]
                    r = p // width
                    c = p % width
                    for d in range(4):
                        if not fire[d]:
                            continue
                        rr = r
                        cc = c
                        if d == 0:
                            rr = r - 1
                        elif d == 1:
                            rr = r + 1
                        elif d == 2:
                            cc = c - 1
                        else:
                            cc = c + 1
                        if rr < 0 or rr >= height or cc < 0 or cc >= width:
                            continue
                        q = rr * width + cc
                        if stamp[q] != exposure:
                            stamp[q] = exposure
                            cur[n_cur] = q
                            n_cur += 1
            for i in range(n_cur):
                counts[cur[i]] += 1
            tmp = prev
            prev = cur
            cur = tmp
            n_prev = n_cur
        for p in range(npix):
            out[f, p // width, p % width] = counts[p]
    return out
