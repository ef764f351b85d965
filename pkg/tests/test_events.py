import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eptomo.events import (
    CoincidenceGate,
    CoincidenceHistogram,
    DetectionEvent,
    FringeFitter,
    FringeGeometry,
    background_subtract,
    background_windows,
    check_windows,
    coincidence_histogram,
    extract_fringe,
    find_coincidence_window,
    fit_fringe,
    fringe_geometry,
    gated_pattern,
    process_acquisition,
    read_events,
    write_events,
)
from eptomo.exceptions import DataError, NoFringeError, NoPeakError

BW = 1562


def fringe_image(visibility, phase, period=64.0, angle_deg=0.0, shape=(256, 256), amplitude=1.0):
    """``A (1 + V cos(2 pi w / period + phase))`` with ``w`` the coordinate
    along the wavevector, measured from the image centre."""
    ny, nx = shape
    yy, xx = np.mgrid[0:ny, 0:nx].astype(float)
    u = xx + 0.5 - nx / 2
    v = yy + 0.5 - ny / 2
    a = np.deg2rad(angle_deg)
    w = u * np.cos(a) + v * np.sin(a)
    return amplitude * (1 + visibility * np.cos(2 * np.pi * w / period + phase))


def hist_from_counts(counts, bw=BW):
    counts = np.asarray(counts)
    edges = -bw * (counts.size // 2) + bw * np.arange(counts.size + 1)
    return CoincidenceHistogram(bw, edges, counts)


def angle_diff(a, b):
    return abs(np.angle(np.exp(1j * (a - b))))


# -- time histogram ---------------------------------------------------------------------------------


def test_shifted_stream_single_bin(rng):
    # electrons spaced by > 1 us so that only the true partner lies in range
    e = np.cumsum(rng.integers(1_100_000, 3_000_000, size=500))
    h = coincidence_histogram(e, e + 100_000)
    hit = np.searchsorted(h.edges, 100_000, side="right") - 1
    assert h.counts[hit] == 500 and h.total == 500
    assert h.edges[hit] <= 100_000 < h.edges[hit + 1]


def test_independent_poisson_streams_flat(rng):
    duration_ps = 50_000_000_000  # 50 ms
    r_e, r_p = 2e6, 2e5  # Hz
    e = np.sort(rng.integers(0, duration_ps, rng.poisson(r_e * 0.05)))
    p = np.sort(rng.integers(0, duration_ps, rng.poisson(r_p * 0.05)))
    h = coincidence_histogram(e, p)
    expected = r_e * r_p * BW * 1e-12 * 0.05
    assert np.all(np.abs(h.counts - expected) < 5 * np.sqrt(expected))
    assert abs(h.counts.mean() - expected) < 5 * np.sqrt(expected / h.counts.size)


def test_histogram_total_bounded_and_order_invariant(rng):
    e = np.sort(rng.integers(0, 10**9, 2000))
    p = np.sort(rng.integers(0, 10**9, 300))
    h = coincidence_histogram(e, p)
    assert h.total <= e.size * p.size
    shuffled = rng.permutation(e)
    assert np.array_equal(coincidence_histogram(np.sort(shuffled), p).counts, h.counts)
    with pytest.raises(DataError, match="sorted"):
        coincidence_histogram(shuffled, p)


def test_histogram_matches_pairwise_brute_force(rng):
    e = np.sort(rng.integers(0, 5_000_000, 200))
    p = np.sort(rng.integers(0, 5_000_000, 50))
    h = coincidence_histogram(e, p, bin_width_ps=10_000, range_ps=200_000)
    dt = (p[None, :] - e[:, None]).ravel()
    brute, _ = np.histogram(dt[(dt >= -200_000) & (dt < 200_000)], bins=h.edges)
    assert np.array_equal(h.counts, brute)


def test_histogram_parameter_errors():
    with pytest.raises(DataError):
        coincidence_histogram([1, 2], [3], bin_width_ps=0)


def test_detection_event_validation():
    assert DetectionEvent("e", 5, 1.0, 2.0).t_ps == 5
    with pytest.raises(DataError):
        DetectionEvent("p3", 5)
    with pytest.raises(DataError):
        DetectionEvent("p1", -1)


# -- coincidence window -----------------------------------------------------------------------------


def test_flat_histogram_has_no_peak(rng):
    with pytest.raises(NoPeakError):
        find_coincidence_window(hist_from_counts(rng.poisson(100, 640)))
    with pytest.raises(NoPeakError):
        find_coincidence_window(hist_from_counts(np.zeros(10, dtype=int)))


def test_delta_peak_one_bin_window():
    counts = np.full(640, 100)
    counts[400] = 1000
    w = find_coincidence_window(hist_from_counts(counts))
    assert w.bins == (400, 400) and w.width_ps == BW
    assert w.snr == pytest.approx((1000 - 100) / 100)


def test_five_ns_peak_width(rng):
    true_width = 5000
    counts = rng.poisson(100, 640).astype(float)
    edges = hist_from_counts(counts).edges
    # box of true coincidences over [100 ns, 105 ns), shared out by bin overlap
    overlap = np.clip(np.minimum(edges[1:], 105_000) - np.maximum(edges[:-1], 100_000), 0, None)
    counts += rng.poisson(3000 * overlap / BW)
    w = find_coincidence_window(hist_from_counts(counts.astype(int)))
    assert abs(w.width_ps - true_width) <= 2 * BW
    assert w.t_lo_ps <= 100_000 + BW and w.t_hi_ps >= 105_000 - BW


def test_background_windows_layout():
    win = find_coincidence_window(hist_from_counts(np.r_[np.full(400, 50), 900, 900, np.full(238, 50)]))
    bw = background_windows(win)
    assert len(bw) == 10
    check_windows(win, bw)
    assert all(b[1] - b[0] == win.width_ps for b in bw)
    assert bw[0][0] == win.t_hi_ps + 2 * win.width_ps
    neg = background_windows(type(win)(-5000, -2000, 1.0, 1.0, ()))
    assert all(b[1] <= -2000 - 2 * 3000 for b in neg)


def test_overlapping_windows_rejected():
    with pytest.raises(DataError, match="overlaps"):
        check_windows((0, 10), [(5, 15)])
    with pytest.raises(DataError):
        check_windows((0, 10), [(20, 30), (25, 35)])
    with pytest.raises(DataError):
        background_subtract(np.ones((2, 2)), np.zeros((1, 2, 2)), (0, 10), [(5, 15)])


# -- background subtraction ------------------------------------------------------------------------


def test_subtract_zero_backgrounds_is_identity(rng):
    pat = rng.poisson(5, (8, 8)).astype(float)
    assert np.array_equal(background_subtract(pat, np.zeros((10, 8, 8))), pat)
    assert np.array_equal(background_subtract(pat, np.zeros((0, 8, 8))), pat)


def test_subtract_uniform_background_mean_zero(rng):
    lam = 20.0
    pat = rng.poisson(lam, (64, 64))
    bgs = rng.poisson(lam, (10, 64, 64))
    res = background_subtract(pat, bgs)
    # per-pixel variance lam (signal) + lam / 10 (mean of ten windows)
    se = np.sqrt(lam * 1.1 / res.size)
    assert abs(res.mean()) < 3 * se


@given(st.floats(-1e3, 1e3, allow_nan=False), st.integers(0, 2**32 - 1))
def test_subtract_commutes_with_constant(c, seed):
    rng = np.random.default_rng(seed)
    pat = rng.poisson(5, (6, 6)).astype(float)
    bgs = rng.poisson(5, (10, 6, 6)).astype(float)
    assert np.allclose(background_subtract(pat + c, bgs + c), background_subtract(pat, bgs), atol=1e-9)


def test_subtract_shape_mismatch():
    with pytest.raises(DataError):
        background_subtract(np.ones((4, 4)), np.ones((2, 3, 3)))


def test_recovered_visibility_with_accidentals(rng):
    v_true = 0.4
    signal = rng.poisson(fringe_image(v_true, 0.7, amplitude=2.0))
    accidentals = 5.0
    pat = signal + rng.poisson(accidentals, signal.shape)
    bgs = rng.poisson(accidentals, (10,) + signal.shape)
    res = fit_fringe(extract_fringe(background_subtract(pat, bgs)))
    assert abs(res.visibility - v_true) < 0.03


# -- fringe geometry and extraction --------------------------------------------------------------


def test_vertical_fringes_phase_exact():
    for phi in (0.0, 1.0, -2.5):
        h = extract_fringe(fringe_image(0.5, phi), K=16)
        assert h.geometry.period_px == pytest.approx(64.0, rel=1e-5)
        assert abs(h.geometry.angle_deg) < 1e-3
        res = fit_fringe(h)
        assert angle_diff(res.phase, phi) / (2 * np.pi) < 1e-3


def test_rotated_fringes_match_vertical():
    ref = fit_fringe(extract_fringe(fringe_image(0.6, 0.3))).visibility
    rot = extract_fringe(fringe_image(0.6, 0.3, angle_deg=17.0))
    assert rot.geometry.angle_deg == pytest.approx(17.0, abs=0.05)
    assert rot.geometry.period_px == pytest.approx(64.0, rel=1e-3)
    assert abs(fit_fringe(rot).visibility - ref) < 0.01


def test_geometry_direction_follows_reference():
    img = fringe_image(0.5, 0.0, angle_deg=30.0)
    assert fringe_geometry(img).angle_deg == pytest.approx(30.0, abs=0.05)
    flipped = fringe_geometry(img, reference_angle_deg=180.0)
    assert flipped.angle_deg == pytest.approx(-150.0, abs=0.05)


def test_constant_image_has_no_fringe():
    with pytest.raises(NoFringeError):
        extract_fringe(np.full((64, 64), 3.0))
    with pytest.raises(DataError):
        fringe_geometry(np.ones(16))


def test_extract_fringe_bin_count_checked():
    with pytest.raises(DataError):
        extract_fringe(fringe_image(0.5, 0.0), K=2)
    with pytest.raises(NoFringeError):
        extract_fringe(fringe_image(0.5, 0.0, period=4.0), K=16, geometry=FringeGeometry(0.25, 0.0))


# -- sinusoid fit -------------------------------------------------------------------------------------


def test_fit_exact_sinusoid():
    phases = 2 * np.pi * (np.arange(16) + 0.5) / 16
    y = 100 * (1 + 0.5 * np.cos(phases + 1.0))
    r = fit_fringe(y)
    assert (r.amplitude, r.visibility, r.phase) == pytest.approx((100, 0.5, 1.0), abs=1e-9)
    assert r.residual_rms < 1e-9
    assert np.allclose(r.model(phases), y)


def test_fit_constant_has_zero_visibility():
    r = fit_fringe(np.full(12, 7.0))
    assert r.visibility == pytest.approx(0.0, abs=1e-12) and r.amplitude == pytest.approx(7.0)


@given(st.integers(0, 15), st.floats(0.05, 0.95), st.floats(-np.pi, np.pi))
def test_fit_phase_equivariant_under_bin_shift(k, vis, phi):
    K = 16
    phases = 2 * np.pi * (np.arange(K) + 0.5) / K
    y = 50 * (1 + vis * np.cos(phases + phi))
    base = fit_fringe(y).phase
    shifted = fit_fringe(np.roll(y, k)).phase
    assert angle_diff(shifted, base - 2 * np.pi * k / K) < 1e-9


@pytest.mark.parametrize("v_true", [0.145, 0.3, 0.5, 0.687])
def test_fit_poisson_visibility(rng, v_true):
    phases = 2 * np.pi * (np.arange(16) + 0.5) / 16
    y = rng.poisson(2000 * (1 + v_true * np.cos(phases + 0.4)))
    assert abs(fit_fringe(y).visibility - v_true) < 0.03


def test_fit_permutation_invariant_with_explicit_phases(rng):
    phases = 2 * np.pi * (np.arange(16) + 0.5) / 16
    y = rng.poisson(300 * (1 + 0.4 * np.cos(phases - 2.0)))
    perm = rng.permutation(16)
    a, b = fit_fringe(y, phases), fit_fringe(y[perm], phases[perm])
    assert (a.amplitude, a.visibility, a.phase) == pytest.approx((b.amplitude, b.visibility, b.phase), abs=1e-12)


def test_fit_errors():
    with pytest.raises(DataError):
        fit_fringe(np.ones(7))
    with pytest.raises(DataError):
        fit_fringe(-np.ones(8))
    with pytest.raises(DataError):
        fit_fringe(np.ones(8), phases=np.zeros(8))


# -- estimators and end-to-end ---------------------------------------------------------------------------


def synthetic_acquisition(rng, n_e=400_000, delay=100_000, jitter=600, prob=0.05, vis=(0.6, 0.3), phases=(0.0, 1.2)):
    duration = 2 * 10**10  # 20 ms
    e = np.sort(rng.integers(0, duration, n_e))
    xy = rng.uniform(0, 256, size=(n_e, 2))
    u = xy[:, 0] - 128
    photons = {}
    for d, (v, ph) in enumerate(zip(vis, phases), 1):
        p_emit = prob * (1 + v * np.cos(2 * np.pi * u / 64 + ph)) / 2
        hit = rng.uniform(size=n_e) < p_emit
        t = e[hit] + delay + rng.normal(0, jitter, hit.sum()).astype(np.int64)
        bg = rng.integers(0, duration, 8_000)
        photons[d] = np.sort(np.concatenate([t, bg]))
    return e, xy, photons


def test_coincidence_gate_and_fringe_fitter(rng):
    e, xy, photons = synthetic_acquisition(rng)
    gate = CoincidenceGate().fit(e, photons[1])
    assert gate.window_.t_lo_ps <= 100_000 < gate.window_.t_hi_ps
    assert gate.snr_ > 4
    pats = {d: CoincidenceGate().fit(e, t).transform(e, xy, t) for d, t in photons.items()}
    ff = FringeFitter().fit(pats)
    assert ff.geometry_.period_px == pytest.approx(64, rel=0.02)
    assert abs(ff.results_[1].visibility - 0.6) < 0.05
    assert abs(ff.results_[2].visibility - 0.3) < 0.05
    assert set(ff.predict([0.0, 1.0])) == {1, 2}
    with pytest.raises(DataError):
        FringeFitter().fit([])


def test_process_acquisition_recovers_phase_shift(rng):
    e, xy, photons = synthetic_acquisition(rng)
    res = process_acquisition(e, xy, photons)
    shift = np.mod((res[1].fit.phase - res[2].fit.phase) / (2 * np.pi), 1)
    assert abs(shift - np.mod(-1.2 / (2 * np.pi), 1)) < 0.02
    fixed = process_acquisition(e, xy, photons, windows={1: (95_000, 105_000), 2: (95_000, 105_000)})
    assert fixed[1].window.t_lo_ps == 95_000


def test_gated_pattern_counts_pairs():
    e = np.array([0, 1000, 2000])
    xy = np.array([[1.5, 2.5], [3.5, 0.5], [0.5, 0.5]])
    p = np.array([500, 2600])
    pat = gated_pattern(e, xy, p, (400, 700), shape=(4, 4))
    assert pat.sum() == 2 and pat[2, 1] == 1 and pat[0, 0] == 1


def test_event_file_round_trip(rng):
    e = np.sort(rng.integers(0, 10**9, 50))
    xy = np.round(rng.uniform(0, 256, (50, 2)), 3)
    ph = {1: np.sort(rng.integers(0, 10**9, 7)), 2: np.sort(rng.integers(0, 10**9, 9))}
    buf = io.StringIO()
    write_events(buf, e, xy, ph)
    e2, xy2, ph2 = read_events(io.StringIO("# header\n" + buf.getvalue()))
    assert np.array_equal(e2, e) and np.allclose(xy2, xy, atol=5e-4)
    assert all(np.array_equal(ph[d], ph2[d]) for d in (1, 2))


def test_event_file_errors():
    for bad in ("e,10\n", "p3,5\n", "p1,abc\n", "p1,-5\n"):
        with pytest.raises(DataError):
            read_events(io.StringIO(bad))
