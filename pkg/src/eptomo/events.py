"""Coincidence-event processing: time-difference histograms, coincidence
windows, gated electron patterns, fringe extraction and sinusoid fits."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from eptomo.exceptions import DataError, NoFringeError, NoPeakError

logger = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH_PS = 1562
DEFAULT_RANGE_PS = 500_000
N_BACKGROUND_WINDOWS = 10
CHANNELS = ("e", "p1", "p2")


@dataclass
class DetectionEvent:
    channel: str
    t_ps: int
    x: float = None
    y: float = None

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise DataError(f"unknown channel {self.channel!r}")
        if self.t_ps < 0:
            raise DataError(f"negative timestamp {self.t_ps}")


@dataclass
class CoincidenceHistogram:
    """Photon-minus-electron arrival-time differences.

    ``counts[i]`` covers ``[edges[i], edges[i + 1])`` in picoseconds.
    """

    bin_width_ps: int
    edges: np.ndarray
    counts: np.ndarray

    @property
    def centres(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass(frozen=True)
class CoincidenceWindow:
    t_lo_ps: int
    t_hi_ps: int
    background_per_bin: float
    snr: float
    bins: tuple

    @property
    def width_ps(self):
        return self.t_hi_ps - self.t_lo_ps


@dataclass
class FringeGeometry:
    """Fringe wavevector in pixels^-1 and the rotation that makes fringes vertical."""

    kx: float
    ky: float

    @property
    def period_px(self):
        return 1.0 / np.hypot(self.kx, self.ky)

    @property
    def angle_deg(self):
        return float(np.degrees(np.arctan2(self.ky, self.kx)))


@dataclass
class FringeHistogram:
    phases: np.ndarray
    counts: np.ndarray
    geometry: FringeGeometry = None


@dataclass
class FringeResult:
    amplitude: float
    visibility: float
    phase: float
    residual_rms: float
    coef: np.ndarray = field(default=None, repr=False)

    def model(self, phases):
        return self.amplitude * (1 + self.visibility * np.cos(np.asarray(phases) + self.phase))


def _check_sorted(t, name):
    t = np.asarray(t)
    if t.ndim != 1:
        raise DataError(f"{name} must be one-dimensional")
    if t.size and np.any(np.diff(t) < 0):
        raise DataError(f"{name} timestamps are not sorted")
    return t.astype(np.int64, copy=False)


def _pair_indices(electrons, photons, lo, hi):
    """Index pairs ``(i_e, i_p)`` with ``lo <= photon - electron < hi``.

    Both streams are sorted, so the matching electrons of each photon form a
    contiguous block found by binary search.
    """
    start = np.searchsorted(electrons, photons - hi, side="right")
    stop = np.searchsorted(electrons, photons - lo, side="right")
    n = stop - start
    i_p = np.repeat(np.arange(photons.size), n)
    offs = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
    i_e = np.repeat(start, n) + offs
    return i_e, i_p


def coincidence_histogram(electrons, photons, bin_width_ps=DEFAULT_BIN_WIDTH_PS, range_ps=DEFAULT_RANGE_PS):
    """Histogram of ``t_photon - t_electron`` over ``[-range_ps, range_ps)``."""
    if bin_width_ps <= 0 or range_ps <= 0:
        raise DataError("bin width and range must be positive")
    e = _check_sorted(electrons, "electron")
    p = _check_sorted(photons, "photon")
    n_bins = int(np.ceil(2 * range_ps / bin_width_ps))
    edges = -range_ps + bin_width_ps * np.arange(n_bins + 1, dtype=np.int64)
    i_e, i_p = _pair_indices(e, p, edges[0], edges[-1])
    dt = p[i_p] - e[i_e]
    idx = (dt - edges[0]) // bin_width_ps
    counts = np.bincount(idx, minlength=n_bins)[:n_bins]
    return CoincidenceHistogram(int(bin_width_ps), edges, counts)


def find_coincidence_window(hist, threshold_sigma=3.0, detect_sigma=5.0):
    """Window around the highest bin, grown while neighbours stand out.

    Background is the median bin content. The window is grown bin by bin
    on either side while the next bin exceeds ``bg + threshold_sigma sqrt(bg)``.
    Raises :class:`NoPeakError` when the highest bin does not exceed
    ``bg + detect_sigma sqrt(bg)``.
    """
    counts = np.asarray(hist.counts, dtype=float)
    if counts.size == 0 or counts.sum() == 0:
        raise NoPeakError("empty coincidence histogram")
    bg = float(np.median(counts))
    noise = np.sqrt(max(bg, 1.0))
    peak = int(np.argmax(counts))
    if counts[peak] <= bg + detect_sigma * noise:
        raise NoPeakError(f"no coincidence peak: max bin {counts[peak]:.0f} vs background {bg:.1f}")
    cut = bg + threshold_sigma * noise
    lo = hi = peak
    while lo > 0 and counts[lo - 1] > cut:
        lo -= 1
    while hi < counts.size - 1 and counts[hi + 1] > cut:
        hi += 1
    n_bins = hi - lo + 1
    in_window = counts[lo : hi + 1].sum()
    expected_bg = bg * n_bins
    snr = (in_window - expected_bg) / expected_bg if expected_bg > 0 else float("inf")
    return CoincidenceWindow(int(hist.edges[lo]), int(hist.edges[hi + 1]), bg, float(snr), (lo, hi))


def background_windows(window, n=N_BACKGROUND_WINDOWS, guard_widths=2):
    """``n`` contiguous windows of the coincidence-window width on the side of
    the peak away from zero delay, starting ``guard_widths`` widths past it."""
    w = window.t_hi_ps - window.t_lo_ps
    centre = 0.5 * (window.t_lo_ps + window.t_hi_ps)
    if centre >= 0:
        start = window.t_hi_ps + guard_widths * w
        return [(start + j * w, start + (j + 1) * w) for j in range(n)]
    stop = window.t_lo_ps - guard_widths * w
    return [(stop - (j + 1) * w, stop - j * w) for j in range(n)]


def _overlap(a, b):
    return a[0] < b[1] and b[0] < a[1]


def check_windows(signal, backgrounds):
    sig = (signal.t_lo_ps, signal.t_hi_ps) if isinstance(signal, CoincidenceWindow) else tuple(signal)
    for i, b in enumerate(backgrounds):
        if _overlap(sig, b):
            raise DataError(f"background window {b} overlaps the coincidence window {sig}")
        for c in backgrounds[i + 1 :]:
            if _overlap(b, c):
                raise DataError(f"background windows {b} and {c} overlap")


def gated_pattern(electrons, electron_xy, photons, window, shape=(256, 256)):
    """2D histogram of electron positions (rows y, columns x) for electrons
    paired with a photon inside ``window = (t_lo, t_hi)``."""
    e = _check_sorted(electrons, "electron")
    p = _check_sorted(photons, "photon")
    lo, hi = (window.t_lo_ps, window.t_hi_ps) if isinstance(window, CoincidenceWindow) else window
    i_e, _ = _pair_indices(e, p, lo, hi)
    xy = np.asarray(electron_xy)[i_e]
    ny, nx = shape
    pat, _, _ = np.histogram2d(xy[:, 1], xy[:, 0], bins=(ny, nx), range=((0, ny), (0, nx)))
    return pat


def background_subtract(pattern, backgrounds, signal_window=None, windows=None):
    """Pattern minus the mean of the background-window patterns.

    When the windows are given they are checked for overlap first.
    """
    pattern = np.asarray(pattern, dtype=float)
    bgs = np.asarray(backgrounds, dtype=float)
    if bgs.ndim == pattern.ndim:
        bgs = bgs[None]
    if bgs.shape[1:] != pattern.shape:
        raise DataError(f"background patterns {bgs.shape[1:]} do not match pattern {pattern.shape}")
    if windows is not None:
        if signal_window is None:
            raise DataError("signal_window is needed to check window overlap")
        check_windows(signal_window, list(windows))
    if bgs.shape[0] == 0:
        return pattern.copy()
    return pattern - bgs.mean(axis=0)


# -- fringes --------------------------------------------------------------------


def _sinusoid_power(pattern, k, yy, xx):
    """Variance explained by a least-squares fit of ``a cos + b sin`` at wavevector ``k``.

    Unlike the plain Fourier magnitude this accounts for the overlap of the
    cosine and sine terms, so the mirror peak at ``-k`` does not bias the
    maximum when the image holds only a few fringe periods.
    """
    arg = 2 * np.pi * (k[0] * xx + k[1] * yy)
    # centred regressors, so the fit includes a free constant like the centred pattern
    c, s = np.cos(arg).ravel(), np.sin(arg).ravel()
    c, s = c - c.mean(), s - s.mean()
    y = pattern.ravel()
    gram = np.array([[c @ c, c @ s], [c @ s, s @ s]])
    rhs = np.array([c @ y, s @ y])
    try:
        return float(rhs @ np.linalg.solve(gram, rhs))
    except np.linalg.LinAlgError:
        return 0.0


def fringe_geometry(pattern, peak_ratio=5.0, reference_angle_deg=0.0):
    """Fringe wavevector from the dominant nonzero peak of the 2D DFT.

    The integer-frequency peak is refined at continuous frequencies by
    maximising the variance explained by a least-squares sinusoid. Of the pair ``+k``/``-k`` the one
    within 90 degrees of ``reference_angle_deg`` is returned, which fixes the
    direction in which the phase increases.
    """
    pat = np.asarray(pattern, dtype=float)
    if pat.ndim != 2:
        raise DataError("pattern must be 2D")
    pat = pat - pat.mean()
    spec = np.abs(np.fft.fft2(pat))
    spec[0, 0] = 0.0
    med = np.median(spec)
    j = int(np.argmax(spec))
    peak = spec.flat[j]
    if not peak > peak_ratio * med or peak == 0:
        raise NoFringeError(f"no Fourier peak above {peak_ratio}x median ({peak:.3g} vs {med:.3g})")
    ny, nx = pat.shape
    iy, ix = np.unravel_index(j, spec.shape)
    fy = np.fft.fftfreq(ny)[iy]
    fx = np.fft.fftfreq(nx)[ix]
    yy, xx = np.mgrid[0:ny, 0:nx].astype(float)
    p0 = _sinusoid_power(pat, (fx, fy), yy, xx)
    res = minimize(
        lambda k: -_sinusoid_power(pat, k, yy, xx),
        np.array([fx, fy]),
        method="Nelder-Mead",
        options={"xatol": 1e-9, "fatol": 1e-14 * p0, "initial_simplex": [[fx, fy], [fx + 0.3 / nx, fy], [fx, fy + 0.3 / ny]]},
    )
    kx, ky = res.x
    ref = np.deg2rad(reference_angle_deg)
    if kx * np.cos(ref) + ky * np.sin(ref) < 0:
        kx, ky = -kx, -ky
    return FringeGeometry(float(kx), float(ky))


def extract_fringe(pattern, K=16, geometry=None, reference_angle_deg=0.0):
    """Phase-binned fringe profile of a 2D pattern.

    The pattern is rotated (bilinear) about its centre so that the fringes run
    vertically, columns are summed and column ``u`` (measured from the centre)
    gets phase ``2 pi u / period``. Bins are normalised by the rotated
    detector area they cover, so partially covered bins are not biased.
    """
    pat = np.asarray(pattern, dtype=float)
    if K < 3:
        raise DataError("need at least 3 phase bins")
    if geometry is None:
        geometry = fringe_geometry(pat, reference_angle_deg=reference_angle_deg)
    angle = geometry.angle_deg
    rot = ndimage.rotate(pat, angle, reshape=False, order=1, mode="constant", cval=0.0)
    cover = ndimage.rotate(np.ones_like(pat), angle, reshape=False, order=1, mode="constant", cval=0.0)
    cols = rot.sum(axis=0)
    cov = cover.sum(axis=0)
    nx = pat.shape[1]
    u = np.arange(nx) + 0.5 - nx / 2.0
    phase = np.mod(2 * np.pi * u / geometry.period_px, 2 * np.pi)
    idx = np.minimum((phase / (2 * np.pi) * K).astype(int), K - 1)
    csum = np.bincount(idx, weights=cols, minlength=K)
    wsum = np.bincount(idx, weights=cov, minlength=K)
    if np.any(wsum <= 0):
        raise NoFringeError("fringe period too short for the requested number of phase bins")
    counts = csum / wsum * (wsum.sum() / K)
    centres = 2 * np.pi * (np.arange(K) + 0.5) / K
    return FringeHistogram(centres, counts, geometry)


def fit_fringe(hist, phases=None):
    """Least-squares fit of ``A (1 + V cos(phi + phi0))``.

    Linear regression on ``{1, cos phi, sin phi}``: with coefficients
    ``c0, c1, c2`` the fit gives ``A = c0``, ``V = |(c1, c2)| / c0`` and
    ``phi0 = atan2(-c2, c1)``.
    """
    if isinstance(hist, FringeHistogram):
        phases, y = hist.phases, hist.counts
    else:
        y = np.asarray(hist, dtype=float)
        if phases is None:
            phases = 2 * np.pi * (np.arange(y.size) + 0.5) / y.size
    y = np.asarray(y, dtype=float)
    phases = np.asarray(phases, dtype=float)
    if y.size < 8:
        raise DataError(f"need at least 8 phase bins, got {y.size}")
    X = np.column_stack([np.ones_like(phases), np.cos(phases), np.sin(phases)])
    if np.linalg.matrix_rank(X) < 3:
        raise DataError("degenerate design matrix")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    c0, c1, c2 = coef
    if c0 <= 0:
        raise DataError(f"fitted mean level {c0:.3g} is not positive")
    amp = np.hypot(c1, c2)
    resid = y - X @ coef
    phase = float(np.arctan2(-c2, c1)) if amp > 0 else 0.0
    return FringeResult(float(c0), float(amp / c0), phase, float(np.sqrt(np.mean(resid**2))), coef)


# -- full per-acquisition pipeline ------------------------------------------------


@dataclass
class DetectorResult:
    histogram: CoincidenceHistogram
    window: CoincidenceWindow
    background_windows: list
    pattern: np.ndarray
    fringe: FringeHistogram = None
    fit: FringeResult = None


def process_acquisition(
    electron_t,
    electron_xy,
    photon_t,
    bin_width_ps=DEFAULT_BIN_WIDTH_PS,
    range_ps=DEFAULT_RANGE_PS,
    K=16,
    shape=(256, 256),
    windows=None,
    reference_angle_deg=0.0,
):
    """Run histogram, window, gating, subtraction and fringe fit for each detector.

    ``photon_t`` maps detector number to its sorted timestamps. Each detector
    gets its own coincidence window unless ``windows`` overrides it. Both
    background-subtracted patterns share the fringe geometry estimated from
    their sum.
    """
    out = {}
    for d, t_p in sorted(photon_t.items()):
        hist = coincidence_histogram(electron_t, t_p, bin_width_ps, range_ps)
        if windows is not None and d in windows:
            lo, hi = windows[d]
            win = CoincidenceWindow(int(lo), int(hi), float(np.median(hist.counts)), float("nan"), ())
        else:
            win = find_coincidence_window(hist)
        bwins = background_windows(win)
        check_windows(win, bwins)
        sig = gated_pattern(electron_t, electron_xy, t_p, win, shape)
        bgs = [gated_pattern(electron_t, electron_xy, t_p, w, shape) for w in bwins]
        pat = background_subtract(sig, bgs)
        out[d] = DetectorResult(hist, win, bwins, pat)
    geom = fringe_geometry(sum(r.pattern for r in out.values()), reference_angle_deg=reference_angle_deg)
    for r in out.values():
        r.fringe = extract_fringe(r.pattern, K, geom)
        r.fit = fit_fringe(r.fringe)
    return out


def phase_shift_cycles(results, a=1, b=2):
    """Phase of detector ``a`` minus detector ``b``, in cycles within ``[0, 1)``."""
    return float(np.mod((results[a].fit.phase - results[b].fit.phase) / (2 * np.pi), 1.0))


class CoincidenceGate(BaseEstimator):
    """Find the coincidence window of one photon detector and gate electrons.

    ``fit(electron_t, photon_t)`` sets ``histogram_``, ``window_``,
    ``background_windows_`` and ``snr_``; ``transform`` returns the
    background-subtracted electron pattern.
    """

    def __init__(self, bin_width_ps=DEFAULT_BIN_WIDTH_PS, range_ps=DEFAULT_RANGE_PS, shape=(256, 256), n_background=N_BACKGROUND_WINDOWS):
        self.bin_width_ps = bin_width_ps
        self.range_ps = range_ps
        self.shape = shape
        self.n_background = n_background

    def fit(self, electron_t, photon_t):
        self.histogram_ = coincidence_histogram(electron_t, photon_t, self.bin_width_ps, self.range_ps)
        self.window_ = find_coincidence_window(self.histogram_)
        self.background_windows_ = background_windows(self.window_, self.n_background)
        self.snr_ = self.window_.snr
        return self

    def transform(self, electron_t, electron_xy, photon_t):
        sig = gated_pattern(electron_t, electron_xy, photon_t, self.window_, self.shape)
        bgs = [gated_pattern(electron_t, electron_xy, photon_t, w, self.shape) for w in self.background_windows_]
        return background_subtract(sig, bgs, self.window_, self.background_windows_)


class FringeFitter(BaseEstimator):
    """Shared-geometry fringe extraction and fit for a set of patterns.

    ``fit(patterns)`` takes a dict or list of 2D patterns; the geometry comes
    from their sum. ``results_`` holds one :class:`FringeResult` per pattern.
    """

    def __init__(self, K=16, reference_angle_deg=0.0):
        self.K = K
        self.reference_angle_deg = reference_angle_deg

    def fit(self, patterns, y=None):
        items = patterns.items() if isinstance(patterns, dict) else enumerate(patterns)
        items = list(items)
        if not items:
            raise DataError("no patterns")
        self.geometry_ = fringe_geometry(sum(np.asarray(p, float) for _, p in items), reference_angle_deg=self.reference_angle_deg)
        self.histograms_ = {k: extract_fringe(p, self.K, self.geometry_) for k, p in items}
        self.results_ = {k: fit_fringe(h) for k, h in self.histograms_.items()}
        return self

    def predict(self, phases):
        return {k: r.model(phases) for k, r in self.results_.items()}


# -- file formats -------------------------------------------------------------------


def write_events(path_or_file, electron_t, electron_xy, photon_t):
    """Write ``channel,t_ps[,x,y]`` lines, time-ordered within each channel."""
    lines = []
    xy = np.asarray(electron_xy)
    for t, (x, y) in zip(np.asarray(electron_t), xy):
        lines.append(f"e,{int(t)},{x:.3f},{y:.3f}")
    for d, ts in sorted(photon_t.items()):
        lines.extend(f"p{d},{int(t)}" for t in ts)
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w") as fh:
            fh.write(text)


def read_events(lines):
    """Parse event lines back into ``(electron_t, electron_xy, {1: t, 2: t})``.

    Streams are sorted on read; comment lines starting with ``#`` are skipped.
    """
    e_t, e_xy, p_t = [], [], {1: [], 2: []}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        ch = parts[0]
        try:
            t = int(parts[1])
        except (IndexError, ValueError):
            raise DataError(f"line {n}: bad timestamp in {line!r}") from None
        if t < 0:
            raise DataError(f"line {n}: negative timestamp")
        if ch == "e":
            if len(parts) != 4:
                raise DataError(f"line {n}: electron events need x,y")
            e_t.append(t)
            e_xy.append((float(parts[2]), float(parts[3])))
        elif ch in ("p1", "p2"):
            p_t[int(ch[1])].append(t)
        else:
            raise DataError(f"line {n}: unknown channel {ch!r}")
    e_t = np.array(e_t, dtype=np.int64)
    e_xy = np.array(e_xy, dtype=float).reshape(-1, 2)
    order = np.argsort(e_t, kind="stable")
    photons = {d: np.sort(np.array(v, dtype=np.int64)) for d, v in p_t.items()}
    return e_t[order], e_xy[order], photons


def format_grid(arr, fmt="%.10g"):
    arr = np.atleast_2d(np.asarray(arr))
    return "\n".join(",".join(fmt % v for v in row) for row in arr) + "\n"
