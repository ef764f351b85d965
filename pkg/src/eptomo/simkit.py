"""Synthetic experiment generator.

Produces coincidence count tables, single-beam scan tables and raw
electron/photon event streams from a known joint state so that every
analysis stage can be checked against ground truth.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from eptomo._validation import check_density_matrix
from eptomo.entangle import bell_fidelity_opt, dephase_electron
from eptomo.exceptions import DataError
from eptomo.polopt import (
    PAPER_SETTINGS,
    CountRecord,
    WaveplateSetting,
    joint_effect_set,
    photon_effect,
    scan_effect_set,
    scan_grid,
)
from eptomo.qmat import partial_trace, projector

# Stream identifiers mixed into the seed so each generator stage draws
# independent numbers.
_STAGE = {"counts": 1, "scan": 2, "events": 3, "elastic": 4}


@dataclass
class ExperimentTruth:
    """Ground truth and acquisition parameters of a synthetic experiment.

    ``rho_true`` is the joint state for a perfectly coherent incident
    electron; the state actually sampled has its electron coherences damped
    by ``gamma_in``. ``photon_prob`` is the per-electron generation
    probability of a guided photon and ``collection`` the probability that
    such a photon is detected. Only energy-filtered electrons are simulated:
    an electron that emitted no photon passes the filter with probability
    ``filter_acceptance``.
    """

    rho_true: np.ndarray
    gamma_in: float = 1.0
    beam_weights: tuple = (0.64, 0.36)
    photon_prob: float = 1.5e-6
    collection: float = 0.76
    exposure_s: float = 440.0
    electron_rate_hz: float = 2.0e7
    background_rate_hz: tuple = (1.0e4, 1.0e4)
    detector_delays_ps: tuple = (100_000, 112_000)
    jitter_ps: float = 600.0
    filter_acceptance: float = 1.0e-3
    scan_counts: int = 10_000
    detector_efficiencies: tuple = (1.0, 1.0)
    mean_coincidences: float = None
    seed: int = 0
    fringe_period_px: float = 64.0
    fringe_angle_deg: float = 0.0
    fringe_phase_offset: float = 0.0
    detector_px: int = 256

    def __post_init__(self):
        self.rho_true = check_density_matrix(self.rho_true, dims=(4,), herm_tol=1e-10, trace_tol=1e-10)
        if abs(sum(self.beam_weights) - 1) > 1e-9 or min(self.beam_weights) < 0:
            raise DataError(f"beam weights must be non-negative and sum to 1: {self.beam_weights}")
        for name in ("gamma_in", "photon_prob", "collection", "filter_acceptance"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise DataError(f"{name} must lie in [0, 1], got {v}")

    @property
    def rho_effective(self):
        """State actually measured: electron coherence damped by ``gamma_in``."""
        return dephase_electron(self.rho_true, self.gamma_in)

    @property
    def coincidences_per_setting(self):
        if self.mean_coincidences is not None:
            return float(self.mean_coincidences)
        return self.exposure_s * self.electron_rate_hz * self.photon_prob * self.collection

    def rng(self, stage, *extra):
        return np.random.default_rng([self.seed, _STAGE[stage], *extra])

    def to_dict(self):
        d = asdict(self)
        d["rho_true"] = [[z.real, z.imag] for z in np.asarray(self.rho_true).ravel()]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "rho_true" in d:
            vals = np.array([complex(a, b) for a, b in d["rho_true"]])
            d["rho_true"] = vals.reshape(4, 4)
        for k in ("beam_weights", "background_rate_hz", "detector_delays_ps", "detector_efficiencies"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _pure_from_bloch(v):
    theta = np.arccos(np.clip(v[2], -1, 1))
    phi = np.arctan2(v[1], v[0])
    return np.array([np.cos(theta / 2), np.exp(1j * phi) * np.sin(theta / 2)])


def emitter_state(weights=(0.64, 0.36), separation_deg=121.0, photon_purity=1.0):
    """Joint state of an electron in two beams emitting differently polarised photons.

    The two photon Bloch vectors lie in the equatorial plane, ``separation_deg``
    apart and symmetric about the circular axis, so they differ along the
    diagonal axis. ``photon_purity`` mixes the photon with white noise.
    """
    h = np.deg2rad(separation_deg / 2)
    v_l = np.array([np.sin(h), np.cos(h), 0.0])
    v_r = np.array([-np.sin(h), np.cos(h), 0.0])
    psi = np.sqrt(weights[0]) * np.kron([1, 0], _pure_from_bloch(v_l)) + np.sqrt(weights[1]) * np.kron(
        [0, 1], _pure_from_bloch(v_r)
    )
    rho = projector(psi)
    electron = partial_trace(rho, keep="first")
    return photon_purity * rho + (1 - photon_purity) * np.kron(electron, np.eye(2) / 2)


def paper_like_truth(target_fidelity=0.543, gamma_in=0.727, **kwargs):
    """Truth whose measured (coherence-damped) state has the given Bell fidelity.

    Beam weights 0.64/0.36 and a 121 degree separation between the photon
    Bloch vectors; the photon purity is solved for.
    """
    weights = kwargs.pop("beam_weights", (0.64, 0.36))

    def gap(purity):
        rho = dephase_electron(emitter_state(weights, 121.0, purity), gamma_in)
        return bell_fidelity_opt(rho)[0] - target_fidelity

    purity = brentq(gap, 0.05, 1.0, xtol=1e-10)
    rho = emitter_state(weights, 121.0, purity)
    return ExperimentTruth(rho_true=rho, gamma_in=gamma_in, beam_weights=weights, **kwargs)


def simulate_counts(truth, settings=PAPER_SETTINGS, K=16):
    """Coincidence counts for each fringe setting.

    Per setting the total is Poisson with mean
    ``truth.coincidences_per_setting`` and is split multinomially over the
    ``2K`` (detector, phase bin) cells.
    """
    rho = truth.rho_effective
    out = []
    for i, setting in enumerate(settings):
        rng = truth.rng("counts", i)
        effects = joint_effect_set(setting, K, truth.detector_efficiencies)
        p = np.array([e.probability(rho) for e in effects])
        p = np.clip(p, 0, None)
        p /= p.sum()
        n = rng.poisson(truth.coincidences_per_setting)
        counts = rng.multinomial(n, p)
        out.extend(CountRecord(e, int(c)) for e, c in zip(effects, counts))
    return out


def simulate_scan(truth, grid=None, counts_per_setting=None):
    """Single-beam scan counts for both electron sides.

    For each (setting, side) a fixed total of ``counts_per_setting`` photons
    is split binomially between the detectors with the side-conditional
    probabilities.
    """
    grid = scan_grid() if grid is None else grid
    n = truth.scan_counts if counts_per_setting is None else counts_per_setting
    rho = truth.rho_true
    out = []
    for side_idx, side in enumerate(("L", "R")):
        rng = truth.rng("scan", side_idx)
        for setting in grid:
            e1, e2 = scan_effect_set(setting, side, truth.detector_efficiencies)
            p1, p2 = e1.probability(rho), e2.probability(rho)
            if p1 + p2 <= 0:
                continue
            c1 = rng.binomial(n, np.clip(p1 / (p1 + p2), 0, 1))
            out.append(CountRecord(e1, int(c1)))
            out.append(CountRecord(e2, int(n - c1)))
    return out


def fringe_model(rho, setting, detector, efficiencies=(1.0, 1.0)):
    """Analytic conditional fringe ``P_d (1 + V cos(phi + phi0))`` of one detector.

    Returns ``(P_d, V, phi0)`` where ``P_d`` is the detector probability.
    """
    e = photon_effect(setting, detector, efficiencies[detector - 1])
    blk = np.asarray(rho).reshape(2, 2, 2, 2)
    p_d = np.real(np.trace(e @ blk[0, :, 0, :]) + np.trace(e @ blk[1, :, 1, :]))
    c_d = np.trace(e @ blk[0, :, 1, :])
    if p_d <= 0:
        return 0.0, 0.0, 0.0
    return float(p_d), float(2 * abs(c_d) / p_d), float(np.angle(c_d))


def elastic_visibility(truth):
    """Two-beam visibility without the sample, ``2 gamma sqrt(w_L w_R)``."""
    w_l, w_r = truth.beam_weights
    return 2 * truth.gamma_in * np.sqrt(w_l * w_r)


def simulate_elastic_counts(truth, n, K=16):
    """Phase-binned electron counts without the sample (no photon emission)."""
    w_l, w_r = truth.beam_weights
    c = truth.gamma_in * np.sqrt(w_l * w_r)
    phis = 2 * np.pi * (np.arange(K) + 0.5) / K
    p = (1 + 2 * c * np.cos(phis)) / K
    return truth.rng("elastic").multinomial(n, p / p.sum())


@dataclass
class EventStreams:
    """Time-sorted detection events of one acquisition.

    ``electron_t``/``electron_xy`` hold energy-filtered electron events;
    ``photon_t[d]`` the photon timestamps of detector ``d`` (1 or 2).
    ``truth_pairs`` counts the true coincidences per detector.
    """

    electron_t: np.ndarray
    electron_xy: np.ndarray
    photon_t: dict
    truth_pairs: dict = field(default_factory=dict)


def _sample_fringe_phase(rng, n, visibility, phi0):
    """Draw phases from ``(1 + V cos(phi + phi0)) / 2pi`` by rejection."""
    out = np.empty(0)
    while out.size < n:
        m = int((n - out.size) * (1 + visibility) * 1.1) + 16
        phi = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(0, 1 + visibility, m) < 1 + visibility * np.cos(phi + phi0)
        out = np.concatenate([out, phi[keep]])
    return out[:n]


def _phase_to_xy(rng, phi, truth):
    """Place electrons on the detector at positions with fringe phase ``phi``.

    Fringe phase grows along the direction at ``fringe_angle_deg`` from the
    x axis, measured from the detector centre. Off-detector draws are redrawn.
    """
    size = truth.detector_px
    centre = size / 2.0
    period = truth.fringe_period_px
    theta = np.deg2rad(truth.fringe_angle_deg)
    n_periods = int(np.ceil(size / period)) + 1
    base = np.mod((phi - truth.fringe_phase_offset) / (2 * np.pi) * period, period)
    xy = np.empty((phi.size, 2))
    todo = np.arange(phi.size)
    while todo.size:
        u = base[todo] + period * rng.integers(-n_periods, n_periods, todo.size)
        v = rng.uniform(-size, size, todo.size)
        x = centre + u * np.cos(theta) - v * np.sin(theta)
        y = centre + u * np.sin(theta) + v * np.cos(theta)
        ok = (x >= 0) & (x < size) & (y >= 0) & (y < size)
        xy[todo[ok], 0] = x[ok]
        xy[todo[ok], 1] = y[ok]
        todo = todo[~ok]
    return xy


def simulate_events(truth, settings=PAPER_SETTINGS, duration_s=None):
    """Electron and photon event streams for each setting.

    Filtered electrons arrive as a Poisson process. A fraction of them
    emitted a photon; for each detected photon the detector and the electron
    fringe phase are drawn from the joint distribution of the measured state,
    the photon is delayed by the detector delay plus Gaussian jitter, and the
    electron lands on the fringe at that phase. Remaining electrons follow
    the photon-blind electron fringe. Independent photon background is added
    per detector. Returns ``{setting: EventStreams}``.
    """
    duration_s = truth.exposure_s if duration_s is None else duration_s
    rho = truth.rho_effective
    p_emit = truth.photon_prob
    filt_rate = truth.electron_rate_hz * (p_emit + (1 - p_emit) * truth.filter_acceptance)
    frac_emitter = p_emit / (p_emit + (1 - p_emit) * truth.filter_acceptance) if filt_rate > 0 else 0.0
    duration_ps = int(round(duration_s * 1e12))
    out = {}
    for i, setting in enumerate(settings):
        rng = truth.rng("events", i)
        n_e = rng.poisson(filt_rate * duration_s)
        t_e = np.sort(rng.integers(0, duration_ps, n_e))
        emitter = rng.uniform(size=n_e) < frac_emitter
        detected = emitter & (rng.uniform(size=n_e) < truth.collection)
        idx_det = np.flatnonzero(detected)

        models = [fringe_model(rho, setting, d, truth.detector_efficiencies) for d in (1, 2)]
        p_d = np.array([m[0] for m in models])
        # detection efficiency below 1 loses photons rather than rerouting them
        p_any = p_d.sum()
        choice = rng.uniform(size=idx_det.size) * max(p_any, 1.0)
        det = np.where(choice < p_d[0], 1, np.where(choice < p_any, 2, 0))
        phases = np.empty(n_e)
        for d in (1, 2):
            sel = idx_det[det == d]
            _, vis, phi0 = models[d - 1]
            phases[sel] = _sample_fringe_phase(rng, sel.size, vis, phi0)
        rest = np.setdiff1d(np.arange(n_e), idx_det[det > 0], assume_unique=True)
        # photon-blind electrons: electron-only fringe
        blk = rho.reshape(2, 2, 2, 2)
        c_e = np.trace(blk[0, :, 1, :])
        vis_e = 2 * abs(c_e)
        phases[rest] = _sample_fringe_phase(rng, rest.size, min(vis_e, 1.0), np.angle(c_e))
        xy = _phase_to_xy(rng, phases, truth)

        photons = {}
        pairs = {}
        for d in (1, 2):
            sel = idx_det[det == d]
            jitter = np.rint(rng.normal(0, truth.jitter_ps, sel.size)).astype(np.int64) if truth.jitter_ps > 0 else 0
            t_sig = t_e[sel] + truth.detector_delays_ps[d - 1] + jitter
            n_bg = rng.poisson(truth.background_rate_hz[d - 1] * duration_s)
            t_bg = rng.integers(0, duration_ps, n_bg)
            t_p = np.sort(np.concatenate([t_sig, t_bg]))
            photons[d] = t_p[t_p >= 0]
            pairs[d] = int(sel.size)
        out[setting] = EventStreams(t_e.astype(np.int64), xy, photons, pairs)
    return out


def default_truth(seed=0, **kwargs):
    return paper_like_truth(seed=seed, **kwargs)


__all__ = [
    "ExperimentTruth",
    "EventStreams",
    "WaveplateSetting",
    "paper_like_truth",
    "emitter_state",
    "simulate_counts",
    "simulate_scan",
    "simulate_events",
    "fringe_model",
    "elastic_visibility",
    "simulate_elastic_counts",
]
