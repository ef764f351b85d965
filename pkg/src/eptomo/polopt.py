"""Measurement effects for the photon polarisation optics and electron fringes.

Jones conventions: fast axis measured from horizontal,
``QWP(t) = R(t) diag(1, i) R(-t)`` and ``HWP(t) = R(t) diag(1, -1) R(-t)``.
Light passes the quarter-wave plate first, then the half-wave plate, then the
polarising beam splitter (detector 1 transmits H, detector 2 reflects V).
"""

from dataclasses import dataclass, field

import numpy as np

from eptomo.exceptions import DataError

ELECTRON_L = np.array([[1, 0], [0, 0]], dtype=complex)
ELECTRON_R = np.array([[0, 0], [0, 1]], dtype=complex)
_DETECTOR_PROJECTORS = {
    1: np.array([[1, 0], [0, 0]], dtype=complex),
    2: np.array([[0, 0], [0, 1]], dtype=complex),
}


@dataclass(frozen=True)
class WaveplateSetting:
    qwp_deg: float
    hwp_deg: float

    def __post_init__(self):
        if not (np.isfinite(self.qwp_deg) and np.isfinite(self.hwp_deg)):
            raise DataError(f"waveplate angles must be finite: {self}")

    @property
    def key(self):
        return f"{self.qwp_deg:g}/{self.hwp_deg:g}"


# The three fringe settings used in the experiment.
PAPER_SETTINGS = (
    WaveplateSetting(30.0, 28.0),
    WaveplateSetting(30.0, 95.0),
    WaveplateSetting(74.0, 80.0),
)


@dataclass(frozen=True, eq=False)
class MeasurementEffect:
    """A positive operator with its experimental label.

    ``context`` is ``("phase", k, K)`` for electron fringe bin ``k`` of ``K``
    or ``("side", "L" | "R")`` for a single-beam scan.
    """

    op: np.ndarray
    setting: WaveplateSetting
    detector: int
    context: tuple
    group_id: str

    def probability(self, rho):
        return float(np.real(np.sum(self.op * np.asarray(rho).T)))


@dataclass(frozen=True, eq=False)
class CountRecord:
    effect: MeasurementEffect
    count: int = field(default=0)

    def __post_init__(self):
        if self.count < 0 or int(self.count) != self.count:
            raise DataError(f"count must be a non-negative integer, got {self.count!r}")


def _rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=complex)


def waveplate_jones(kind, theta_deg):
    """Jones matrix of a quarter- or half-wave plate with its fast axis at ``theta_deg``."""
    theta = np.deg2rad(theta_deg)
    if kind == "quarter":
        retarder = np.diag([1, 1j])
    elif kind == "half":
        retarder = np.diag([1, -1])
    else:
        raise DataError(f"kind must be 'quarter' or 'half', got {kind!r}")
    return _rotation(theta) @ retarder @ _rotation(-theta)


def analyser_unitary(setting):
    """``W = J_half(hwp) J_quarter(qwp)``."""
    return waveplate_jones("half", setting.hwp_deg) @ waveplate_jones("quarter", setting.qwp_deg)


def photon_effect(setting, detector, efficiency=1.0):
    """2x2 effect ``W^dagger P_d W`` for one beam-splitter output.

    ``efficiency`` scales the effect to model per-path transmission loss.
    """
    if detector not in _DETECTOR_PROJECTORS:
        raise DataError(f"detector must be 1 or 2, got {detector!r}")
    w = analyser_unitary(setting)
    e = w.conj().T @ _DETECTOR_PROJECTORS[detector] @ w
    e = 0.5 * (e + e.conj().T)
    return efficiency * e


def phase_bin_centres(K):
    return 2 * np.pi * (np.arange(K) + 0.5) / K


def electron_phase_effect(phi, K):
    """Weighted projector onto ``(1, e^{i phi})`` for one of ``K`` phase bins.

    The weight ``1/K`` makes the ``K`` bin effects sum to the identity.
    """
    if K < 3:
        raise DataError(f"need at least 3 phase bins, got {K}")
    k = phi * K / (2 * np.pi) - 0.5
    if not (np.isfinite(k) and abs(k - round(k)) < 1e-9 and 0 <= round(k) < K):
        raise DataError(f"phi={phi!r} is not a bin centre of the {K}-bin partition")
    v = np.array([1.0, np.exp(1j * phi)])
    return np.outer(v, v.conj()) / K


def _electron_phase_ops(K):
    phis = phase_bin_centres(K)
    ops = np.zeros((K, 2, 2), dtype=complex)
    ops[:, 0, 0] = ops[:, 1, 1] = 1.0 / K
    ops[:, 0, 1] = np.exp(-1j * phis) / K
    ops[:, 1, 0] = np.exp(1j * phis) / K
    return ops


def joint_effect_set(setting, K, efficiencies=(1.0, 1.0)):
    """The ``2K`` joint effects of one fringe measurement, detector-major order."""
    if K < 3:
        raise DataError(f"need at least 3 phase bins, got {K}")
    group = f"fringe:{setting.key}:K{K}"
    eops = _electron_phase_ops(K)
    out = []
    for d in (1, 2):
        pe = photon_effect(setting, d, efficiencies[d - 1])
        # batched Kronecker product eops[k] (x) pe
        ops = np.einsum("kab,cd->kacbd", eops, pe).reshape(K, 4, 4)
        out.extend(MeasurementEffect(ops[k], setting, d, ("phase", k, K), group) for k in range(K))
    return out


def scan_effect_set(setting, side, efficiencies=(1.0, 1.0)):
    """The two effects ``|side><side| (x) E_d`` of a single-beam scan setting."""
    if side not in ("L", "R"):
        raise DataError(f"side must be 'L' or 'R', got {side!r}")
    proj = ELECTRON_L if side == "L" else ELECTRON_R
    group = f"scan:{setting.key}:{side}"
    return [
        MeasurementEffect(np.kron(proj, photon_effect(setting, d, efficiencies[d - 1])), setting, d, ("side", side), group)
        for d in (1, 2)
    ]


def scan_grid(step_deg=10.0, stop_deg=90.0):
    """All (QWP, HWP) pairs on a square grid, 0 to ``stop_deg`` inclusive."""
    angles = np.arange(0.0, stop_deg + 1e-9, step_deg)
    return [WaveplateSetting(float(q), float(h)) for q in angles for h in angles]


# -- text formats -------------------------------------------------------------


def format_context(context):
    if context[0] == "phase":
        return f"phase:{context[1]}/{context[2]}"
    return context[1]


def parse_context(token):
    token = token.strip()
    if token in ("L", "R"):
        return ("side", token)
    if token.startswith("side:") and token[5:] in ("L", "R"):
        return ("side", token[5:])
    if token.startswith("phase:"):
        try:
            k, K = token[6:].split("/")
            k, K = int(k), int(K)
        except ValueError as exc:
            raise DataError(f"bad phase context {token!r}") from exc
        if not 0 <= k < K:
            raise DataError(f"phase bin {k} out of range for K={K}")
        return ("phase", k, K)
    raise DataError(f"unknown measurement context {token!r}")


def _data_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, [t.strip() for t in s.split(",")]


def read_settings(path):
    """Settings file: ``qwp_deg,hwp_deg,context`` with context ``phase:K``, ``side:L`` or ``side:R``."""
    out = []
    for lineno, fields in _data_lines(path):
        if fields[0] == "qwp_deg":
            continue
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
        setting = WaveplateSetting(float(fields[0]), float(fields[1]))
        ctx = fields[2]
        if ctx.startswith("phase:"):
            out.append((setting, ("phase", int(ctx[6:]))))
        elif ctx in ("side:L", "side:R"):
            out.append((setting, ("side", ctx[5:])))
        else:
            raise DataError(f"{path}:{lineno}: unknown context {ctx!r}")
    return out


def write_settings(path, entries, header=""):
    with open(path, "w") as fh:
        fh.write(header)
        fh.write("qwp_deg,hwp_deg,context\n")
        for setting, ctx in entries:
            tag = f"phase:{ctx[1]}" if ctx[0] == "phase" else f"side:{ctx[1]}"
            fh.write(f"{setting.qwp_deg:g},{setting.hwp_deg:g},{tag}\n")


def write_counts(path, records, header=""):
    """Count file: ``qwp_deg,hwp_deg,detector,context,count``.

    ``context`` is ``L``/``R`` for scan records (the scan count file format)
    and ``phase:k/K`` for fringe records.
    """
    with open(path, "w") as fh:
        fh.write(header)
        fh.write("qwp_deg,hwp_deg,detector,context,count\n")
        for r in records:
            e = r.effect
            fh.write(f"{e.setting.qwp_deg:g},{e.setting.hwp_deg:g},{e.detector},{format_context(e.context)},{int(r.count)}\n")


def read_counts(path, efficiencies=(1.0, 1.0)):
    """Parse a count file back into :class:`CountRecord` objects with 4x4 effects."""
    fringe_cache = {}
    scan_cache = {}
    out = []
    for lineno, fields in _data_lines(path):
        if fields[0] == "qwp_deg":
            continue
        if len(fields) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
        try:
            setting = WaveplateSetting(float(fields[0]), float(fields[1]))
            detector = int(fields[2])
            count = int(fields[4])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if detector not in (1, 2):
            raise DataError(f"{path}:{lineno}: detector must be 1 or 2")
        ctx = parse_context(fields[3])
        if ctx[0] == "phase":
            key = (setting, ctx[2])
            if key not in fringe_cache:
                fringe_cache[key] = joint_effect_set(setting, ctx[2], efficiencies)
            eff = fringe_cache[key][(detector - 1) * ctx[2] + ctx[1]]
        else:
            key = (setting, ctx[1])
            if key not in scan_cache:
                scan_cache[key] = scan_effect_set(setting, ctx[1], efficiencies)
            eff = scan_cache[key][detector - 1]
        out.append(CountRecord(eff, count))
    if not out:
        raise DataError(f"{path}: no count records")
    return out
