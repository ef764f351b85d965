"""Iterative maximum-likelihood reconstruction of single-qubit photon states."""

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from eptomo._validation import check_density_matrix
from eptomo.exceptions import DataError, NumericalError
from eptomo.polopt import CountRecord, MeasurementEffect, photon_effect, scan_effect_set
from eptomo.qmat import PAULI_I, PAULI_X, PAULI_Y, PAULI_Z

logger = logging.getLogger(__name__)

_PAULIS = np.stack([PAULI_I, PAULI_X, PAULI_Y, PAULI_Z])


@dataclass(frozen=True)
class BlochVector:
    x: float
    y: float
    z: float

    def as_array(self):
        return np.array([self.x, self.y, self.z])


def bloch(rho):
    """Pauli expectation values of a qubit state, ``z`` along H/V."""
    rho = check_density_matrix(rho, dims=(2,))
    x, y, z = (float(np.real(np.trace(p @ rho))) for p in _PAULIS[1:])
    return BlochVector(x, y, z)


def bloch_angle(a, b):
    """Angle in degrees between two Bloch vectors."""
    va = a.as_array() if isinstance(a, BlochVector) else np.asarray(a, float)
    vb = b.as_array() if isinstance(b, BlochVector) else np.asarray(b, float)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise DataError("Bloch angle undefined for a zero-length vector")
    return float(np.degrees(np.arccos(np.clip(va @ vb / (na * nb), -1.0, 1.0))))


def bloch_to_rho(vec):
    x, y, z = vec
    return 0.5 * (PAULI_I + x * PAULI_X + y * PAULI_Y + z * PAULI_Z)


def _stack(records):
    ops = np.stack([np.asarray(r.effect.op, dtype=complex) for r in records])
    counts = np.array([r.count for r in records], dtype=float)
    groups = [r.effect.group_id for r in records]
    _, gidx = np.unique(groups, return_inverse=True)
    return ops, counts, gidx


def _loglik(ops, counts, gidx, rho):
    p = np.real(np.einsum("nij,ji->n", ops, rho))
    gsum = np.bincount(gidx, weights=p)
    pn = np.clip(p / gsum[gidx], 1e-300, None)
    return float(np.sum(counts * np.log(pn)))


def mle_qubit(records, max_iter=10_000, tol=1e-10, check=False, return_history=False):
    """Reconstruct a 2x2 state from count records by the ``R rho R`` iteration.

    Starts from the maximally mixed state. A step that would lower the
    log-likelihood is replaced by the diluted update
    ``(I + eps R) rho (I + eps R)`` with ``eps`` halved until the
    likelihood no longer decreases.
    """
    records = list(records)
    if not records:
        raise DataError("no count records")
    ops, counts, gidx = _stack(records)
    if ops.shape[1:] != (2, 2):
        raise DataError(f"mle_qubit needs 2x2 effects, got {ops.shape[1:]}")
    total = counts.sum()
    if total <= 0:
        raise DataError("total counts are zero")
    pauli_coords = np.real(np.einsum("nij,pji->np", ops, _PAULIS))
    if np.linalg.matrix_rank(pauli_coords, tol=1e-9) < 4:
        raise DataError("effect set is not tomographically complete")

    # Effects of each group add up to the group operator G; for complete pairs
    # G is the identity and the plain update applies.
    gops = np.zeros((gidx.max() + 1, 2, 2), dtype=complex)
    np.add.at(gops, gidx, ops)
    gtotal = np.bincount(gidx, weights=counts)

    rho = np.eye(2, dtype=complex) / 2
    ll = _loglik(ops, counts, gidx, rho)
    history = [ll]
    for it in range(max_iter):
        p = np.clip(np.real(np.einsum("nij,ji->n", ops, rho)), 1e-300, None)
        gp = np.clip(np.real(np.einsum("gij,ji->g", gops, rho)), 1e-300, None)
        rmat = np.einsum("n,nij->ij", counts / p, ops) - np.einsum("g,gij->ij", gtotal / gp, gops)
        rmat = rmat / total + np.eye(2)
        eps = None
        while True:
            step = rmat if eps is None else np.eye(2) + eps * (rmat - np.eye(2))
            new = step @ rho @ step.conj().T
            new = 0.5 * (new + new.conj().T)
            new /= np.real(np.trace(new))
            new_ll = _loglik(ops, counts, gidx, new)
            if new_ll >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            eps = 0.5 if eps is None else eps / 2
            if eps < 1e-12:
                new, new_ll = rho, ll
                break
        if check:
            check_density_matrix(new, dims=(2,), eig_tol=1e-10, trace_tol=1e-10)
        gain = new_ll - ll
        rho, ll = new, new_ll
        history.append(ll)
        if gain < tol:
            break
    else:
        logger.warning("mle_qubit hit max_iter=%d (last gain %.3g)", max_iter, gain)
    if not np.all(np.isfinite(rho)):
        raise NumericalError("MLE iteration produced non-finite entries")
    if return_history:
        return rho, np.array(history)
    return rho


def reduce_scan_records(records):
    """Map 4x4 scan records (``|side><side| (x) E_d``) onto 2x2 photon records per side."""
    out = {"L": [], "R": []}
    for r in records:
        e = r.effect
        if e.context[0] != "side":
            continue
        pe = photon_effect(e.setting, e.detector)
        eff2 = MeasurementEffect(pe, e.setting, e.detector, e.context, e.group_id)
        out[e.context[1]].append(CountRecord(eff2, r.count))
    return out


def aggregate_scan_pixels(rows):
    """Sum raster-pixel counts per (setting, side, detector)."""
    agg = {}
    for setting, side, detector, count in rows:
        key = (setting, side, detector)
        agg[key] = agg.get(key, 0) + int(count)
    records = []
    for (setting, side, detector), count in sorted(agg.items(), key=lambda kv: (kv[0][0].qwp_deg, kv[0][0].hwp_deg, kv[0][1], kv[0][2])):
        records.append(CountRecord(scan_effect_set(setting, side)[detector - 1], count))
    return records


class QubitMLETomography(BaseEstimator):
    """Per-side photon state reconstruction from single-beam scan records.

    ``fit`` accepts scan :class:`CountRecord` objects with 4x4 effects (as
    produced by ``scan_effect_set``) and reconstructs one photon state for
    each electron side present.

    Attributes
    ----------
    states_ : dict
        ``side -> 2x2 density matrix``.
    bloch_ : dict
        ``side -> BlochVector``.
    angle_deg_ : float or None
        Angle between the L and R Bloch vectors when both sides were fitted.
    """

    def __init__(self, max_iter=10_000, tol=1e-10):
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        per_side = reduce_scan_records(X)
        self.states_ = {}
        self.loglik_history_ = {}
        for side, recs in per_side.items():
            if recs:
                rho, hist = mle_qubit(recs, self.max_iter, self.tol, return_history=True)
                self.states_[side] = rho
                self.loglik_history_[side] = hist
        if not self.states_:
            raise DataError("no scan records to fit")
        self.bloch_ = {s: bloch(r) for s, r in self.states_.items()}
        self.angle_deg_ = bloch_angle(self.bloch_["L"], self.bloch_["R"]) if len(self.bloch_) == 2 else None
        return self

    def transform(self, X):
        """Predicted detector-1 probability for each scan record."""
        out = []
        for r in X:
            e = r.effect
            rho = self.states_[e.context[1]]
            out.append(np.real(np.trace(photon_effect(e.setting, e.detector) @ rho)))
        return np.array(out)
