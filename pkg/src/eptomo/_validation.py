"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from eptomo.exceptions import DataError

HERMITIAN_TOL = 1e-10


def check_matrix(a, name="matrix", square=True):
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {a.shape}")
    if square and a.shape[0] != a.shape[1]:
        raise DataError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} has non-finite entries")
    return a


def check_hermitian(h, tol=HERMITIAN_TOL, name="matrix"):
    h = np.asarray(h, dtype=complex)
    if h.ndim < 2 or h.shape[-1] != h.shape[-2]:
        raise DataError(f"{name} must be square, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise DataError(f"{name} has non-finite entries")
    dev = np.max(np.abs(h - np.swapaxes(h.conj(), -1, -2))) if h.size else 0.0
    if dev > tol:
        raise DataError(f"{name} is not Hermitian (max deviation {dev:.3g})")
    return h


def check_density_matrix(rho, dims=(2, 4), herm_tol=1e-12, eig_tol=1e-10, trace_tol=1e-12):
    """Validate a density matrix and return it as a complex array.

    Checks Hermiticity, unit trace and positive semidefiniteness.
    """
    from eptomo.qmat import herm_eigvals

    rho = check_matrix(rho, "density matrix")
    if rho.shape[0] not in dims:
        raise DataError(f"density matrix dimension must be one of {dims}, got {rho.shape[0]}")
    check_hermitian(rho, herm_tol, "density matrix")
    tr = np.trace(rho).real
    if abs(tr - 1.0) > trace_tol:
        raise DataError(f"density matrix trace is {tr!r}, expected 1")
    lo = herm_eigvals(rho)[0]
    if lo < -eig_tol:
        raise DataError(f"density matrix has negative eigenvalue {lo:.3g}")
    return rho


def check_pure_state(psi, tol=1e-12):
    psi = np.asarray(psi, dtype=complex).ravel()
    if not np.all(np.isfinite(psi)):
        raise DataError("state vector has non-finite entries")
    norm = np.linalg.norm(psi)
    if abs(norm - 1.0) > tol:
        raise DataError(f"state vector norm is {norm!r}, expected 1")
    return psi


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
