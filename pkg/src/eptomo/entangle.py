"""Entanglement certification, Bell fidelity and coherence correction."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from eptomo._validation import check_density_matrix, check_hermitian
from eptomo.exceptions import DataError, NumericalError
from eptomo.qmat import PAULI_Y, bell_state, herm_eigvals, partial_transpose, psd_sqrt

_YY = np.kron(PAULI_Y, PAULI_Y)
_PHI = bell_state()


def ppt_min_eigenvalue(rho):
    """Smallest eigenvalue of the photon-side partial transpose.

    Negative values certify entanglement of a two-qubit state.
    """
    rho = check_density_matrix(rho, dims=(4,))
    return float(herm_eigvals(partial_transpose(rho, "second"))[0])


def ppt_min_eigenvalue_batch(rhos):
    r = np.asarray(rhos).reshape(-1, 2, 2, 2, 2).transpose(0, 1, 4, 3, 2).reshape(-1, 4, 4)
    return herm_eigvals(r)[:, 0]


def negativity(rho):
    """``-2 * min(0, lambda_min)`` of the partial transpose (two-qubit case)."""
    return -2.0 * min(0.0, ppt_min_eigenvalue(rho))


def concurrence_batch(rhos):
    rhos = np.asarray(rhos, dtype=complex).reshape(-1, 4, 4)
    sq = psd_sqrt(rhos)
    # The lambdas are the singular values of sqrt(rho) (Y(x)Y) conj(sqrt(rho)); taking
    # them directly avoids square-rooting round-off in near-zero eigenvalues.
    tau = sq @ _YY @ sq.conj()
    lam = np.linalg.svd(tau, compute_uv=False)
    return np.maximum(0.0, lam[:, 0] - lam[:, 1] - lam[:, 2] - lam[:, 3])


def concurrence(rho):
    """Wootters concurrence from the spin-flipped state spectrum."""
    rho = check_density_matrix(rho, dims=(4,))
    return float(min(1.0, concurrence_batch(rho)[0]))


def _binary_entropy(p):
    p = np.clip(p, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -p * np.log2(p) - (1 - p) * np.log2(1 - p)
    return np.nan_to_num(h, nan=0.0)


def eof_from_concurrence(c):
    c = np.clip(np.asarray(c, dtype=float), 0.0, 1.0)
    return _binary_entropy(0.5 * (1 + np.sqrt(1 - c * c)))


def entanglement_of_formation(rho):
    return float(eof_from_concurrence(concurrence(rho)))


# -- Bell fidelity with a photon-side rotation --------------------------------


def su2(theta, phi, lam):
    """``U3``-style parametrisation of single-qubit unitaries."""
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array(
        [[c, -np.exp(1j * lam) * s], [np.exp(1j * phi) * s, np.exp(1j * (phi + lam)) * c]],
        dtype=complex,
    )


def _su2_batch(angles):
    theta, phi, lam = angles[:, 0], angles[:, 1], angles[:, 2]
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    u = np.empty((len(angles), 2, 2), dtype=complex)
    u[:, 0, 0] = c
    u[:, 0, 1] = -np.exp(1j * lam) * s
    u[:, 1, 0] = np.exp(1j * phi) * s
    u[:, 1, 1] = np.exp(1j * (phi + lam)) * c
    return u


def _kron_i(u):
    out = np.zeros(u.shape[:-2] + (4, 4), dtype=complex)
    out[..., :2, :2] = u
    out[..., 2:, 2:] = u
    return out


def bell_fidelity_with(rho, u):
    """``<Phi+|(I (x) U) rho (I (x) U)^dagger|Phi+>`` for one photon unitary ``U``."""
    v = _kron_i(np.asarray(u).conj().T) @ _PHI
    return float(np.real(np.vdot(v, np.asarray(rho) @ v)))


def bell_fidelity_batch(rhos, u):
    v = _kron_i(np.asarray(u).conj().T) @ _PHI
    return np.real(np.einsum("i,nij,j->n", v.conj(), np.asarray(rhos), v))


def bell_fidelity_opt(rho, grid=16, n_starts=1, tol=1e-9, validate=True):
    """Maximise the Bell fidelity over photon-side unitaries.

    A coarse ``grid**3`` scan over the three Euler angles is followed by
    Nelder-Mead refinement from the best ``n_starts`` grid points. Returns
    ``(F, U)``.

    ``validate=False`` accepts any Hermitian operator, which is what the
    coherence-corrected pseudo-states need.
    """
    if validate:
        rho = check_density_matrix(rho, dims=(4,))
    else:
        rho = check_hermitian(np.asarray(rho, dtype=complex), tol=1e-9)
    theta = np.linspace(0, np.pi, grid)
    ang = np.linspace(0, 2 * np.pi, grid, endpoint=False)
    mesh = np.stack(np.meshgrid(theta, ang, ang, indexing="ij"), axis=-1).reshape(-1, 3)
    us = _su2_batch(mesh)
    vs = np.einsum("nij,j->ni", _kron_i(np.swapaxes(us.conj(), -1, -2)), _PHI)
    f_grid = np.real(np.einsum("ni,ij,nj->n", vs.conj(), rho, vs))
    order = np.argsort(f_grid)[::-1][: max(1, n_starts)]

    def neg(x):
        return -bell_fidelity_with(rho, su2(*x))

    best_f, best_x = -np.inf, None
    for idx in order:
        res = minimize(neg, mesh[idx], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": tol * 1e-2, "maxiter": 4000})
        if not res.success and res.nit >= 4000:
            raise NumericalError(f"Bell fidelity optimiser did not converge: {res.message}")
        if -res.fun > best_f:
            best_f, best_x = -res.fun, res.x
    best_f = max(best_f, float(f_grid[order[0]]))
    u = su2(*best_x)
    return float(best_f), u


# -- coherence correction -----------------------------------------------------


@dataclass(frozen=True)
class CoherenceSpec:
    """Incident electron state ``[[a, c], [conj(c), b]]``."""

    a: float
    b: float
    c: complex

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or abs(self.a + self.b - 1) > 1e-12:
            raise DataError(f"populations must be non-negative and sum to 1, got a={self.a}, b={self.b}")
        if abs(self.c) > np.sqrt(self.a * self.b) + 1e-12:
            raise DataError(f"|c|={abs(self.c)} exceeds sqrt(ab)")

    @property
    def gamma(self):
        ab = np.sqrt(self.a * self.b)
        return float(abs(self.c) / ab) if ab > 0 else 0.0

    @classmethod
    def from_gamma(cls, a, gamma, phase=0.0):
        b = 1.0 - a
        return cls(a, b, gamma * np.sqrt(a * b) * np.exp(1j * phase))


@dataclass(frozen=True)
class LocalChannelSpec:
    """Photon states emitted for pure ``|L>`` (rho0) and ``|R>`` (rho1) inputs."""

    rho0: np.ndarray
    rho1: np.ndarray

    def __post_init__(self):
        check_density_matrix(self.rho0, dims=(2,))
        check_density_matrix(self.rho1, dims=(2,))


_P0 = np.diag([1.0, 0.0]).astype(complex)
_P1 = np.diag([0.0, 1.0]).astype(complex)


def coherence_correct(measured, spec, channel, observable):
    """Map an expectation value measured with a partially coherent electron to
    the value for a fully coherent one with the same beam populations.

    Population terms ``a tr(O (|0><0| (x) rho0))`` and ``b tr(O (|1><1| (x) rho1))``
    are removed, the remaining coherent part is scaled by ``c'/c`` with
    ``|c'| = sqrt(ab)``, and the population terms are added back. ``c'`` keeps
    the phase of ``c`` so that real observables stay real.
    """
    if spec.c == 0:
        raise DataError("input coherence c is zero; the correction is undefined")
    obs = check_hermitian(np.asarray(observable, dtype=complex), tol=1e-10, name="observable")
    if obs.shape != (4, 4):
        raise DataError(f"observable must be 4x4, got {obs.shape}")
    pop0 = np.real(np.trace(obs @ np.kron(_P0, channel.rho0)))
    pop1 = np.real(np.trace(obs @ np.kron(_P1, channel.rho1)))
    a_new, b_new = spec.a, spec.b
    c_new = np.sqrt(spec.a * spec.b) * spec.c / abs(spec.c)
    ratio = c_new / spec.c
    out = (measured - spec.a * pop0 - spec.b * pop1) * ratio + a_new * pop0 + b_new * pop1
    return float(np.real(out))


def channel_from_state(rho):
    """Beam populations and conditional photon states of a joint state."""
    rho = np.asarray(rho, dtype=complex)
    blk = rho.reshape(2, 2, 2, 2)
    b_ll = blk[0, :, 0, :]
    b_rr = blk[1, :, 1, :]
    a = float(np.real(np.trace(b_ll)))
    b = float(np.real(np.trace(b_rr)))
    if a <= 0 or b <= 0:
        raise DataError("state has an empty electron beam")
    return a, b, LocalChannelSpec(b_ll / a, b_rr / b)


def coherence_correct_state(rho, gamma):
    """Pseudo-state whose expectations are the coherence-corrected ones.

    Scaling the electron off-diagonal blocks by ``1/gamma`` is the linear map
    that :func:`coherence_correct` applies to every observable when
    ``|c| = gamma sqrt(ab)``.
    """
    if gamma <= 0:
        raise DataError("gamma must be positive")
    rho = np.array(rho, dtype=complex, copy=True)
    rho[..., :2, 2:] /= gamma
    rho[..., 2:, :2] /= gamma
    return rho


def dephase_electron(rho, gamma):
    """Damp the electron coherence of a joint state by ``gamma``."""
    rho = np.array(rho, dtype=complex, copy=True)
    rho[..., :2, 2:] *= gamma
    rho[..., 2:, :2] *= gamma
    return rho
