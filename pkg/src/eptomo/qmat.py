"""Complex matrix and quantum-state primitives.

Matrices are plain ``numpy`` complex arrays. Two-qubit operators use the
electron-first ordering ``|L,H>, |L,V>, |R,H>, |R,V>`` documented at package
level; the Kronecker product in :func:`tensor` is the single place that fixes
it.
"""

import numpy as np

from eptomo._validation import check_density_matrix, check_hermitian, check_matrix, check_pure_state
from eptomo.exceptions import DataError, NumericalError

JACOBI_TOL = 1e-13
JACOBI_MAX_SWEEPS = 100

PAULI_I = np.eye(2, dtype=complex)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def tensor(a, b):
    """Kronecker product ``a (x) b``; ``a`` indexes the slow axis."""
    a = check_matrix(a, "first factor")
    b = check_matrix(b, "second factor")
    return np.kron(a, b)


def bell_state():
    """``(|L,H> + |R,V>)/sqrt(2)`` as a length-4 vector."""
    return np.array([1, 0, 0, 1], dtype=complex) / np.sqrt(2)


def werner_state(p):
    """``p |Phi+><Phi+| + (1 - p) I/4``."""
    phi = bell_state()
    return p * np.outer(phi, phi.conj()) + (1 - p) * np.eye(4) / 4


def projector(psi):
    psi = np.asarray(psi, dtype=complex).ravel()
    return np.outer(psi, psi.conj())


def partial_transpose(rho, subsystem="second"):
    """Transpose one tensor factor of a 4x4 operator.

    ``subsystem`` is ``"first"`` (electron) or ``"second"`` (photon).
    """
    rho = check_matrix(rho, "rho")
    if rho.shape != (4, 4):
        raise DataError(f"partial transpose needs a 4x4 operator, got {rho.shape}")
    r = rho.reshape(2, 2, 2, 2)  # (i, k, j, l) for rho[2i+k, 2j+l]
    if subsystem == "first":
        out = r.transpose(2, 1, 0, 3)
    elif subsystem == "second":
        out = r.transpose(0, 3, 2, 1)
    else:
        raise DataError(f"subsystem must be 'first' or 'second', got {subsystem!r}")
    return out.reshape(4, 4)


def partial_trace(rho, keep="second"):
    """Reduced 2x2 state of one factor of a 4x4 operator."""
    r = np.asarray(rho, dtype=complex).reshape(2, 2, 2, 2)
    if keep == "second":
        return np.einsum("ikil->kl", r)
    if keep == "first":
        return np.einsum("ikjk->ij", r)
    raise DataError(f"keep must be 'first' or 'second', got {keep!r}")


def _eig2(h):
    a = h[..., 0, 0].real
    d = h[..., 1, 1].real
    b = h[..., 0, 1]
    half_tr = 0.5 * (a + d)
    disc = np.sqrt(0.25 * (a - d) ** 2 + np.abs(b) ** 2)
    return np.stack([half_tr - disc, half_tr + disc], axis=-1)


def _jacobi(h, want_vectors):
    """Cyclic complex Jacobi on a stack of Hermitian matrices.

    Each rotation is applied to the whole stack at once; matrices that have
    already converged see identity rotations.
    """
    a = np.array(h, dtype=complex, copy=True)
    n = a.shape[-1]
    batch = a.shape[:-2]
    a = a.reshape((-1, n, n))
    v = np.broadcast_to(np.eye(n, dtype=complex), a.shape).copy() if want_vectors else None
    scale = np.maximum(np.sqrt(np.sum(np.abs(a) ** 2, axis=(1, 2))), np.finfo(float).tiny)
    offmask = ~np.eye(n, dtype=bool)
    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(np.sum(np.abs(a[:, offmask]) ** 2, axis=1))
        if np.all(off <= JACOBI_TOL * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                b = a[:, p, q]
                r = np.abs(b)
                active = r > 0.1 * JACOBI_TOL * scale / n
                if not np.any(active):
                    continue
                ph = np.where(active, np.exp(-1j * np.angle(b)), 1.0)
                x = a[:, p, p].real
                z = a[:, q, q].real
                theta = np.where(active, 0.5 * np.arctan2(2 * r, z - x), 0.0)
                c = np.cos(theta)
                s = np.sin(theta)
                # J = diag(1, ph) @ [[c, s], [-s, c]] in the (p, q) plane
                jpp, jpq, jqp, jqq = c, s, -s * ph, c * ph
                cp = a[:, :, p].copy()
                cq = a[:, :, q]
                a[:, :, p] = cp * jpp[:, None] + cq * jqp[:, None]
                a[:, :, q] = cp * jpq[:, None] + cq * jqq[:, None]
                rp = a[:, p, :].copy()
                rq = a[:, q, :]
                a[:, p, :] = rp * jpp.conj()[:, None] + rq * jqp.conj()[:, None]
                a[:, q, :] = rp * jpq.conj()[:, None] + rq * jqq.conj()[:, None]
                a[:, p, q] = 0.0
                a[:, q, p] = 0.0
                if want_vectors:
                    vp = v[:, :, p].copy()
                    vq = v[:, :, q]
                    v[:, :, p] = vp * jpp[:, None] + vq * jqp[:, None]
                    v[:, :, q] = vp * jpq[:, None] + vq * jqq[:, None]
    else:
        off = np.sqrt(np.sum(np.abs(a[:, offmask]) ** 2, axis=1))
        if np.any(off > JACOBI_TOL * scale * 1e3):
            raise NumericalError("Jacobi eigensolver did not converge")
    w = np.diagonal(a, axis1=1, axis2=2).real
    order = np.argsort(w, axis=1)
    w = np.take_along_axis(w, order, axis=1).reshape(batch + (n,))
    if not want_vectors:
        return w, None
    v = np.take_along_axis(v, order[:, None, :], axis=2).reshape(batch + (n, n))
    return w, v


def herm_eigvals(h):
    """Ascending real eigenvalues of a Hermitian matrix (or a stack of them).

    2x2 matrices use the closed form; larger ones use cyclic Jacobi sweeps,
    which keeps results reproducible across BLAS builds.
    """
    h = check_hermitian(h, name="h")
    if h.shape[-1] == 2:
        return _eig2(h)
    w, _ = _jacobi(h, want_vectors=False)
    return w


def herm_eigh(h):
    """Eigenvalues (ascending) and unitary eigenvectors (as columns)."""
    h = check_hermitian(h, name="h")
    return _jacobi(h, want_vectors=True)


def psd_sqrt(rho):
    """Principal square root of a positive semidefinite Hermitian matrix."""
    w, v = herm_eigh(rho)
    w = np.sqrt(np.clip(w, 0.0, None))
    return (v * w[..., None, :]) @ np.swapaxes(v.conj(), -1, -2)


def state_fidelity(rho, psi):
    """Overlap ``<psi|rho|psi>`` of a density matrix with a pure state."""
    rho = check_density_matrix(rho)
    psi = check_pure_state(psi)
    if psi.shape[0] != rho.shape[0]:
        raise DataError(f"dimension mismatch: rho is {rho.shape[0]}, psi is {psi.shape[0]}")
    f = np.vdot(psi, rho @ psi).real
    return float(min(1.0, max(0.0, f)))


def random_density_matrix(dim, rng, rank=None):
    """Hilbert-Schmidt random state (Ginibre construction)."""
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_unitary(dim, rng):
    """Haar-random unitary from a QR decomposition."""
    z = (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def format_density_matrix(rho):
    """Structured text: dimension line, then one ``re im`` pair per entry."""
    rho = check_density_matrix(rho)
    lines = [str(rho.shape[0])]
    lines += [f"{z.real:.17g} {z.imag:.17g}" for z in rho.ravel()]
    return "\n".join(lines) + "\n"


def parse_density_matrix(text):
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise DataError("empty density matrix text")
    try:
        dim = int(rows[0][0])
        vals = [complex(float(r[0]), float(r[1])) for r in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed density matrix text: {exc}") from exc
    if len(vals) != dim * dim:
        raise DataError(f"expected {dim * dim} entries, found {len(vals)}")
    return check_density_matrix(np.array(vals).reshape(dim, dim))


def save_density_matrix(path, rho, header=""):
    with open(path, "w") as fh:
        fh.write(header)
        fh.write(format_density_matrix(rho))


def load_density_matrix(path):
    with open(path) as fh:
        return parse_density_matrix(fh.read())
