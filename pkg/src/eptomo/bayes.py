"""Bayesian tomography of the joint 4x4 state by Metropolis-Hastings with
preconditioned Crank-Nicolson (pCN) proposals.

A state is parametrised by a real vector ``m`` of length 32 holding the real
and imaginary parts of a complex 4x4 matrix ``M``; ``rho = M M^dagger / tr``.
The default reference measure on ``m`` is the standard normal, which maps to
the Hilbert-Schmidt (flat) measure on density matrices.
"""

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from eptomo.diagnostics import effective_sample_size, gelman_rubin
from eptomo.exceptions import DataError

logger = logging.getLogger(__name__)

N_PARAMS = 32
PROB_FLOOR = 1e-300
FUNCTIONALS = ("matrix_mean", "min_pt_eig", "bell_fidelity", "concurrence", "eof")


def params_to_matrix(m):
    m = np.asarray(m, dtype=float)
    return (m[..., :16] + 1j * m[..., 16:]).reshape(m.shape[:-1] + (4, 4))


def matrix_to_params(M):
    M = np.asarray(M, dtype=complex).reshape(M.shape[:-2] + (16,))
    return np.concatenate([M.real, M.imag], axis=-1)


def rho_from_params(m):
    """``M M^dagger / tr(M M^dagger)``; works on stacks of parameter vectors."""
    m = np.asarray(m, dtype=float)
    if m.shape[-1] != N_PARAMS:
        raise DataError(f"parameter vectors must have length {N_PARAMS}, got {m.shape[-1]}")
    norm2 = np.sum(m * m, axis=-1)
    if np.any(norm2 == 0):
        raise DataError("zero parameter vector does not define a state")
    M = params_to_matrix(m)
    rho = M @ np.swapaxes(M.conj(), -1, -2)
    return rho / norm2[..., None, None]


def params_from_rho(rho):
    """A parameter vector with ``rho_from_params(m) == rho`` (Hermitian square root)."""
    from eptomo.qmat import psd_sqrt

    return matrix_to_params(psd_sqrt(rho))


class RecordSet:
    """Count records flattened into arrays for fast likelihood evaluation."""

    def __init__(self, records):
        records = list(records)
        if not records:
            raise DataError("no count records")
        ops = np.stack([np.asarray(r.effect.op, dtype=complex) for r in records])
        if ops.shape[1:] != (4, 4):
            raise DataError(f"likelihood needs 4x4 effects, got {ops.shape[1:]}")
        self.records = records
        self.ops = ops
        self.counts = np.array([r.count for r in records], dtype=float)
        self.group_ids, self.gidx = np.unique([r.effect.group_id for r in records], return_inverse=True)
        self.n_groups = len(self.group_ids)
        gops = np.zeros((self.n_groups, 4, 4), dtype=complex)
        np.add.at(gops, self.gidx, ops)
        self.gops = gops
        self.gcounts = np.bincount(self.gidx, weights=self.counts, minlength=self.n_groups)
        # tr(E rho) = sum_ij E_ij rho_ji = flat(E) . flat(rho^T)
        pos = self.counts > 0
        self._a = ops[pos].reshape(-1, 16)
        self._n = self.counts[pos]
        gpos = self.gcounts > 0
        self._g = gops[gpos].reshape(-1, 16)
        self._gn = self.gcounts[gpos]

    def probabilities(self, rho):
        """Group-normalised outcome probabilities of every record."""
        p = np.real(np.einsum("nij,ji->n", self.ops, rho))
        gsum = np.real(np.einsum("gij,ji->g", self.gops, rho))
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(gsum[self.gidx] > 0, p / gsum[self.gidx], 0.0)

    def log_likelihood(self, rho):
        rt = np.asarray(rho).T.ravel()
        p = np.real(self._a @ rt)
        g = np.real(self._g @ rt)
        if np.any(p <= 0) or np.any(g <= 0):
            return -np.inf
        return float(self._n @ np.log(np.maximum(p, PROB_FLOOR)) - self._gn @ np.log(np.maximum(g, PROB_FLOOR)))


def log_likelihood(rho, records):
    """``sum_j N_j log p_j`` with ``p_j = tr(xi_j rho)`` renormalised within each group."""
    rho = np.asarray(rho, dtype=complex)
    rs = records if isinstance(records, RecordSet) else RecordSet(records)
    if rho.shape != (4, 4):
        raise DataError(f"rho must be 4x4, got {rho.shape}")
    return rs.log_likelihood(rho)


def log_prior(m, prior="gaussian"):
    if prior == "gaussian":
        return -0.5 * float(np.dot(m, m))
    if prior == "flat":
        return 0.0
    raise DataError(f"unknown prior {prior!r}")


def pcn_log_q(m_to, m_from, beta):
    """Log density (up to a constant shared by all pairs) of proposing ``m_to`` from ``m_from``."""
    s = np.sqrt(1.0 - beta * beta)
    d = m_to - s * m_from
    return -float(np.dot(d, d)) / (2.0 * beta * beta)


def log_acceptance_ratio(m, m_new, log_post, log_post_new, beta):
    """``log[pi(m') q(m|m') / (pi(m) q(m'|m))]``, both q densities evaluated directly."""
    return (log_post_new - log_post) + pcn_log_q(m, m_new, beta) - pcn_log_q(m_new, m, beta)


@dataclass(frozen=True)
class ChainState:
    m: np.ndarray
    log_post: float


class LogPosterior:
    """Callable ``m -> log likelihood + log prior``."""

    def __init__(self, records, prior="gaussian"):
        self.records = records if isinstance(records, RecordSet) else RecordSet(records)
        log_prior(np.zeros(1), prior)
        self.prior = prior

    def __call__(self, m):
        norm2 = float(np.dot(m, m))
        if norm2 == 0:
            return -np.inf
        M = (m[:16] + 1j * m[16:]).reshape(4, 4)
        rho = (M @ M.conj().T) / norm2
        ll = self.records.log_likelihood(rho)
        return ll + log_prior(m, self.prior)


def pcn_step(state, beta, rng, log_target):
    """One Metropolis-Hastings transition with a pCN proposal.

    Returns ``(new_state, accepted)``; a rejected proposal leaves the state unchanged.
    """
    if not 0 < beta <= 1:
        raise DataError(f"beta must lie in (0, 1], got {beta}")
    m = state.m
    m_new = np.sqrt(1.0 - beta * beta) * m + beta * rng.standard_normal(m.shape)
    lp_new = log_target(m_new)
    log_alpha = log_acceptance_ratio(m, m_new, state.log_post, lp_new, beta)
    if np.isfinite(lp_new) and np.log(rng.uniform()) < log_alpha:
        return ChainState(m_new, lp_new), True
    return state, False


@dataclass
class ChainConfig:
    n_chains: int = 6
    n_iter: int = 1_000_000
    burn_in_fraction: float = 0.10
    beta: float = 0.1
    adapt_target: float = 0.234
    seed: int = 0
    thinning: int = 10
    adapt_interval: int = 100
    adapt_rate: float = 1.0
    prior: str = "gaussian"

    def __post_init__(self):
        if self.n_chains < 1 or self.n_iter < 1:
            raise DataError("n_chains and n_iter must be positive")
        if not 0 <= self.burn_in_fraction < 1:
            raise DataError(f"burn_in_fraction must lie in [0, 1), got {self.burn_in_fraction}")
        if not 0 < self.beta <= 1:
            raise DataError(f"beta must lie in (0, 1], got {self.beta}")
        if self.thinning < 1 or self.adapt_interval < 1:
            raise DataError("thinning and adapt_interval must be positive")
        if self.prior not in ("gaussian", "flat"):
            raise DataError(f"unknown prior {self.prior!r}")

    @property
    def n_burn(self):
        return int(round(self.n_iter * self.burn_in_fraction))

    def to_dict(self):
        return asdict(self)


@dataclass
class PosteriorSamples:
    """Thinned post-burn-in parameter vectors plus per-chain traces.

    ``params`` has shape ``(n_chains, n_kept, 32)`` and ``iterations`` gives
    the chain iteration of each kept sample. The ``trace_*`` arrays cover the
    whole chain (burn-in included) at the thinning stride.

    ``log_post_trace`` is the log posterior of the state, i.e. the
    log-likelihood of ``rho`` under the uniform state prior (up to a
    constant). With the Gaussian reference it leaves out the ``-|m|^2/2``
    term, which only concerns the scale of ``m`` and not ``rho``.
    """

    params: np.ndarray
    iterations: np.ndarray
    trace_iterations: np.ndarray
    log_post_trace: np.ndarray
    acceptance_trace: np.ndarray
    beta_trace: np.ndarray
    acceptance_rate: np.ndarray
    beta: np.ndarray
    config: ChainConfig
    warnings: list = field(default_factory=list)

    @property
    def n_chains(self):
        return self.params.shape[0]

    @property
    def n_samples(self):
        return self.params.shape[0] * self.params.shape[1]

    def rhos(self):
        return rho_from_params(self.params)

    def post_burn_log_post(self):
        keep = self.trace_iterations >= self.config.n_burn
        return self.log_post_trace[:, keep]


def _chain_seed_sequences(seed, n_chains):
    return np.random.SeedSequence(seed).spawn(n_chains)


def _run_one_chain(args):
    records, cfg, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    target = LogPosterior(records, cfg.prior)
    rs = target.records
    a_mat, n_vec, g_mat, gn_vec = rs._a, rs._n, rs._g, rs._gn
    gaussian = cfg.prior == "gaussian"

    n_iter, n_burn, thin = cfg.n_iter, cfg.n_burn, cfg.thinning
    n_keep = (n_iter - n_burn) // thin
    params = np.empty((n_keep, N_PARAMS))
    iters = np.empty(n_keep, dtype=np.int64)
    n_trace = n_iter // thin
    lp_trace = np.empty(n_trace)
    acc_trace = np.empty(n_trace)
    beta_trace = np.empty(n_trace)

    m = rng.standard_normal(N_PARAMS)
    lp = target(m)
    while not np.isfinite(lp):
        m = rng.standard_normal(N_PARAMS)
        lp = target(m)
    ll = lp + 0.5 * (m @ m) if gaussian else lp
    log_betas = []
    beta = cfg.beta
    accepted_total = 0
    accepted_post = 0
    window_acc = 0
    last_window_rates = []
    block = 4096
    k_keep = 0
    k_trace = 0
    i = 0
    while i < n_iter:
        nb = min(block, n_iter - i)
        noise = rng.standard_normal((nb, N_PARAMS))
        logu = np.log(rng.uniform(size=nb))
        for b in range(nb):
            s = np.sqrt(1.0 - beta * beta)
            m_new = s * m + beta * noise[b]
            nrm2 = m_new @ m_new
            M = (m_new[:16] + 1j * m_new[16:]).reshape(4, 4)
            rt = (M @ M.conj().T).T.ravel() / nrm2
            p = (a_mat @ rt).real
            g = (g_mat @ rt).real
            if p.min() > 0 and g.min() > 0:
                ll_new = n_vec @ np.log(np.maximum(p, PROB_FLOOR)) - gn_vec @ np.log(np.maximum(g, PROB_FLOOR))
                lp_new = ll_new - 0.5 * nrm2 if gaussian else ll_new
                d_fwd = m_new - s * m
                d_rev = m - s * m_new
                log_alpha = lp_new - lp + ((d_fwd @ d_fwd) - (d_rev @ d_rev)) / (2.0 * beta * beta)
                if logu[b] < log_alpha:
                    m, lp, ll = m_new, lp_new, ll_new
                    accepted_total += 1
                    window_acc += 1
                    if i >= n_burn:
                        accepted_post += 1
            i += 1
            if i <= n_burn and i % cfg.adapt_interval == 0:
                rate = window_acc / cfg.adapt_interval
                last_window_rates.append(rate)
                beta = float(min(1.0, beta * np.exp(cfg.adapt_rate * (rate - cfg.adapt_target))))
                log_betas.append(np.log(beta))
                window_acc = 0
                if i + cfg.adapt_interval > n_burn:
                    # freeze at the geometric mean over the second half of burn-in,
                    # which averages out the window-to-window noise of the updates
                    beta = float(np.exp(np.mean(log_betas[len(log_betas) // 2 :])))
            elif i > n_burn:
                window_acc = 0
            if i % thin == 0:
                if k_trace < n_trace:
                    lp_trace[k_trace] = ll
                    acc_trace[k_trace] = accepted_total / i
                    beta_trace[k_trace] = beta
                    k_trace += 1
                if i > n_burn and k_keep < n_keep and (i - n_burn) % thin == 0:
                    params[k_keep] = m
                    iters[k_keep] = i
                    k_keep += 1
    warn = None
    if last_window_rates:
        tail = last_window_rates[-max(1, len(last_window_rates) // 10):]
        end_rate = float(np.mean(tail)) if tail else float("nan")
        if not 0.05 <= end_rate <= 0.60:
            warn = f"acceptance {end_rate:.3f} outside [0.05, 0.60] at end of burn-in (beta={beta:.4g})"
    post_rate = accepted_post / max(1, n_iter - n_burn)
    return params, iters, lp_trace, acc_trace, beta_trace, post_rate, beta, warn


def run_chains(config, records, n_jobs=1):
    """Run ``config.n_chains`` independent pCN chains.

    Each chain draws from its own stream spawned from ``config.seed``; results
    do not depend on ``n_jobs`` or execution order. The step size is adapted
    towards ``config.adapt_target`` during burn-in only and frozen afterwards.
    """
    rs = records if isinstance(records, RecordSet) else RecordSet(records)
    seeds = _chain_seed_sequences(config.seed, config.n_chains)
    jobs = [(rs.records, config, s) for s in seeds]
    if n_jobs is not None and n_jobs > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_run_one_chain, jobs))
    else:
        results = [_run_one_chain((rs, config, s)) for s in seeds]
    params, iters, lp, acc, bt, post_rate, beta, warns = zip(*results)
    msgs = [f"chain {c}: {w}" for c, w in enumerate(warns) if w]
    for msg in msgs:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    n_trace = config.n_iter // config.thinning
    return PosteriorSamples(
        params=np.stack(params),
        iterations=iters[0],
        trace_iterations=(np.arange(n_trace) + 1) * config.thinning,
        log_post_trace=np.stack(lp),
        acceptance_trace=np.stack(acc),
        beta_trace=np.stack(bt),
        acceptance_rate=np.array(post_rate),
        beta=np.array(beta),
        config=config,
        warnings=msgs,
    )


# -- posterior functionals ----------------------------------------------------


@dataclass
class Summary:
    functional: str
    mean: object
    sd: object
    hist_counts: np.ndarray = None
    hist_edges: np.ndarray = None
    values: np.ndarray = None
    per_chain: np.ndarray = None
    extra: dict = field(default_factory=dict)

    @property
    def violation_sigma(self):
        """``|mean| / SD``, the number of standard deviations from zero."""
        return float(abs(self.mean) / self.sd) if self.sd > 0 else float("inf")


def evaluate_functional(rhos, functional, photon_unitary=None):
    """Evaluate a scalar functional on a stack of density matrices."""
    from eptomo import entangle

    rhos = np.asarray(rhos)
    flat = rhos.reshape(-1, 4, 4)
    if functional == "min_pt_eig":
        out = entangle.ppt_min_eigenvalue_batch(flat)
    elif functional == "concurrence":
        out = entangle.concurrence_batch(flat)
    elif functional == "eof":
        out = entangle.eof_from_concurrence(entangle.concurrence_batch(flat))
    elif functional == "bell_fidelity":
        if photon_unitary is None:
            raise DataError("bell_fidelity needs a photon unitary")
        out = entangle.bell_fidelity_batch(flat, photon_unitary)
    else:
        raise DataError(f"unknown functional {functional!r}")
    return out.reshape(rhos.shape[:-2])


def posterior_summary(samples, functional, bins=50, photon_unitary=None, rhos=None):
    """Mean, standard deviation and histogram of a posterior functional.

    ``samples`` is a :class:`PosteriorSamples` or an array of density
    matrices shaped ``(n_chains, n_samples, 4, 4)``. For ``bell_fidelity``
    the photon unitary defaults to the one that maximises the fidelity of the
    posterior-mean state.
    """
    from eptomo import entangle

    if rhos is None:
        rhos = samples.rhos() if isinstance(samples, PosteriorSamples) else np.asarray(samples)
    if rhos.ndim == 3:
        rhos = rhos[None]
    if rhos.size == 0 or rhos.shape[1] == 0:
        raise DataError("no posterior samples")
    if functional == "matrix_mean":
        flat = rhos.reshape(-1, 4, 4)
        mean = flat.mean(axis=0)
        sd = flat.real.std(axis=0) + 1j * flat.imag.std(axis=0)
        return Summary(functional, mean, sd)
    extra = {}
    if functional == "bell_fidelity" and photon_unitary is None:
        _, photon_unitary = entangle.bell_fidelity_opt(rhos.reshape(-1, 4, 4).mean(axis=0))
    if functional == "bell_fidelity":
        extra["photon_unitary"] = photon_unitary
    vals = evaluate_functional(rhos, functional, photon_unitary)
    flat = vals.ravel()
    counts, edges = np.histogram(flat, bins=bins)
    if vals.shape[0] >= 2 and vals.shape[1] >= 10:
        extra["rhat"] = gelman_rubin(vals)
    extra["ess"] = float(sum(effective_sample_size(v) for v in vals))
    return Summary(functional, float(flat.mean()), float(flat.std()), counts, edges, flat, vals, extra)


# -- text formats -------------------------------------------------------------


def write_samples(path, samples, header=""):
    """One line per kept sample: 32 parameters, chain id, iteration index."""
    with open(path, "w") as fh:
        fh.write(header)
        for c in range(samples.n_chains):
            for m, it in zip(samples.params[c], samples.iterations):
                fh.write(" ".join(f"{x:.17g}" for x in m) + f" {c} {int(it)}\n")


def read_samples(path):
    """Inverse of :func:`write_samples`; returns ``(params, iterations)``."""
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.shape[1] != N_PARAMS + 2:
        raise DataError(f"{path}: expected {N_PARAMS + 2} columns, found {data.shape[1]}")
    chains = data[:, N_PARAMS].astype(int)
    n_chains = chains.max() + 1
    per = [data[chains == c] for c in range(n_chains)]
    lens = {len(p) for p in per}
    if len(lens) != 1:
        raise DataError(f"{path}: chains have unequal lengths {sorted(lens)}")
    params = np.stack([p[:, :N_PARAMS] for p in per])
    iterations = per[0][:, N_PARAMS + 1].astype(np.int64)
    return params, iterations


def write_trace(path, samples, header=""):
    with open(path, "w") as fh:
        fh.write(header)
        fh.write("chain,iteration,log_post,acceptance,beta\n")
        for c in range(samples.n_chains):
            for j, it in enumerate(samples.trace_iterations):
                fh.write(
                    f"{c},{int(it)},{samples.log_post_trace[c, j]:.17g},"
                    f"{samples.acceptance_trace[c, j]:.17g},{samples.beta_trace[c, j]:.17g}\n"
                )


def read_trace(path):
    with open(path) as fh:
        rows = [ln.split(",") for ln in fh if ln.strip() and not ln.startswith("#") and not ln.startswith("chain")]
    if not rows:
        raise DataError(f"{path}: empty trace file")
    try:
        arr = np.array(rows, dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: malformed trace: {exc}") from exc
    chains = arr[:, 0].astype(int)
    n = chains.max() + 1
    iters = arr[chains == 0, 1].astype(np.int64)
    cols = [np.stack([arr[chains == c, k] for c in range(n)]) for k in (2, 3, 4)]
    return iters, cols[0], cols[1], cols[2]


# -- estimator ----------------------------------------------------------------


class BayesianStateTomography(BaseEstimator):
    """Posterior sampling of the joint electron-photon state.

    Parameters mirror :class:`ChainConfig`. ``fit`` takes a list of
    :class:`~eptomo.polopt.CountRecord` objects with 4x4 effects.

    Attributes
    ----------
    samples_ : PosteriorSamples
    mean_rho_ : ndarray of shape (4, 4)
        Posterior-mean density matrix.
    acceptance_rate_ : ndarray
        Post-burn-in acceptance rate of each chain.
    """

    def __init__(
        self,
        n_chains=6,
        n_iter=1_000_000,
        burn_in_fraction=0.10,
        beta=0.1,
        adapt_target=0.234,
        seed=0,
        thinning=10,
        adapt_interval=100,
        adapt_rate=1.0,
        prior="gaussian",
        n_jobs=1,
    ):
        self.n_chains = n_chains
        self.n_iter = n_iter
        self.burn_in_fraction = burn_in_fraction
        self.beta = beta
        self.adapt_target = adapt_target
        self.seed = seed
        self.thinning = thinning
        self.adapt_interval = adapt_interval
        self.adapt_rate = adapt_rate
        self.prior = prior
        self.n_jobs = n_jobs

    def _config(self):
        params = self.get_params()
        params.pop("n_jobs")
        return ChainConfig(**params)

    def fit(self, X, y=None):
        self.records_ = RecordSet(X)
        self.samples_ = run_chains(self._config(), self.records_, n_jobs=self.n_jobs)
        self.rhos_ = self.samples_.rhos()
        self.mean_rho_ = self.rhos_.reshape(-1, 4, 4).mean(axis=0)
        self.acceptance_rate_ = self.samples_.acceptance_rate
        return self

    def summary(self, functional, **kwargs):
        return posterior_summary(self.samples_, functional, rhos=self.rhos_, **kwargs)

    def predict_proba(self, X):
        """Posterior-mean outcome probabilities for the given records."""
        return RecordSet(X).probabilities(self.mean_rho_)

    def score(self, X, y=None):
        """Log-likelihood of ``X`` under the posterior-mean state."""
        return log_likelihood(self.mean_rho_, X)

