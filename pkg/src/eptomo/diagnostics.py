"""Convergence diagnostics for MCMC output."""

import numpy as np

from eptomo.exceptions import DataError


def gelman_rubin(chains):
    """Potential scale reduction factor R-hat of ``m`` chains of length ``n``.

    Uses the between/within variance decomposition without chain
    splitting::

        W = mean of within-chain variances
        B = n * variance of chain means
        V = (n - 1)/n W + B/n
        R = sqrt(V / ((n - 1)/n W)) = sqrt(1 + B / ((n - 1) W))

    The denominator is the within-chain variance on the same ``1/n`` footing
    as the pooled estimate ``V``, so identical chains give exactly 1 and
    R is never below 1.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("gelman_rubin needs at least 2 chains")
    m, n = x.shape
    if n < 10:
        raise DataError(f"chains must have at least 10 samples, got {n}")
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    v = (n - 1) / n * w + b / n
    return float(np.sqrt(v / ((n - 1) / n * w)))


def gelman_rubin_evolution(chains, n_points=50, burn_in_fraction=0.0, min_length=10):
    """R-hat as a function of chain length (burn-in dropped at each length)."""
    x = np.asarray(chains, dtype=float)
    n = x.shape[1]
    lengths = np.unique(np.linspace(min_length, n, n_points).astype(int))
    out = []
    for length in lengths:
        start = int(length * burn_in_fraction)
        seg = x[:, start:length]
        if seg.shape[1] < min_length:
            continue
        out.append((int(length), gelman_rubin(seg)))
    return np.array(out)


def autocorrelation(series, max_lag):
    """Normalised autocovariance ``r(0..max_lag)``, with ``r(0) = 1``.

    Computed through an FFT of the zero-padded, mean-removed series with the
    biased (``1/n``) estimator.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if max_lag < 0 or n <= max_lag:
        raise DataError(f"series of length {n} is too short for max_lag={max_lag}")
    x = x - x.mean()
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1]
    if acov[0] == 0:
        out = np.zeros(max_lag + 1)
        out[0] = 1.0
        return out
    return acov / acov[0]


def integrated_autocorr_time(series, c=5.0):
    """Sokal's windowed estimate of the integrated autocorrelation time."""
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 4 or np.all(x == x[0]):
        return 1.0
    rho = autocorrelation(x, x.size - 1)
    taus = 2.0 * np.cumsum(rho) - 1.0
    window = np.arange(taus.size)
    ok = window >= c * taus
    idx = int(np.argmax(ok)) if np.any(ok) else taus.size - 1
    return float(max(taus[idx], 1.0))


def effective_sample_size(series):
    x = np.asarray(series, dtype=float).ravel()
    return x.size / integrated_autocorr_time(x)
