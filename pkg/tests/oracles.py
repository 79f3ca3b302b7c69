"""Reference implementations used as test oracles.

Nothing here imports the package under test.
"""
import math

import numpy as np


def kalman_random_walk(n_steps, q, obs, r, m0=0.0, p0=0.0):
    """Scalar Kalman filter for ``x_{j+1} = x_j + e_j``, ``e_j ~ N(0, q)``.

    ``obs`` maps step index to an observed value with noise variance ``r``.
    Returns predicted and filtered (mean, var) arrays of length ``n_steps + 1``.
    """
    mp = np.zeros(n_steps + 1)
    pp = np.zeros(n_steps + 1)
    mf = np.zeros(n_steps + 1)
    pf = np.zeros(n_steps + 1)
    m, p = m0, p0
    for j in range(n_steps + 1):
        if j > 0:
            p = p + q
        mp[j], pp[j] = m, p
        if j in obs:
            k = p / (p + r)
            m = m + k * (obs[j] - m)
            p = (1 - k) * p
        mf[j], pf[j] = m, p
    return mp, pp, mf, pf


def rts_random_walk(n_steps, q, obs, r, m0=0.0, p0=0.0):
    """Rauch-Tung-Striebel smoother for the same model; returns (mean, var)."""
    mp, pp, mf, pf = kalman_random_walk(n_steps, q, obs, r, m0, p0)
    ms = mf.copy()
    ps = pf.copy()
    for j in range(n_steps - 1, -1, -1):
        if pp[j + 1] == 0.0:
            continue
        c = pf[j] / pp[j + 1]
        ms[j] = mf[j] + c * (ms[j + 1] - mp[j + 1])
        ps[j] = pf[j] + c * c * (ps[j + 1] - pp[j + 1])
    return ms, ps


def gaussian_logpdf(x, mean, var):
    return -0.5 * math.log(2 * math.pi * var) - 0.5 * (x - mean) ** 2 / var


def batch_means_se(samples, n_batches=20):
    """Standard error of the mean of a correlated series via non-overlapping batch means."""
    x = np.asarray(samples, dtype=float)
    b = len(x) // n_batches
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))
