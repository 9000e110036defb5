"""Independent reference computations used by the tests."""
import math

import numpy as np
from scipy.stats import multivariate_normal


def random_spd(d, rng, jitter=0.1):
    q = rng.standard_normal((d, d))
    m = q @ q.T / d + jitter * np.eye(d)
    return (m + m.T) / 2


def jb_log_ratio(sigma_u, sigma_n, xi, xj):
    """log p(xi, xj | same) - log p(xi, xj | different) from dense 2d densities."""
    d = sigma_u.shape[0]
    tot = sigma_u + sigma_n
    s_same = np.block([[tot, sigma_u], [sigma_u, tot]])
    s_diff = np.block([[tot, np.zeros((d, d))], [np.zeros((d, d)), tot]])
    z = np.concatenate([xi, xj])
    return multivariate_normal(np.zeros(2 * d), s_same).logpdf(z) - multivariate_normal(
        np.zeros(2 * d), s_diff
    ).logpdf(z)


def naive_quadratic(x, m, y):
    total = 0.0
    for a in range(len(x)):
        for b in range(len(y)):
            total += x[a] * m[a][b] * y[b]
    return total


def sweep_points(tar, non):
    """(threshold, FRR, FAR) by brute counting at every distinct score and +inf."""
    thresholds = sorted(set(list(tar) + list(non))) + [math.inf]
    out = []
    for t in thresholds:
        frr = sum(1 for s in tar if s < t) / len(tar)
        far = sum(1 for s in non if s >= t) / len(non)
        out.append((t, frr, far))
    return out


def brute_eer(tar, non):
    pts = sweep_points(tar, non)
    prev = None
    for t, frr, far in pts:
        d = frr - far
        if d >= 0:
            if d == 0 or prev is None:
                return frr
            pfrr, pfar = prev
            pd = pfrr - pfar
            w = -pd / (d - pd)
            return pfrr + w * (frr - pfrr)
        prev = (frr, far)
    raise AssertionError("no crossing")


def brute_min_dcf(tar, non, p_target, c_miss=1.0, c_fa=1.0):
    w_miss, w_fa = c_miss * p_target, c_fa * (1 - p_target)
    norm = min(w_miss, w_fa)
    best = (w_fa * 1.0) / norm  # accept everything
    for t in sorted(set(list(tar) + list(non))) + [math.inf]:
        frr = sum(1 for s in tar if s < t) / len(tar)
        far = sum(1 for s in non if s >= t) / len(non)
        best = min(best, (w_miss * frr + w_fa * far) / norm)
    return best


def recovery_design(d, rng):
    """Speaker covariance with a fast-decaying spectrum plus small noise.

    With S speakers the sample error of the speaker covariance is roughly
    sqrt((r + 1) / S) for effective rank r, so a near rank-one spectrum is
    needed for tight recovery at a few hundred speakers.
    """
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    su = (q * (4.0 * 0.25 ** np.arange(d))) @ q.T
    q2, _ = np.linalg.qr(rng.standard_normal((d, d)))
    sn = (q2 * rng.uniform(0.1, 0.3, d)) @ q2.T
    return (su + su.T) / 2, (sn + sn.T) / 2


def central_differences(loss, params, step=1e-5):
    """Central finite-difference gradient of ``loss(params)`` for every array in ``params``."""
    out = {}
    for name, value in params.items():
        base = np.array(value, dtype=np.float64)
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            num[idx] = (loss({**params, name: plus}) - loss({**params, name: minus})) / (2 * step)
        out[name] = num
    return out
