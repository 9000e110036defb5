"""Joint Bayesian two-covariance model: EM fitting, A/G matrices, pair scoring.

Features are modeled as ``x = u + n`` with speaker identity ``u ~ N(0, sigma_u)``
and residual ``n ~ N(0, sigma_n)``. A same-speaker pair is jointly Gaussian with
covariance ``[[S, sigma_u], [sigma_u, S]]`` (``S = sigma_u + sigma_n``); a
different-speaker pair has ``[[S, 0], [0, S]]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data_io import EmbeddingSet, LineReader, TrialList, atomic_write, fmt, write_matrix_rows

log = logging.getLogger(__name__)

VARIANTS = ("full", "a_only", "g_only", "g_to_a", "a_to_g")
ABLATION_VARIANTS = ("a_only", "g_only", "g_to_a", "a_to_g")
SIGMA_N_FLOOR = 1e-10


def _sym(t: np.ndarray) -> np.ndarray:
    return (t + t.T) / 2


def compute_ag(sigma_u: np.ndarray, sigma_n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scoring matrices from the block inverse of the same-speaker covariance.

    With ``inv([[S, sigma_u], [sigma_u, S]]) = [[X, Y], [Y, X]]`` this returns
    ``A = inv(S) - X`` and ``G = Y``, so that
    ``x_i'A x_i + x_j'A x_j - 2 x_i'G x_j`` is twice the joint log-density
    ratio (same vs different speaker) up to an additive constant.
    """
    sigma_u = np.asarray(sigma_u, dtype=np.float64)
    sigma_n = np.asarray(sigma_n, dtype=np.float64)
    d = sigma_u.shape[0]
    total = sigma_u + sigma_n
    try:
        total_inv = np.linalg.inv(total)
        # X is the inverse Schur complement; Y = -inv(S) sigma_u X
        x_blk = np.linalg.inv(total - sigma_u @ total_inv @ sigma_u)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular total covariance or Schur complement: {exc}") from None
    y_blk = -total_inv @ sigma_u @ x_blk
    if d and not np.all(np.isfinite(x_blk)):
        raise ValueError("non-finite block inverse")
    return _sym(total_inv - x_blk), _sym(y_blk)


def closed_form_ag(sigma_u: np.ndarray, sigma_n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Direct closed-form expressions for A and G (cross-check of `compute_ag`)."""
    total = sigma_u + sigma_n
    total_inv = np.linalg.inv(total)
    a = total_inv - np.linalg.inv(total - sigma_u @ total_inv @ sigma_u)
    g = -np.linalg.solve(2 * sigma_u + sigma_n, sigma_u) @ np.linalg.inv(sigma_n)
    return a, g


def ag_discrepancy(sigma_u: np.ndarray, sigma_n: np.ndarray) -> dict[str, float]:
    """Max-abs differences between the closed forms and the block inverse.

    ``g_flipped`` compares against ``-G``; it is large whenever ``G != 0``,
    showing the closed-form G carries the same sign as the off-diagonal block.
    """
    a_blk, g_blk = compute_ag(sigma_u, sigma_n)
    a_cf, g_cf = closed_form_ag(sigma_u, sigma_n)
    scale = max(1.0, np.abs(a_blk).max(initial=0.0), np.abs(g_blk).max(initial=0.0))
    return {
        "a": float(np.abs(a_cf - a_blk).max(initial=0.0) / scale),
        "g": float(np.abs(g_cf - g_blk).max(initial=0.0) / scale),
        "g_flipped": float(np.abs(g_cf + g_blk).max(initial=0.0) / scale),
        "g_cf_asymmetry": float(np.abs(g_cf - g_cf.T).max(initial=0.0) / scale),
    }


@dataclass
class JbModel:
    """Two-covariance model plus cached scoring matrices.

    ``mean`` is subtracted from features before scoring (zero for a model
    fit on already-centered data).
    """

    sigma_u: np.ndarray
    sigma_n: np.ndarray
    mean: np.ndarray | None = None
    a_mat: np.ndarray = field(init=False, repr=False)
    g_mat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.sigma_u = np.asarray(self.sigma_u, dtype=np.float64)
        self.sigma_n = np.asarray(self.sigma_n, dtype=np.float64)
        d = self.sigma_u.shape[0]
        if self.sigma_u.shape != (d, d) or self.sigma_n.shape != (d, d):
            raise ValueError("sigma_u and sigma_n must be square and of equal size")
        for name, m in (("sigma_u", self.sigma_u), ("sigma_n", self.sigma_n)):
            if np.abs(m - m.T).max(initial=0.0) > 1e-10 * max(1.0, np.abs(m).max(initial=0.0)):
                raise ValueError(f"{name} is not symmetric")
        if d and np.linalg.eigvalsh(self.sigma_n).min() <= 0:
            raise ValueError("sigma_n must be positive definite")
        self.mean = np.zeros(d) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.a_mat, self.g_mat = compute_ag(self.sigma_u, self.sigma_n)

    @property
    def dim(self) -> int:
        return self.sigma_u.shape[0]

    def center(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) - self.mean

    def save(self, path) -> None:
        # the trailing mean row is omitted when the model is zero-mean
        with atomic_write(path) as fh:
            fh.write(f"jb {self.dim}\n")
            write_matrix_rows(fh, self.sigma_u)
            write_matrix_rows(fh, self.sigma_n)
            if np.any(self.mean != 0):
                fh.write(" ".join(fmt(v) for v in self.mean) + "\n")

    @classmethod
    def load(cls, path) -> "JbModel":
        rd = LineReader(path)
        (d,) = (int(t) for t in rd.header("jb"))
        su = rd.rows(d, d)
        sn = rd.rows(d, d)
        mean = None if rd.exhausted else rd.rows(1, d)[0]
        rd.finish()
        return cls(su, sn, mean)


# ---------------------------------------------------------------------------
# EM


@dataclass
class _SpeakerStats:
    counts: np.ndarray  # m_s
    means: np.ndarray  # per-speaker mean rows
    within: np.ndarray  # sum over samples of (x - speaker mean)(...)'
    n: int


def speaker_stats(x: np.ndarray, speaker_index: np.ndarray) -> _SpeakerStats:
    counts = np.bincount(speaker_index)
    sums = np.zeros((len(counts), x.shape[1]))
    np.add.at(sums, speaker_index, x)
    means = sums / counts[:, None]
    dev = x - means[speaker_index]
    return _SpeakerStats(counts, means, dev.T @ dev, x.shape[0])


def _stats_log_likelihood(su: np.ndarray, sn: np.ndarray, st: _SpeakerStats) -> float:
    d = su.shape[0]
    try:
        chol_n = np.linalg.cholesky(sn)
    except np.linalg.LinAlgError:
        raise ValueError("sigma_n is not positive definite") from None
    logdet_n = 2 * np.log(np.diag(chol_n)).sum()
    sn_inv = np.linalg.inv(sn)
    total = -0.5 * st.n * d * np.log(2 * np.pi)
    total -= 0.5 * np.sum(sn_inv * st.within)
    for m in np.unique(st.counts):
        sel = st.counts == m
        cov = sn + m * su
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("singular total covariance") from None
        z = np.linalg.solve(chol, st.means[sel].T)
        k = int(sel.sum())
        total -= 0.5 * k * ((m - 1) * logdet_n + 2 * np.log(np.diag(chol)).sum())
        total -= 0.5 * m * np.sum(z * z)
    return float(total)


def log_likelihood(model: JbModel, features: EmbeddingSet) -> float:
    """Marginal log-likelihood, summing each speaker's stacked-sample density.

    A speaker with samples ``x_1..x_m`` has joint covariance with
    ``sigma_u + sigma_n`` on diagonal blocks and ``sigma_u`` off the diagonal.
    """
    _, spk = features.speaker_index()
    st = speaker_stats(model.center(features.rows), spk)
    return _stats_log_likelihood(model.sigma_u, model.sigma_n, st)


def _floor_eigs(mtx: np.ndarray, floor: float) -> tuple[np.ndarray, bool]:
    lam, vec = np.linalg.eigh(mtx)
    if lam.min(initial=np.inf) >= floor:
        return mtx, False
    return _sym((vec * np.maximum(lam, floor)) @ vec.T), True


@dataclass
class EmResult:
    model: JbModel
    history: list[float]
    iterations: int
    converged: bool


def fit_jb_em(
    features: EmbeddingSet,
    max_iters: int = 200,
    tol: float = 1e-6,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    floor: float = SIGMA_N_FLOOR,
) -> EmResult:
    """Fit ``(sigma_u, sigma_n)`` by exact EM on zero-mean features.

    ``history[0]`` is the log-likelihood at the initial parameters and
    ``history[t]`` the value after iteration ``t``. Iteration stops when the
    relative Frobenius change of the parameter pair drops below ``tol``.
    """
    x = features.rows
    _, spk = features.speaker_index()
    st = speaker_stats(x, spk)
    s, d = len(st.counts), x.shape[1]
    if s < 2 or st.counts.max() < 2:
        raise ValueError("EM needs >= 2 speakers and one speaker with >= 2 samples")
    if init is None:
        su = _sym(st.means.T @ st.means / s)
        sn = _sym(st.within / max(st.n - s, 1))
    else:
        su, sn = (np.array(m, dtype=np.float64) for m in init)
    sn, floored = _floor_eigs(sn, floor)
    if floored:
        log.warning("sigma_n initial estimate floored at %g", floor)
    history = [_stats_log_likelihood(su, sn, st)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        new_su = np.zeros((d, d))
        resid = st.within.copy()
        for m in np.unique(st.counts):
            sel = st.counts == m
            k = int(sel.sum())
            # posterior of u_s: mean B xbar_s, covariance su - B su
            gain = np.linalg.solve(su + sn / m, su).T
            post_cov = _sym(su - gain @ su)
            mu = st.means[sel] @ gain.T
            new_su += mu.T @ mu + k * post_cov
            dev = st.means[sel] - mu
            resid += m * (dev.T @ dev) + (m * k) * post_cov
        new_su = _sym(new_su / s)
        new_sn, floored = _floor_eigs(_sym(resid / st.n), floor)
        if floored:
            log.warning("sigma_n eigenvalues floored at %g (degenerate residuals)", floor)
        change = np.sqrt(np.sum((new_su - su) ** 2) + np.sum((new_sn - sn) ** 2))
        scale = np.sqrt(np.sum(new_su**2) + np.sum(new_sn**2))
        su, sn = new_su, new_sn
        history.append(_stats_log_likelihood(su, sn, st))
        if change <= tol * max(scale, 1e-300):
            converged = True
            break
    return EmResult(JbModel(su, sn), history, it, converged)


# ---------------------------------------------------------------------------
# Scoring


def _rows(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise ValueError(f"expected vectors of dim {dim}, got {x.shape[-1]}")
    return x


def _quad(x: np.ndarray, mtx: np.ndarray) -> np.ndarray:
    return np.sum((x @ mtx) * x, axis=-1)


def _cross(xi: np.ndarray, xj: np.ndarray, mtx: np.ndarray) -> np.ndarray:
    # averaged over both orders so swapping the arguments is bitwise exact
    return 0.5 * (np.sum((xi @ mtx) * xj, axis=-1) + np.sum((xj @ mtx) * xi, axis=-1))


def score_variant(a_mat, g_mat, mode: str, xi, xj):
    """Pair score with A or G zeroed or substituted for one another."""
    d = a_mat.shape[0]
    xi, xj = _rows(xi, d), _rows(xj, d)
    if mode == "a_only":
        return _quad(xi, a_mat) + _quad(xj, a_mat)
    if mode == "g_only":
        return -2.0 * _cross(xi, xj, g_mat)
    if mode == "full":
        return score_variant(a_mat, g_mat, "a_only", xi, xj) + score_variant(
            a_mat, g_mat, "g_only", xi, xj
        )
    if mode == "g_to_a":
        return _quad(xi - xj, g_mat)
    if mode == "a_to_g":
        return _quad(xi - xj, a_mat)
    raise ValueError(f"unknown score variant {mode!r}; expected one of {VARIANTS}")


def jb_score(model: JbModel, xi, xj):
    """``x_i'A x_i + x_j'A x_j - 2 x_i'G x_j`` on already-centered features."""
    return score_variant(model.a_mat, model.g_mat, "full", xi, xj)


@dataclass
class MahalanobisModel:
    m_mat: np.ndarray

    def __post_init__(self):
        self.m_mat = np.asarray(self.m_mat, dtype=np.float64)
        if np.abs(self.m_mat - self.m_mat.T).max(initial=0.0) > 1e-10:
            raise ValueError("M must be symmetric")

    def save(self, path) -> None:
        with atomic_write(path) as fh:
            fh.write(f"md {self.m_mat.shape[0]}\n")
            write_matrix_rows(fh, self.m_mat)

    @classmethod
    def load(cls, path) -> "MahalanobisModel":
        rd = LineReader(path)
        (d,) = (int(t) for t in rd.header("md"))
        m = rd.rows(d, d)
        rd.finish()
        return cls(m)


def _inv_regularized(cov: np.ndarray, ridge: float, name: str) -> np.ndarray:
    d = cov.shape[0]
    reg = cov + ridge * np.trace(cov) / d * np.eye(d)
    lam = np.linalg.eigvalsh(reg)
    if lam[0] <= 1e-12 * max(lam[-1], 1e-300):
        raise ValueError(f"{name} difference covariance is singular; use ridge > 0")
    return np.linalg.inv(reg)


def mahalanobis_from_stats(trials: TrialList, features, ridge: float = 1e-6) -> MahalanobisModel:
    """``M = inv(C_D) - inv(C_S)`` from second moments of pair differences.

    ``ridge`` is relative: ``ridge * trace(C) / d`` is added to each diagonal.
    """
    x = features.rows if isinstance(features, EmbeddingSet) else np.asarray(features, dtype=np.float64)
    if trials.num_target == 0 or trials.num_nontarget == 0:
        raise ValueError("need both target and nontarget trials")
    delta = x[trials.i] - x[trials.j]
    ds, dd = delta[trials.is_target], delta[~trials.is_target]
    c_s = _sym(ds.T @ ds / len(ds))
    c_d = _sym(dd.T @ dd / len(dd))
    m = _inv_regularized(c_d, ridge, "different-speaker") - _inv_regularized(c_s, ridge, "same-speaker")
    return MahalanobisModel(_sym(m))


def md_score(model: MahalanobisModel, xi, xj):
    d = model.m_mat.shape[0]
    return _quad(_rows(xi, d) - _rows(xj, d), model.m_mat)
