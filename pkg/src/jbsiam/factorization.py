"""Factor a negative semidefinite scoring matrix as ``mtx = -P P'``."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .lda import fix_column_signs

log = logging.getLogger(__name__)

SYM_TOL = 1e-8
PSD_TOL = 1e-10


@dataclass(frozen=True)
class FactorResult:
    p: np.ndarray
    residual: float
    clamped_rank: int
    eigenvalues: np.ndarray


def factor_neg_semidefinite(mtx: np.ndarray, k: int | None = None) -> FactorResult:
    """Return ``P`` (d x k) with ``P P'`` the closest rank-k PSD matrix to ``-mtx``.

    Negative eigenvalues of ``-mtx`` are clamped to zero and counted in
    ``clamped_rank`` (eigenvalues within ``-1e-10`` of zero are not counted).
    """
    mtx = np.asarray(mtx, dtype=np.float64)
    d = mtx.shape[0]
    if mtx.shape != (d, d):
        raise ValueError(f"matrix must be square, got {mtx.shape}")
    scale = max(1.0, np.abs(mtx).max(initial=0.0))
    asym = np.abs(mtx - mtx.T).max(initial=0.0)
    if asym > SYM_TOL * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    k = d if k is None else k
    if not 0 <= k <= d:
        raise ValueError(f"width k={k} must be in [0, {d}]")
    lam, vec = np.linalg.eigh(-(mtx + mtx.T) / 2)
    lam, vec = lam[::-1], vec[:, ::-1]
    clamped = int(np.sum(lam < -PSD_TOL * scale))
    if clamped:
        log.warning("clamped %d negative eigenvalue(s) (min %.3g) while factoring", clamped, lam[-1])
    kept = np.clip(lam[:k], 0.0, None)
    p = fix_column_signs(vec[:, :k]) * np.sqrt(kept)
    residual = float(np.linalg.norm(mtx + p @ p.T))
    return FactorResult(p, residual, clamped, lam)
