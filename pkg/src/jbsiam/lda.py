"""Fisher LDA projection and length normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data_io import EmbeddingSet, LineReader, atomic_write, fmt, write_matrix_rows

NORM_EPS = 1e-12


def fix_column_signs(vec: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if vec.size == 0:
        return vec
    pivot = vec[np.argmax(np.abs(vec), axis=0), np.arange(vec.shape[1])]
    return vec * np.where(pivot < 0, -1.0, 1.0)


@dataclass(frozen=True)
class LdaTransform:
    w: np.ndarray
    input_mean: np.ndarray
    eigenvalues: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    def save(self, path) -> None:
        with atomic_write(path) as fh:
            fh.write(f"lda {self.in_dim} {self.out_dim}\n")
            fh.write(" ".join(fmt(v) for v in self.input_mean) + "\n")
            write_matrix_rows(fh, self.w)

    @classmethod
    def load(cls, path) -> "LdaTransform":
        rd = LineReader(path)
        d, d_out = (int(t) for t in rd.header("lda"))
        mean = rd.rows(1, d)[0]
        w = rd.rows(d, d_out)
        rd.finish()
        return cls(w, mean)


def scatter_matrices(x: np.ndarray, speaker_index: np.ndarray):
    """Within- and between-speaker scatter, both normalized by N."""
    n, d = x.shape
    counts = np.bincount(speaker_index)
    sums = np.zeros((len(counts), d))
    np.add.at(sums, speaker_index, x)
    means = sums / counts[:, None]
    dev = x - means[speaker_index]
    s_w = dev.T @ dev / n
    centered_means = means - x.mean(axis=0)
    s_b = (centered_means.T * counts) @ centered_means / n
    return (s_w + s_w.T) / 2, (s_b + s_b.T) / 2


def fit_lda(embeddings: EmbeddingSet, out_dim: int, ridge: float | None = None) -> LdaTransform:
    """Fit a Fisher LDA projection to ``out_dim`` dimensions.

    Columns of ``w`` solve ``S_b w = lambda (S_w + ridge I) w`` for the
    ``out_dim`` largest ``lambda`` and are scaled to unit
    ``(S_w + ridge I)``-norm. ``ridge`` defaults to ``1e-6 * trace(S_w) / d``.
    """
    x = embeddings.rows
    d = x.shape[1]
    _, spk = embeddings.speaker_index()
    k = spk.max() + 1
    if k < 2:
        raise ValueError("LDA needs at least 2 speakers")
    if out_dim < 1 or out_dim > min(d, k - 1):
        raise ValueError(f"out_dim={out_dim} must be in [1, min(d={d}, K-1={k - 1})]")
    mean = x.mean(axis=0)
    s_w, s_b = scatter_matrices(x - mean, spk)
    if ridge is None:
        ridge = 1e-6 * np.trace(s_w) / d
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    reg = s_w + ridge * np.eye(d)
    lam_w = np.linalg.eigvalsh(reg)
    if lam_w[0] <= 1e-12 * max(lam_w[-1], 1e-300):
        raise ValueError("within-speaker scatter is singular; use ridge > 0")
    lam, vec = scipy.linalg.eigh(s_b, reg)
    lam, vec = lam[::-1][:out_dim], vec[:, ::-1][:, :out_dim]
    return LdaTransform(fix_column_signs(vec), mean, lam)


def apply_lda(t: LdaTransform, x: np.ndarray) -> np.ndarray:
    """Project one vector or a row batch: ``w.T (x - input_mean)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != t.in_dim:
        raise ValueError(f"expected input dim {t.in_dim}, got {x.shape[-1]}")
    return (x - t.input_mean) @ t.w


def length_normalize(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(norm <= NORM_EPS):
        raise ValueError("cannot length-normalize a (near) zero vector")
    return h / norm
