"""Embedding, trial and score containers, their text formats, and synthetic data.

Synthetic corpora follow the two-covariance model: every speaker draws an
identity vector ``u ~ N(0, sigma_u)`` once and each of its samples adds an
independent residual ``n ~ N(0, sigma_n)``.
"""
from __future__ import annotations

import contextlib
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

TARGET = "target"
NONTARGET = "nontarget"


class FormatError(ValueError):
    """A text file does not follow its expected line format."""

    def __init__(self, path, lineno: int | None, message: str):
        where = f"{path}:{lineno}" if lineno is not None else f"{path}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass
class EmbeddingSet:
    """N labeled embedding rows of a common dimension."""

    rows: np.ndarray
    speaker_ids: list[str]

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        self.speaker_ids = [str(s) for s in self.speaker_ids]
        if self.rows.shape[0] < 1:
            raise ValueError("an embedding set needs at least one row")
        if self.rows.shape[0] != len(self.speaker_ids):
            raise ValueError(
                f"{self.rows.shape[0]} rows but {len(self.speaker_ids)} speaker ids"
            )
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("embedding rows must be finite")
        if any(not s or any(c.isspace() for c in s) for s in self.speaker_ids):
            raise ValueError("speaker ids must be non-empty and whitespace free")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.rows.shape == other.rows.shape
            and np.array_equal(self.rows, other.rows)
            and self.speaker_ids == other.speaker_ids
        )

    def speaker_index(self) -> tuple[list[str], np.ndarray]:
        """Return the distinct speakers (first-seen order) and a per-row index."""
        order: dict[str, int] = {}
        idx = np.empty(len(self), dtype=np.int64)
        for n, s in enumerate(self.speaker_ids):
            idx[n] = order.setdefault(s, len(order))
        return list(order), idx

    @property
    def num_speakers(self) -> int:
        return len(set(self.speaker_ids))

    def utterance_ids(self) -> list[str]:
        return [f"{s}_{n}" for n, s in enumerate(self.speaker_ids)]

    def subset(self, rows: Sequence[int]) -> "EmbeddingSet":
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddingSet(self.rows[rows], [self.speaker_ids[r] for r in rows])

    def with_rows(self, rows: np.ndarray) -> "EmbeddingSet":
        return EmbeddingSet(rows, list(self.speaker_ids))


@dataclass
class SynthSpec:
    dim: int
    num_speakers: int
    samples_per_speaker: int
    sigma_u: np.ndarray
    sigma_n: np.ndarray
    seed: int = 0
    speaker_prefix: str = "spk"


@dataclass
class TrialList:
    """Pairs of row indices with same-speaker (target) flags."""

    i: np.ndarray
    j: np.ndarray
    is_target: np.ndarray

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.is_target = np.asarray(self.is_target, dtype=bool)
        if not (len(self.i) == len(self.j) == len(self.is_target)):
            raise ValueError("trial arrays must have equal length")

    def __len__(self) -> int:
        return len(self.i)

    def __iter__(self) -> Iterator[tuple[int, int, str]]:
        for a, b, t in zip(self.i, self.j, self.is_target):
            yield int(a), int(b), TARGET if t else NONTARGET

    def __eq__(self, other):
        if not isinstance(other, TrialList):
            return NotImplemented
        return (
            np.array_equal(self.i, other.i)
            and np.array_equal(self.j, other.j)
            and np.array_equal(self.is_target, other.is_target)
        )

    @property
    def num_target(self) -> int:
        return int(self.is_target.sum())

    @property
    def num_nontarget(self) -> int:
        return len(self) - self.num_target

    def take(self, index) -> "TrialList":
        return TrialList(self.i[index], self.j[index], self.is_target[index])

    def validate(self, embeddings: EmbeddingSet) -> None:
        n = len(embeddings)
        if len(self) and (min(self.i.min(), self.j.min()) < 0 or max(self.i.max(), self.j.max()) >= n):
            raise ValueError(f"trial index out of range for {n} embeddings")
        _, spk = embeddings.speaker_index()
        same = spk[self.i] == spk[self.j]
        if not np.array_equal(same, self.is_target):
            bad = int(np.flatnonzero(same != self.is_target)[0])
            raise ValueError(f"trial {bad} label disagrees with speaker ids")


@dataclass
class ScoreSet:
    scores: np.ndarray
    is_target: np.ndarray
    enroll_ids: list[str] | None = field(default=None)
    test_ids: list[str] | None = field(default=None)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.is_target = np.asarray(self.is_target, dtype=bool).ravel()
        if self.scores.shape != self.is_target.shape:
            raise ValueError("scores and labels must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def __len__(self) -> int:
        return len(self.scores)

    def __eq__(self, other):
        if not isinstance(other, ScoreSet):
            return NotImplemented
        return (
            np.array_equal(self.scores, other.scores)
            and np.array_equal(self.is_target, other.is_target)
            and self.enroll_ids == other.enroll_ids
            and self.test_ids == other.test_ids
        )

    @property
    def target_scores(self) -> np.ndarray:
        return self.scores[self.is_target]

    @property
    def nontarget_scores(self) -> np.ndarray:
        return self.scores[~self.is_target]

    def check_both_classes(self) -> None:
        if not self.is_target.any() or self.is_target.all():
            raise ValueError("score set needs at least one target and one nontarget")


# ---------------------------------------------------------------------------
# Gaussian sampling


def check_covariance(name: str, mtx: np.ndarray, dim: int | None = None) -> np.ndarray:
    mtx = np.asarray(mtx, dtype=np.float64)
    if mtx.ndim != 2 or mtx.shape[0] != mtx.shape[1]:
        raise ValueError(f"{name} must be square, got shape {mtx.shape}")
    if dim is not None and mtx.shape[0] != dim:
        raise ValueError(f"{name} must be {dim}x{dim}, got {mtx.shape}")
    asym = np.max(np.abs(mtx - mtx.T)) if mtx.size else 0.0
    if asym > 1e-12 * max(1.0, np.max(np.abs(mtx))):
        raise ValueError(f"{name} is not symmetric (max asymmetry {asym:.3g})")
    lo = np.linalg.eigvalsh(mtx).min()
    if lo < -1e-10:
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {lo:.6g})")
    return mtx


def sqrt_psd(mtx: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; tolerates singular input."""
    lam, vec = np.linalg.eigh((mtx + mtx.T) / 2)
    return (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.T


def random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def default_covariances(dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random SPD pair used when no covariance is supplied.

    Speaker variability decays geometrically over a random basis, so only a
    few directions carry identity information; residual variability is
    spread over a second random basis with eigenvalues in [0.5, 1.5].
    """
    rng = np.random.default_rng(seed)
    q_u = random_orthogonal(dim, rng)
    q_n = random_orthogonal(dim, rng)
    lam_u = 10.0 * 0.85 ** np.arange(dim)
    lam_n = rng.uniform(0.5, 1.5, size=dim)
    sigma_u = (q_u * lam_u) @ q_u.T
    sigma_n = (q_n * lam_n) @ q_n.T
    return (sigma_u + sigma_u.T) / 2, (sigma_n + sigma_n.T) / 2


def generate_synthetic(spec: SynthSpec) -> EmbeddingSet:
    if min(spec.dim, spec.num_speakers, spec.samples_per_speaker) < 1:
        raise ValueError("dim, num_speakers and samples_per_speaker must be positive")
    sigma_u = check_covariance("sigma_u", spec.sigma_u, spec.dim)
    sigma_n = check_covariance("sigma_n", spec.sigma_n, spec.dim)
    rng = np.random.default_rng(np.uint64(spec.seed))
    s, m, d = spec.num_speakers, spec.samples_per_speaker, spec.dim
    u = rng.standard_normal((s, d)) @ sqrt_psd(sigma_u)
    n = rng.standard_normal((s * m, d)) @ sqrt_psd(sigma_n)
    rows = np.repeat(u, m, axis=0) + n
    width = max(4, len(str(s - 1)))
    ids = [f"{spec.speaker_prefix}{k:0{width}d}" for k in range(s) for _ in range(m)]
    return EmbeddingSet(rows, ids)


# ---------------------------------------------------------------------------
# Trials


def count_pairs(embeddings: EmbeddingSet) -> tuple[int, int]:
    """Number of distinct (target, nontarget) unordered pairs."""
    _, spk = embeddings.speaker_index()
    sizes = np.bincount(spk)
    n_t = int(np.sum(sizes * (sizes - 1) // 2))
    n = len(embeddings)
    return n_t, n * (n - 1) // 2 - n_t


def _target_pairs(spk: np.ndarray) -> np.ndarray:
    out = []
    for s in range(spk.max() + 1):
        rows = np.flatnonzero(spk == s)
        a, b = np.triu_indices(len(rows), k=1)
        out.append(np.stack([rows[a], rows[b]], axis=1))
    return np.concatenate(out) if out else np.empty((0, 2), dtype=np.int64)


def _sample_nontargets(spk: np.ndarray, count: int, available: int, rng) -> np.ndarray:
    n = len(spk)
    if count == 0:
        return np.empty((0, 2), dtype=np.int64)
    if count > available // 4:
        a, b = np.triu_indices(n, k=1)
        keep = spk[a] != spk[b]
        pairs = np.stack([a[keep], b[keep]], axis=1)
        pick = rng.choice(len(pairs), size=count, replace=False)
        return pairs[np.sort(pick)]
    # sparse request: rejection sampling of unordered pairs, deduplicated
    chosen: set[int] = set()
    while len(chosen) < count:
        need = count - len(chosen)
        a = rng.integers(0, n, size=2 * need + 16)
        b = rng.integers(0, n, size=2 * need + 16)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        ok = (lo != hi) & (spk[lo] != spk[hi])
        for key in (lo[ok] * n + hi[ok]).tolist():
            if key not in chosen:
                chosen.add(key)
                if len(chosen) == count:
                    break
    keys = np.array(sorted(chosen), dtype=np.int64)
    return np.stack([keys // n, keys % n], axis=1)


def make_trials(
    embeddings: EmbeddingSet, num_target: int, num_nontarget: int, seed: int = 0
) -> TrialList:
    """Sample distinct same-speaker and different-speaker pairs uniformly."""
    _, spk = embeddings.speaker_index()
    sizes = np.bincount(spk)
    if len(sizes) < 2 or sizes.max() < 2:
        raise ValueError("need at least 2 speakers and one speaker with 2 samples")
    avail_t, avail_n = count_pairs(embeddings)
    if num_target > avail_t:
        raise ValueError(f"requested {num_target} target pairs, only {avail_t} exist")
    if num_nontarget > avail_n:
        raise ValueError(f"requested {num_nontarget} nontarget pairs, only {avail_n} exist")
    rng = np.random.default_rng(np.uint64(seed))
    tgt = _target_pairs(spk)
    tgt = tgt[np.sort(rng.choice(len(tgt), size=num_target, replace=False))]
    non = _sample_nontargets(spk, num_nontarget, avail_n, rng)
    pairs = np.concatenate([tgt, non]).astype(np.int64)
    labels = np.concatenate([np.ones(len(tgt), bool), np.zeros(len(non), bool)])
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return TrialList(pairs[order, 0], pairs[order, 1], labels[order])


# ---------------------------------------------------------------------------
# Files


@contextlib.contextmanager
def atomic_write(path):
    """Open a temp file next to ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def fmt(x: float) -> str:
    # repr of a double is its shortest exact round-trip form (<= 17 digits)
    return repr(float(x))


def _data_lines(path) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, stripped.split()


def _parse_float(path, lineno, token) -> float:
    try:
        value = float(token)
    except ValueError:
        raise FormatError(path, lineno, f"not a number: {token!r}") from None
    if not math.isfinite(value):
        raise FormatError(path, lineno, f"non-finite value: {token!r}")
    return value


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def save_embeddings(embeddings: EmbeddingSet, path, header: Sequence[str] = ()) -> None:
    with atomic_write(path) as fh:
        for line in header:
            fh.write(f"# {line}\n")
        for spk, row in zip(embeddings.speaker_ids, embeddings.rows):
            fh.write(spk + " " + " ".join(fmt(v) for v in row) + "\n")


def load_embeddings(path) -> EmbeddingSet:
    ids: list[str] = []
    rows: list[list[float]] = []
    dim = None
    for lineno, tok in _data_lines(path):
        if len(tok) < 2:
            raise FormatError(path, lineno, "missing speaker id or values")
        if dim is None:
            dim = len(tok) - 1
        elif len(tok) == dim and _is_number(tok[0]):
            raise FormatError(path, lineno, "missing speaker id")
        elif len(tok) - 1 != dim:
            raise FormatError(path, lineno, f"expected {dim} values, found {len(tok) - 1}")
        ids.append(tok[0])
        rows.append([_parse_float(path, lineno, t) for t in tok[1:]])
    if not rows:
        raise FormatError(path, None, "no embeddings found")
    return EmbeddingSet(np.array(rows), ids)


def save_trials(trials: TrialList, path) -> None:
    with atomic_write(path) as fh:
        for a, b, lab in trials:
            fh.write(f"{a} {b} {lab}\n")


def _parse_label(path, lineno, token) -> bool:
    if token == TARGET:
        return True
    if token == NONTARGET:
        return False
    raise FormatError(path, lineno, f"label must be target or nontarget, got {token!r}")


def load_trials(path) -> TrialList:
    i, j, lab = [], [], []
    for lineno, tok in _data_lines(path):
        if len(tok) != 3:
            raise FormatError(path, lineno, f"expected 3 fields, found {len(tok)}")
        try:
            i.append(int(tok[0]))
            j.append(int(tok[1]))
        except ValueError:
            raise FormatError(path, lineno, "row indices must be integers") from None
        lab.append(_parse_label(path, lineno, tok[2]))
    return TrialList(i, j, lab)


def write_scores(trials: TrialList, scores, ids: Sequence[str], path) -> None:
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(trials):
        raise ValueError(f"{len(trials)} trials but {len(scores)} scores")
    with atomic_write(path) as fh:
        for (a, b, lab), s in zip(trials, scores):
            fh.write(f"{ids[a]} {ids[b]} {fmt(s)} {lab}\n")


def write_score_set(scores: ScoreSet, path) -> None:
    n = len(scores)
    enroll = scores.enroll_ids or [f"e{k}" for k in range(n)]
    test = scores.test_ids or [f"t{k}" for k in range(n)]
    with atomic_write(path) as fh:
        for e, t, s, lab in zip(enroll, test, scores.scores, scores.is_target):
            fh.write(f"{e} {t} {fmt(s)} {TARGET if lab else NONTARGET}\n")


def read_scores(path) -> ScoreSet:
    enroll, test, values, labels = [], [], [], []
    for lineno, tok in _data_lines(path):
        if len(tok) != 4:
            raise FormatError(path, lineno, f"expected 4 fields, found {len(tok)}")
        enroll.append(tok[0])
        test.append(tok[1])
        values.append(_parse_float(path, lineno, tok[2]))
        labels.append(_parse_label(path, lineno, tok[3]))
    return ScoreSet(np.array(values), np.array(labels, dtype=bool), enroll, test)


def write_matrix_rows(fh, mtx) -> None:
    for row in np.atleast_2d(mtx):
        fh.write(" ".join(fmt(v) for v in row) + "\n")


def read_matrix(path) -> np.ndarray:
    """Whitespace-separated square/rectangular matrix, one row per line."""
    rows = []
    for lineno, tok in _data_lines(path):
        rows.append([_parse_float(path, lineno, t) for t in tok])
        if len(rows[-1]) != len(rows[0]):
            raise FormatError(path, lineno, "ragged matrix row")
    if not rows:
        raise FormatError(path, None, "empty matrix file")
    return np.array(rows)


class LineReader:
    """Sequential numeric-row reader for the model file formats."""

    def __init__(self, path):
        self.path = path
        self._lines = list(_data_lines(path))
        self._pos = 0

    def header(self, tag: str) -> list[str]:
        lineno, tok = self._next()
        if tok[0] != tag:
            raise FormatError(self.path, lineno, f"expected header {tag!r}, found {tok[0]!r}")
        return tok[1:]

    def _next(self):
        if self._pos >= len(self._lines):
            last = self._lines[-1][0] if self._lines else None
            raise FormatError(self.path, last, "unexpected end of file")
        item = self._lines[self._pos]
        self._pos += 1
        return item

    def rows(self, count: int, width: int) -> np.ndarray:
        out = np.empty((count, width))
        for r in range(count):
            lineno, tok = self._next()
            if len(tok) != width:
                raise FormatError(self.path, lineno, f"expected {width} values, found {len(tok)}")
            out[r] = [_parse_float(self.path, lineno, t) for t in tok]
        return out

    @property
    def exhausted(self) -> bool:
        return self._pos >= len(self._lines)

    def finish(self) -> None:
        if not self.exhausted:
            raise FormatError(self.path, self._lines[self._pos][0], "trailing data")
