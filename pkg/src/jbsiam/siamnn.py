"""Siamese JB network: LDA layer, length normalization, twin A/G branches.

Each input is embedded as ``z = W'(x - input_mean) / ||W'(x - input_mean)|| - norm_mean``
and mapped to ``a = P_A' z`` and ``g = P_G' z``. A pair scores
``r = 2 g_i'g_j - a_i'a_i - a_j'a_j`` and its same-speaker posterior is
``sigmoid(alpha * r + beta)``. Gradients are exact and hand-derived.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .data_io import EmbeddingSet, LineReader, ScoreSet, TrialList, atomic_write, fmt, write_matrix_rows
from .factorization import factor_neg_semidefinite
from .jb import JbModel, score_variant
from .lda import NORM_EPS, LdaTransform
from .metrics import eer

log = logging.getLogger(__name__)

PROB_CLIP = 1e-12
PARAM_NAMES = ("w", "p_a", "p_g", "alpha", "beta")


@dataclass
class SiamNet:
    w: np.ndarray
    input_mean: np.ndarray
    p_a: np.ndarray
    p_g: np.ndarray
    alpha: float = 1.0
    beta: float = 0.0
    norm_mean: np.ndarray | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.input_mean = np.asarray(self.input_mean, dtype=np.float64)
        self.p_a = np.asarray(self.p_a, dtype=np.float64)
        self.p_g = np.asarray(self.p_g, dtype=np.float64)
        self.alpha = float(self.alpha)
        self.beta = float(self.beta)
        d, d_out = self.w.shape
        if self.norm_mean is None:
            self.norm_mean = np.zeros(d_out)
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float64)
        if self.input_mean.shape != (d,) or self.norm_mean.shape != (d_out,):
            raise ValueError("mean vectors do not match the LDA layer shape")
        if self.p_a.shape[0] != d_out or self.p_g.shape != self.p_a.shape:
            raise ValueError("branch weights must both be d' x k")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"parameter {name} is not finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w.shape[0], self.w.shape[1], self.p_a.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {n: np.array(getattr(self, n), dtype=np.float64) for n in PARAM_NAMES}

    def with_params(self, params: dict) -> "SiamNet":
        upd = {n: (float(v) if n in ("alpha", "beta") else np.array(v)) for n, v in params.items()}
        return replace(self, **upd)

    def copy(self) -> "SiamNet":
        return self.with_params(self.params())

    def equals(self, other: "SiamNet") -> bool:
        return all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in PARAM_NAMES + ("input_mean", "norm_mean")
        )

    def scoring_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Implied ``A = -P_A P_A'`` and ``G = -P_G P_G'``."""
        return -self.p_a @ self.p_a.T, -self.p_g @ self.p_g.T

    def embed(self, x) -> np.ndarray:
        return _embed(self, np.asarray(x, dtype=np.float64))[-1]

    def save(self, path) -> None:
        d, d_out, k = self.dims
        with atomic_write(path) as fh:
            fh.write(f"siamnn {d} {d_out} {k} {fmt(self.alpha)} {fmt(self.beta)}\n")
            fh.write(" ".join(fmt(v) for v in self.input_mean) + "\n")
            write_matrix_rows(fh, self.w)
            write_matrix_rows(fh, self.p_a)
            write_matrix_rows(fh, self.p_g)
            if np.any(self.norm_mean != 0):
                fh.write(" ".join(fmt(v) for v in self.norm_mean) + "\n")

    @classmethod
    def load(cls, path) -> "SiamNet":
        rd = LineReader(path)
        head = rd.header("siamnn")
        d, d_out, k = (int(t) for t in head[:3])
        alpha, beta = float(head[3]), float(head[4])
        mean = rd.rows(1, d)[0]
        w = rd.rows(d, d_out)
        p_a = rd.rows(d_out, k)
        p_g = rd.rows(d_out, k)
        norm_mean = None if rd.exhausted else rd.rows(1, d_out)[0]
        rd.finish()
        return cls(w, mean, p_a, p_g, alpha, beta, norm_mean)


def _embed(net: SiamNet, x: np.ndarray):
    if x.shape[-1] != net.w.shape[0]:
        raise ValueError(f"expected input dim {net.w.shape[0]}, got {x.shape[-1]}")
    c = x - net.input_mean
    h = c @ net.w
    rho = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(rho <= NORM_EPS):
        raise ValueError("LDA-layer output has (near) zero norm; cannot length-normalize")
    ht = h / rho
    return c, rho, ht, ht - net.norm_mean


def _pair_score(a_i, a_j, g_i, g_j) -> np.ndarray:
    # (self_i + self_j) is commutative in floating point, so swapping is exact
    return 2.0 * np.sum(g_i * g_j, axis=-1) - (np.sum(a_i * a_i, axis=-1) + np.sum(a_j * a_j, axis=-1))


def forward(net: SiamNet, xi, xj):
    """Raw score ``r`` and calibrated posterior ``p_hat`` (scalar or batch)."""
    zi = net.embed(xi)
    zj = net.embed(xj)
    r = _pair_score(zi @ net.p_a, zj @ net.p_a, zi @ net.p_g, zj @ net.p_g)
    return r, expit(net.alpha * r + net.beta)


def variant_scores(net: SiamNet, mode: str, xi, xj):
    """Score with the net's implied A/G matrices under an ablation mode."""
    if mode == "full":
        return forward(net, xi, xj)[0]
    a_mat, g_mat = net.scoring_matrices()
    return score_variant(a_mat, g_mat, mode, net.embed(xi), net.embed(xj))


# ---------------------------------------------------------------------------
# Losses


@dataclass(frozen=True)
class LossSpec:
    kind: str = "bce"
    prior: float = 0.5
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bce", "ebr"):
            raise ValueError(f"unknown loss {self.kind!r}")


def _check(p_hat, labels):
    p_hat = np.asarray(p_hat, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if p_hat.shape != labels.shape:
        raise ValueError("p_hat and labels must have equal length")
    return p_hat, labels


def loss_bce(p_hat, labels) -> float:
    p_hat, y = _check(p_hat, labels)
    p = np.clip(p_hat, PROB_CLIP, 1 - PROB_CLIP)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def loss_ebr(p_hat, labels, prior: float = 0.5, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Soft Bayes risk: weighted mean soft-miss plus mean soft-false-alarm."""
    p_hat, y = _check(p_hat, labels)
    tgt = y > 0.5
    if tgt.all() or not tgt.any():
        raise ValueError("EBR needs both target and nontarget trials")
    p = np.clip(p_hat, PROB_CLIP, 1 - PROB_CLIP)
    return float(c_miss * prior * np.mean(1 - p[tgt]) + c_fa * (1 - prior) * np.mean(p[~tgt]))


def _loss_and_dp(p_hat: np.ndarray, y: np.ndarray, spec: LossSpec):
    p = np.clip(p_hat, PROB_CLIP, 1 - PROB_CLIP)
    live = p == p_hat
    n = len(y)
    if spec.kind == "bce":
        value = loss_bce(p_hat, y)
        dp = (-y / p + (1 - y) / (1 - p)) / n
    else:
        value = loss_ebr(p_hat, y, spec.prior, spec.c_miss, spec.c_fa)
        tgt = y > 0.5
        dp = np.where(tgt, -spec.c_miss * spec.prior / tgt.sum(), spec.c_fa * (1 - spec.prior) / (~tgt).sum())
    return value, np.where(live, dp, 0.0)


def batch_loss(net: SiamNet, xi, xj, y, spec: LossSpec) -> float:
    _, p_hat = forward(net, xi, xj)
    return _loss_and_dp(p_hat, np.asarray(y, dtype=np.float64), spec)[0]


def backward(net: SiamNet, xi, xj, y, spec: LossSpec) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and exact gradients for every trainable parameter."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    xj = np.atleast_2d(np.asarray(xj, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if len(y) == 0:
        raise ValueError("empty batch")
    c_i, rho_i, ht_i, z_i = _embed(net, xi)
    c_j, rho_j, ht_j, z_j = _embed(net, xj)
    a_i, a_j = z_i @ net.p_a, z_j @ net.p_a
    g_i, g_j = z_i @ net.p_g, z_j @ net.p_g
    r = _pair_score(a_i, a_j, g_i, g_j)
    p_hat = expit(net.alpha * r + net.beta)
    value, dp = _loss_and_dp(p_hat, y, spec)
    dt = dp * p_hat * (1 - p_hat)
    dr = (dt * net.alpha)[:, None]
    da_i, da_j = -2.0 * a_i * dr, -2.0 * a_j * dr
    dg_i, dg_j = 2.0 * g_j * dr, 2.0 * g_i * dr
    grads = {
        "alpha": np.array(np.sum(dt * r)),
        "beta": np.array(np.sum(dt)),
        "p_a": z_i.T @ da_i + z_j.T @ da_j,
        "p_g": z_i.T @ dg_i + z_j.T @ dg_j,
    }
    dw = np.zeros_like(net.w)
    for c, rho, ht, da, dg in ((c_i, rho_i, ht_i, da_i, dg_i), (c_j, rho_j, ht_j, da_j, dg_j)):
        dz = da @ net.p_a.T + dg @ net.p_g.T
        # Jacobian of h / ||h|| is (I - ht ht') / ||h||
        dh = (dz - ht * np.sum(ht * dz, axis=-1, keepdims=True)) / rho
        dw += c.T @ dh
    grads["w"] = dw
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    return value, grads


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over the parameters present in ``grads``."""
    state = state.copy()
    state.step += 1
    out = dict(params)
    c1 = 1 - beta1**state.step
    c2 = 1 - beta2**state.step
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        if m.shape != g.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = np.asarray(params[name]) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out, state


# ---------------------------------------------------------------------------
# Initialization


def calibrate(scores, is_target, ridge: float = 1e-6) -> tuple[float, float]:
    """Class-balanced 1-D logistic regression of labels on scores.

    Returns ``(alpha, beta)``. A small L2 penalty on the standardized slope
    keeps the fit bounded on separable scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(is_target, dtype=np.float64)
    n_t, n_n = y.sum(), len(y) - y.sum()
    if n_t == 0 or n_n == 0:
        raise ValueError("calibration needs both classes")
    wts = np.where(y > 0.5, 0.5 / n_t, 0.5 / n_n)
    loc, sd = scores.mean(), scores.std() or 1.0
    s = (scores - loc) / sd

    def objective(theta):
        a, b = theta
        t = a * s + b
        # log(1 + exp(-t)) for targets, log(1 + exp(t)) for nontargets
        sign = 2 * y - 1
        loss = np.sum(wts * np.logaddexp(0.0, -sign * t)) + 0.5 * ridge * a * a
        q = -sign * expit(-sign * t) * wts
        return loss, np.array([np.sum(q * s) + ridge * a, np.sum(q)])

    res = minimize(objective, np.array([1.0, 0.0]), jac=True, method="BFGS", options={"gtol": 1e-10})
    a, b = res.x
    return float(a / sd), float(b - a * loc / sd)


def init_from_jb(
    lda: LdaTransform,
    jb: JbModel,
    k: int | None = None,
    features: EmbeddingSet | None = None,
    trials: TrialList | None = None,
) -> SiamNet:
    """Network whose raw score reproduces the JB score on the same features.

    When ``features``/``trials`` are given, ``(alpha, beta)`` are calibrated on
    them; otherwise they default to ``(1, 0)``.
    """
    if lda.out_dim != jb.dim:
        raise ValueError(f"LDA output dim {lda.out_dim} != JB dim {jb.dim}")
    fa = factor_neg_semidefinite(jb.a_mat, k)
    fg = factor_neg_semidefinite(jb.g_mat, k)
    for name, f in (("A", fa), ("G", fg)):
        if f.clamped_rank:
            log.warning("-%s was not PSD: %d eigenvalue(s) clamped", name, f.clamped_rank)
    net = SiamNet(lda.w.copy(), lda.input_mean.copy(), fa.p, fg.p, 1.0, 0.0, jb.mean.copy())
    if features is not None and trials is not None and len(trials):
        r, _ = forward(net, features.rows[trials.i], features.rows[trials.j])
        net.alpha, net.beta = calibrate(r, trials.is_target)
    return net


def init_random(d: int, d_out: int, k: int | None = None, seed: int = 0) -> SiamNet:
    """Glorot-uniform weights, ``alpha = 1``, ``beta = 0``, zero means."""
    k = d_out if k is None else k
    if min(d, d_out, k) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(np.uint64(seed))

    def glorot(fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    return SiamNet(glorot(d, d_out), np.zeros(d), glorot(d_out, k), glorot(d_out, k))


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    batch_size: int = 4096
    epochs: int = 50
    val_fraction: float = 0.1
    loss: str = "bce"
    ebr_prior: float = 0.5
    ebr_cost_miss: float = 1.0
    ebr_cost_fa: float = 1.0
    pos_frac_per_batch: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    freeze_lda: bool = False
    val_split: str = "speakers"

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not 0 < self.pos_frac_per_batch < 1:
            raise ValueError("pos_frac_per_batch must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 2 or self.epochs < 0:
            raise ValueError("batch_size must be >= 2 and epochs >= 0")
        LossSpec(self.loss)
        if self.val_split not in ("speakers", "trials"):
            raise ValueError("val_split must be 'speakers' or 'trials'")

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.loss, self.ebr_prior, self.ebr_cost_miss, self.ebr_cost_fa)


@dataclass
class TrainHistory:
    """Row 0 evaluates the initial net; row e the net after epoch e."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_eer: list[float] = field(default_factory=list)
    selected_epoch: int = 0
    stop_reason: str = "completed"

    def save(self, path) -> None:
        with atomic_write(path) as fh:
            fh.write(f"# selected_epoch {self.selected_epoch} stop {self.stop_reason}\n")
            fh.write("# epoch train_loss val_loss val_eer\n")
            for e, row in enumerate(zip(self.train_loss, self.val_loss, self.val_eer)):
                fh.write(f"{e} " + " ".join(fmt(v) for v in row) + "\n")


def split_trials(
    trials: TrialList,
    val_fraction: float,
    seed: int,
    speaker_index: np.ndarray | None = None,
) -> tuple[TrialList, TrialList]:
    """Seeded train/validation split of a trial list.

    With ``speaker_index`` the split is speaker-disjoint: ``val_fraction`` of
    the speakers are held out, and trials pairing a held-out speaker with a
    training speaker are dropped.
    """
    rng = np.random.default_rng(np.uint64(seed))
    if speaker_index is None:
        perm = rng.permutation(len(trials))
        n_val = int(round(val_fraction * len(trials)))
        val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        return trials.take(tr), trials.take(val)
    n_spk = int(speaker_index.max()) + 1
    n_val = min(max(1, int(round(val_fraction * n_spk))), n_spk - 1)
    held = np.zeros(n_spk, dtype=bool)
    held[rng.permutation(n_spk)[:n_val]] = True
    vi, vj = held[speaker_index[trials.i]], held[speaker_index[trials.j]]
    return trials.take(~vi & ~vj), trials.take(vi & vj)


def evaluate(net: SiamNet, x: np.ndarray, trials: TrialList, spec: LossSpec) -> tuple[float, float]:
    """(loss, EER) of the calibrated logit ``alpha * r + beta`` on ``trials``."""
    r, p_hat = forward(net, x[trials.i], x[trials.j])
    value = _loss_and_dp(p_hat, trials.is_target.astype(float), spec)[0]
    e, _ = eer(ScoreSet(net.alpha * r + net.beta, trials.is_target))
    return value, e


def _batches(pos: np.ndarray, neg: np.ndarray, n_batches: int, n_pos: int, n_neg: int, rng):
    pos = pos[rng.permutation(len(pos))]
    neg = neg[rng.permutation(len(neg))]
    for b in range(n_batches):
        ip = np.arange(b * n_pos, (b + 1) * n_pos) % len(pos)
        ineg = np.arange(b * n_neg, (b + 1) * n_neg) % len(neg)
        yield np.concatenate([pos[ip], neg[ineg]])


def train(net: SiamNet, features: EmbeddingSet, trials: TrialList, config: TrainConfig):
    """Mini-batch Adam training with best-validation-EER model selection."""
    trials.validate(features)
    spk = features.speaker_index()[1] if config.val_split == "speakers" else None
    tr, val = split_trials(trials, config.val_fraction, config.seed, spk)
    for name, part in (("training", tr), ("validation", val)):
        if part.num_target == 0 or part.num_nontarget == 0:
            raise ValueError(f"{name} split needs both target and nontarget trials")
    x = features.rows
    spec = config.loss_spec()
    rng = np.random.default_rng(np.uint64(config.seed) + np.uint64(1))
    pos, neg = np.flatnonzero(tr.is_target), np.flatnonzero(~tr.is_target)
    n_pos = min(max(1, int(round(config.pos_frac_per_batch * config.batch_size))), config.batch_size - 1)
    n_neg = config.batch_size - n_pos
    n_batches = max(1, math.ceil(len(tr) / config.batch_size))
    trainable = [n for n in PARAM_NAMES if not (config.freeze_lda and n == "w")]

    hist = TrainHistory()
    tl, _ = evaluate(net, x, tr, spec)
    vl, ve = evaluate(net, x, val, spec)
    hist.train_loss.append(tl)
    hist.val_loss.append(vl)
    hist.val_eer.append(ve)
    best, best_eer, since_best = net.copy(), ve, 0
    state = AdamState()
    current = net.copy()
    for epoch in range(1, config.epochs + 1):
        losses = []
        try:
            for idx in _batches(pos, neg, n_batches, n_pos, n_neg, rng):
                value, grads = backward(current, x[tr.i[idx]], x[tr.j[idx]], tr.is_target[idx], spec)
                if not math.isfinite(value):
                    raise FloatingPointError("non-finite training loss")
                params, state = adam_step(
                    current.params(),
                    {n: grads[n] for n in trainable},
                    state,
                    config.learning_rate,
                    config.adam_beta1,
                    config.adam_beta2,
                    config.adam_eps,
                )
                current = current.with_params(params)
                losses.append(value)
            vl, ve = evaluate(current, x, val, spec)
            if not (math.isfinite(vl) and math.isfinite(ve)):
                raise FloatingPointError("non-finite validation loss")
        except (FloatingPointError, ValueError) as exc:
            log.warning("training diverged at epoch %d: %s", epoch, exc)
            hist.stop_reason = "diverged"
            break
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_loss.append(vl)
        hist.val_eer.append(ve)
        log.info("epoch %d train_loss %.6f val_loss %.6f val_eer %.4f", epoch, hist.train_loss[-1], vl, ve)
        if ve < best_eer:
            best, best_eer, since_best = current.copy(), ve, 0
            hist.selected_epoch = epoch
        else:
            since_best += 1
            if config.patience and since_best >= config.patience:
                hist.stop_reason = "early_stop"
                break
    return best, hist
