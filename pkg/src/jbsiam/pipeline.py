"""End-to-end glue: baseline fitting, feature preparation, scoring, benchmarks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data_io import (
    EmbeddingSet,
    ScoreSet,
    SynthSpec,
    TrialList,
    count_pairs,
    default_covariances,
    generate_synthetic,
    make_trials,
)
from .jb import ABLATION_VARIANTS, EmResult, JbModel, fit_jb_em, md_score, mahalanobis_from_stats, score_variant
from .lda import LdaTransform, apply_lda, fit_lda, length_normalize
from .metrics import DCF1, DCF2, DcfParams, eer, min_dcf
from .siamnn import SiamNet, TrainConfig, TrainHistory, init_from_jb, init_random, train, variant_scores

log = logging.getLogger(__name__)


def project_normalize(lda: LdaTransform, x: np.ndarray) -> np.ndarray:
    return length_normalize(apply_lda(lda, x))


def jb_features(lda: LdaTransform, jb: JbModel, x: np.ndarray) -> np.ndarray:
    """LDA projection, length normalization, then the baseline's re-centering."""
    return jb.center(project_normalize(lda, x))


@dataclass
class Baseline:
    lda: LdaTransform
    jb: JbModel
    em: EmResult


def fit_baseline(
    train_set: EmbeddingSet,
    out_dim: int,
    lda_ridge: float | None = None,
    em_max_iters: int = 200,
    em_tol: float = 1e-6,
) -> Baseline:
    lda = fit_lda(train_set, out_dim, lda_ridge)
    feats = project_normalize(lda, train_set.rows)
    mean = feats.mean(axis=0)
    em = fit_jb_em(train_set.with_rows(feats - mean), em_max_iters, em_tol)
    jb = JbModel(em.model.sigma_u, em.model.sigma_n, mean)
    return Baseline(lda, jb, em)


def jb_trial_scores(lda, jb, x, trials: TrialList, variant: str = "full") -> np.ndarray:
    z = jb_features(lda, jb, x)
    return score_variant(jb.a_mat, jb.g_mat, variant, z[trials.i], z[trials.j])


def md_trial_scores(lda, jb, md, x, trials: TrialList) -> np.ndarray:
    z = jb_features(lda, jb, x)
    return md_score(md, z[trials.i], z[trials.j])


def net_trial_scores(net: SiamNet, x, trials: TrialList, variant: str = "full") -> np.ndarray:
    return variant_scores(net, variant, x[trials.i], x[trials.j])


def metric_row(scores: np.ndarray, trials: TrialList, dcf1: DcfParams = DCF1, dcf2: DcfParams = DCF2):
    s = ScoreSet(scores, trials.is_target)
    return eer(s)[0], min_dcf(s, dcf1)[0], min_dcf(s, dcf2)[0]


def fit_md(lda, jb, train_set: EmbeddingSet, trials: TrialList, ridge: float = 1e-6):
    return mahalanobis_from_stats(trials, jb_features(lda, jb, train_set.rows), ridge)


def balanced_trials(embeddings: EmbeddingSet, num_target: int, num_nontarget: int, seed: int) -> TrialList:
    """`make_trials` with counts capped at what the set can supply."""
    avail_t, avail_n = count_pairs(embeddings)
    return make_trials(embeddings, min(num_target, avail_t), min(num_nontarget, avail_n), seed)


def random_init_for(train_set: EmbeddingSet, d_out: int, k: int | None, seed: int) -> SiamNet:
    # random weights, but inputs centered on the training data mean
    net = init_random(train_set.dim, d_out, k, seed)
    net.input_mean = train_set.rows.mean(axis=0)
    return net


# ---------------------------------------------------------------------------
# Synthetic benchmark


@dataclass
class BenchmarkConfig:
    dim: int = 64
    out_dim: int = 16
    train_speakers: int = 500
    train_samples: int = 10
    eval_speakers: int = 100
    eval_samples: int = 20
    train_target: int = 20000
    train_nontarget: int = 80000
    eval_target: int = 10000
    eval_nontarget: int = 20000
    seed: int = 1234
    width: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class BenchmarkResult:
    rows: dict = field(default_factory=dict)  # (stage, variant) -> (eer, dcf1, dcf2)
    history_jb: TrainHistory | None = None
    history_random: TrainHistory | None = None
    em_history: list = field(default_factory=list)
    max_forward_rel_err: float = 0.0


def synthetic_corpus(cfg: BenchmarkConfig):
    sigma_u, sigma_n = default_covariances(cfg.dim, cfg.seed)
    tr = generate_synthetic(
        SynthSpec(cfg.dim, cfg.train_speakers, cfg.train_samples, sigma_u, sigma_n, cfg.seed + 1, "trn")
    )
    ev = generate_synthetic(
        SynthSpec(cfg.dim, cfg.eval_speakers, cfg.eval_samples, sigma_u, sigma_n, cfg.seed + 2, "evl")
    )
    return tr, ev


def run_benchmark(cfg: BenchmarkConfig) -> BenchmarkResult:
    """Baseline, JB-init and random-init nets scored on held-out speakers."""
    tr, ev = synthetic_corpus(cfg)
    tr_trials = balanced_trials(tr, cfg.train_target, cfg.train_nontarget, cfg.seed + 3)
    ev_trials = balanced_trials(ev, cfg.eval_target, cfg.eval_nontarget, cfg.seed + 4)
    base = fit_baseline(tr, cfg.out_dim)
    out = BenchmarkResult(em_history=base.em.history)

    out.rows[("baseline", "full")] = metric_row(jb_trial_scores(base.lda, base.jb, ev.rows, ev_trials), ev_trials)
    for v in ABLATION_VARIANTS:
        out.rows[("baseline", v)] = metric_row(jb_trial_scores(base.lda, base.jb, ev.rows, ev_trials, v), ev_trials)

    net0 = init_from_jb(base.lda, base.jb, cfg.width, tr, tr_trials)
    r_net = net_trial_scores(net0, ev.rows, ev_trials)
    r_jb = jb_trial_scores(base.lda, base.jb, ev.rows, ev_trials)
    out.max_forward_rel_err = float(np.max(np.abs(r_net - r_jb) / np.maximum(np.abs(r_jb), 1e-12)))
    for v in ("full",) + ABLATION_VARIANTS:
        out.rows[("before", v)] = metric_row(net_trial_scores(net0, ev.rows, ev_trials, v), ev_trials)

    trained, out.history_jb = train(net0, tr, tr_trials, cfg.train)
    for v in ("full",) + ABLATION_VARIANTS:
        out.rows[("after", v)] = metric_row(net_trial_scores(trained, ev.rows, ev_trials, v), ev_trials)

    rnd = random_init_for(tr, cfg.out_dim, cfg.width, cfg.train.seed)
    rnd_trained, out.history_random = train(rnd, tr, tr_trials, cfg.train)
    out.rows[("random", "full")] = metric_row(net_trial_scores(rnd_trained, ev.rows, ev_trials), ev_trials)
    return out
