"""Command-line pipeline: gen-synth, fit, train, score, eval, ablate.

Configuration is a ``key = value`` text file (``#`` comments). Flags given on
the command line override file values; ``--set key=value`` overrides any key.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data_io as dio
from .jb import ABLATION_VARIANTS, VARIANTS, JbModel, MahalanobisModel
from .lda import LdaTransform
from .metrics import DcfParams, metrics_report
from .pipeline import (
    balanced_trials,
    fit_baseline,
    fit_md,
    jb_trial_scores,
    md_trial_scores,
    metric_row,
    net_trial_scores,
    random_init_for,
)
from .siamnn import SiamNet, TrainConfig, init_from_jb, split_trials, train

log = logging.getLogger("jbsiam")


class ConfigError(ValueError):
    pass


def _opt_float(text: str):
    return None if text.lower() in ("", "none") else float(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.lower() in ("", "none") else int(text)


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    # gen-synth
    "dim": (int, 16),
    "num_speakers": (int, 10),
    "samples_per_speaker": (int, 5),
    "sigma_u": (str, ""),
    "sigma_n": (str, ""),
    "cov_seed": (int, 0),
    "speaker_prefix": (str, "spk"),
    "synth_out": (str, "embeddings.txt"),
    # fit
    "embeddings": (str, "embeddings.txt"),
    "out_dim": (int, 8),
    "lda_ridge": (_opt_float, None),
    "em_max_iters": (int, 200),
    "em_tol": (float, 1e-6),
    "out_dir": (str, "model"),
    "lda": (str, ""),
    "jb": (str, ""),
    "md": (str, ""),
    "md_ridge": (float, 1e-6),
    # train
    "init": (str, "jb"),
    "width": (_opt_int, None),
    "trials": (str, ""),
    "num_target": (int, 20000),
    "num_nontarget": (int, 80000),
    "epochs": (int, 50),
    "learning_rate": (float, 0.0005),
    "batch_size": (int, 4096),
    "val_fraction": (float, 0.1),
    "val_split": (str, "speakers"),
    "loss": (str, "bce"),
    "ebr_prior": (float, 0.5),
    "ebr_cost_miss": (float, 1.0),
    "ebr_cost_fa": (float, 1.0),
    "pos_frac_per_batch": (float, 0.5),
    "patience": (int, 10),
    "freeze_lda": (_bool, False),
    "net": (str, ""),
    "history": (str, ""),
    # score
    "backend": (str, "jb"),
    "variant": (str, "full"),
    "score_embeddings": (str, ""),
    "score_trials": (str, ""),
    "eval_num_target": (int, 10000),
    "eval_num_nontarget": (int, 20000),
    "scores": (str, "scores.txt"),
    # eval
    "p_target1": (float, 0.01),
    "p_target2": (float, 0.001),
    "c_miss": (float, 1.0),
    "c_fa": (float, 1.0),
    "report": (str, ""),
    # ablate
    "ablation": (str, "ablation.txt"),
}

# which key --out overrides for each command
OUT_KEY = {
    "gen-synth": "synth_out",
    "fit": "out_dir",
    "train": "net",
    "score": "scores",
    "eval": "report",
    "ablate": "ablation",
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw: dict[str, str]) -> dict:
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            cfg[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return cfg


def load_config(args) -> dict:
    raw: dict[str, str] = {}
    if args.config:
        raw.update(parse_config_text(Path(args.config).read_text(encoding="utf-8"), args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        raw[key] = value
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    if args.out is not None:
        raw[OUT_KEY[args.command]] = args.out
    for flag in ("init", "backend", "variant", "epochs"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = str(value)
    return resolve_config(raw)


def _model_paths(cfg) -> tuple[Path, Path, Path]:
    out = Path(cfg["out_dir"])
    lda = Path(cfg["lda"]) if cfg["lda"] else out / "lda.txt"
    jb = Path(cfg["jb"]) if cfg["jb"] else out / "jb.txt"
    md = Path(cfg["md"]) if cfg["md"] else out / "md.txt"
    return lda, jb, md


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        val_fraction=cfg["val_fraction"],
        loss=cfg["loss"],
        ebr_prior=cfg["ebr_prior"],
        ebr_cost_miss=cfg["ebr_cost_miss"],
        ebr_cost_fa=cfg["ebr_cost_fa"],
        pos_frac_per_batch=cfg["pos_frac_per_batch"],
        seed=cfg["seed"],
        patience=cfg["patience"],
        freeze_lda=cfg["freeze_lda"],
        val_split=cfg["val_split"],
    )


def _train_trials(cfg, emb: dio.EmbeddingSet) -> dio.TrialList:
    if cfg["trials"]:
        trials = dio.load_trials(cfg["trials"])
        trials.validate(emb)
        return trials
    return balanced_trials(emb, cfg["num_target"], cfg["num_nontarget"], cfg["seed"])


def _score_data(cfg) -> tuple[dio.EmbeddingSet, dio.TrialList]:
    emb = dio.load_embeddings(cfg["score_embeddings"] or cfg["embeddings"])
    if cfg["score_trials"]:
        trials = dio.load_trials(cfg["score_trials"])
        trials.validate(emb)
    else:
        trials = balanced_trials(emb, cfg["eval_num_target"], cfg["eval_num_nontarget"], cfg["seed"] + 1)
    return emb, trials


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_synth(cfg, out=sys.stdout) -> None:
    dim = cfg["dim"]
    cov_seed = cfg["cov_seed"]
    header = [f"gen-synth dim={dim} num_speakers={cfg['num_speakers']} "
              f"samples_per_speaker={cfg['samples_per_speaker']} seed={cfg['seed']}"]
    if cfg["sigma_u"] and cfg["sigma_n"]:
        sigma_u, sigma_n = dio.read_matrix(cfg["sigma_u"]), dio.read_matrix(cfg["sigma_n"])
    elif cfg["sigma_u"] or cfg["sigma_n"]:
        raise ConfigError("give both sigma_u and sigma_n, or neither")
    else:
        sigma_u, sigma_n = dio.default_covariances(dim, cov_seed)
        header.append(f"default covariances cov_seed={cov_seed}")
    spec = dio.SynthSpec(dim, cfg["num_speakers"], cfg["samples_per_speaker"], sigma_u, sigma_n,
                         cfg["seed"], cfg["speaker_prefix"])
    emb = dio.generate_synthetic(spec)
    dio.save_embeddings(emb, cfg["synth_out"], header)
    print(f"wrote {len(emb)} embeddings to {cfg['synth_out']}", file=out)


def cmd_fit(cfg, out=sys.stdout) -> None:
    emb = dio.load_embeddings(cfg["embeddings"])
    base = fit_baseline(emb, cfg["out_dim"], cfg["lda_ridge"], cfg["em_max_iters"], cfg["em_tol"])
    for it, ll in enumerate(base.em.history):
        print(f"em {it} loglik {dio.fmt(ll)}", file=out)
    lda_path, jb_path, md_path = _model_paths(cfg)
    base.lda.save(lda_path)
    base.jb.save(jb_path)
    trials = _train_trials(cfg, emb)
    fit_md(base.lda, base.jb, emb, trials, cfg["md_ridge"]).save(md_path)
    print(f"wrote {lda_path} {jb_path} {md_path}", file=out)


def _load_models(cfg):
    lda_path, jb_path, _ = _model_paths(cfg)
    return LdaTransform.load(lda_path), JbModel.load(jb_path)


def cmd_train(cfg, out=sys.stdout) -> None:
    emb = dio.load_embeddings(cfg["embeddings"])
    lda, jb = _load_models(cfg)
    trials = _train_trials(cfg, emb)
    tc = _train_config(cfg)
    if cfg["init"] == "jb":
        net = init_from_jb(lda, jb, cfg["width"], emb, trials)
    elif cfg["init"] == "random":
        net = random_init_for(emb, lda.out_dim, cfg["width"], cfg["seed"])
    else:
        raise ConfigError(f"init must be jb or random, got {cfg['init']!r}")
    trained, hist = train(net, emb, trials, tc)
    if cfg["init"] == "jb":
        spk = emb.speaker_index()[1] if tc.val_split == "speakers" else None
        _, val = split_trials(trials, tc.val_fraction, tc.seed, spk)
        base_eer = metric_row(jb_trial_scores(lda, jb, emb.rows, val), val)[0]
        print(f"baseline val_eer {dio.fmt(base_eer)}", file=out)
    for e, (tl, vl, ve) in enumerate(zip(hist.train_loss, hist.val_loss, hist.val_eer)):
        print(f"epoch {e} train_loss {dio.fmt(tl)} val_loss {dio.fmt(vl)} val_eer {dio.fmt(ve)}", file=out)
    print(f"selected epoch {hist.selected_epoch} ({hist.stop_reason})", file=out)
    net_path = cfg["net"] or str(Path(cfg["out_dir"]) / "siamnn.txt")
    trained.save(net_path)
    hist.save(cfg["history"] or net_path + ".history")


def cmd_score(cfg, out=sys.stdout) -> None:
    emb, trials = _score_data(cfg)
    backend, variant = cfg["backend"], cfg["variant"]
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    if backend == "jb":
        lda, jb = _load_models(cfg)
        scores = jb_trial_scores(lda, jb, emb.rows, trials, variant)
    elif backend == "md":
        if variant != "full":
            raise ConfigError("the md backend has no A/G variants")
        lda, jb = _load_models(cfg)
        scores = md_trial_scores(lda, jb, MahalanobisModel.load(_model_paths(cfg)[2]), emb.rows, trials)
    elif backend == "siamnn":
        net = SiamNet.load(cfg["net"] or str(Path(cfg["out_dir"]) / "siamnn.txt"))
        scores = net_trial_scores(net, emb.rows, trials, variant)
    else:
        raise ConfigError(f"backend must be jb, md or siamnn, got {backend!r}")
    dio.write_scores(trials, scores, emb.utterance_ids(), cfg["scores"])
    print(f"wrote {len(trials)} scores to {cfg['scores']}", file=out)


def _dcfs(cfg) -> tuple[DcfParams, DcfParams]:
    return (DcfParams(cfg["p_target1"], cfg["c_miss"], cfg["c_fa"]),
            DcfParams(cfg["p_target2"], cfg["c_miss"], cfg["c_fa"]))


def cmd_eval(cfg, out=sys.stdout) -> None:
    s = dio.read_scores(cfg["scores"])
    s.check_both_classes()
    line = metrics_report(s, *_dcfs(cfg))
    print(line, file=out)
    if cfg["report"]:
        with dio.atomic_write(cfg["report"]) as fh:
            fh.write(line + "\n")


def cmd_ablate(cfg, out=sys.stdout) -> None:
    emb = dio.load_embeddings(cfg["embeddings"])
    lda, jb = _load_models(cfg)
    ev, ev_trials = _score_data(cfg)
    trials = _train_trials(cfg, emb)
    before = init_from_jb(lda, jb, cfg["width"], emb, trials)
    if cfg["net"]:
        after = SiamNet.load(cfg["net"])
    else:
        after, _ = train(before, emb, trials, _train_config(cfg))
    dcf1, dcf2 = _dcfs(cfg)
    lines = ["stage variant EER minDCF1 minDCF2"]
    for stage, net in (("before", before), ("after", after)):
        for v in ABLATION_VARIANTS:
            e, d1, d2 = metric_row(net_trial_scores(net, ev.rows, ev_trials, v), ev_trials, dcf1, dcf2)
            lines.append(f"{stage} {v} {100 * e:.4f} {d1:.4f} {d2:.4f}")
    with dio.atomic_write(cfg["ablation"]) as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines), file=out)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "fit": cmd_fit,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jbsiam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        if name == "train":
            p.add_argument("--init", choices=("jb", "random"))
            p.add_argument("--epochs", type=int)
        if name == "score":
            p.add_argument("--backend", choices=("jb", "md", "siamnn"))
            p.add_argument("--variant", choices=VARIANTS)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg, out)
    except (ValueError, OSError, FloatingPointError, np.linalg.LinAlgError) as exc:
        msg = " ".join(str(exc).split())
        print(f"jbsiam {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
