"""Acceptance suite. Each test prints one PASS/FAIL line and then asserts."""
import hashlib
import io
import time

import numpy as np
import pytest

from jbsiam import data_io as dio
from jbsiam.cli import main
from jbsiam.data_io import ScoreSet
from jbsiam.factorization import factor_neg_semidefinite
from jbsiam.jb import JbModel, ag_discrepancy, compute_ag, fit_jb_em, jb_score
from jbsiam.metrics import DCF1, DCF2, eer, min_dcf
from jbsiam.pipeline import BenchmarkConfig, balanced_trials, fit_baseline, jb_features, run_benchmark
from jbsiam.siamnn import PARAM_NAMES, LossSpec, backward, batch_loss, forward, init_from_jb

from oracles import (
    brute_eer,
    brute_min_dcf,
    central_differences,
    jb_log_ratio,
    random_spd,
    recovery_design,
)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def benchmark():
    start = time.perf_counter()
    result = run_benchmark(BenchmarkConfig())
    return result, time.perf_counter() - start


def test_c1_jb_scoring_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for trial in range(100):
        d = (2, 4, 8)[trial % 3]
        su, sn = random_spd(d, rng), random_spd(d, rng)
        model = JbModel(su, sn)
        origin = jb_log_ratio(su, sn, np.zeros(d), np.zeros(d))
        for _ in range(5):
            xi, xj = rng.standard_normal(d), rng.standard_normal(d)
            ref = 2 * (jb_log_ratio(su, sn, xi, xj) - origin)
            worst = max(worst, abs(jb_score(model, xi, xj) - ref) / max(abs(ref), 1e-300))
    took = time.perf_counter() - start
    report("1 JB scoring oracle", worst <= 1e-8 and took < 5, f"max rel err {worst:.2e}, {took:.2f}s")


def test_c2_block_inverse_identity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(102)
    worst, asym, rep_max = 0.0, 0.0, {}
    for trial in range(100):
        d = (2, 4, 8)[trial % 3]
        su, sn = random_spd(d, rng), random_spd(d, rng)
        a, g = compute_ag(su, sn)
        inv = np.linalg.inv(np.block([[su + sn, su], [su, su + sn]]))
        a_ref = np.linalg.inv(su + sn) - inv[:d, :d]
        worst = max(worst, np.max(np.abs(a - a_ref)), np.max(np.abs(g - inv[:d, d:])))
        asym = max(asym, np.max(np.abs(a - a.T)), np.max(np.abs(g - g.T)))
        for k, v in ag_discrepancy(su, sn).items():
            rep_max[k] = max(rep_max.get(k, 0.0), v)
    took = time.perf_counter() - start
    disc = ", ".join(f"{k} {v:.1e}" for k, v in rep_max.items())
    ok = worst <= 1e-10 and asym == 0.0 and took < 5
    report("2 A/G block inverse", ok, f"max abs err {worst:.2e}, asym {asym:.1e}; closed forms: {disc}; {took:.2f}s")


def test_c3_factorization_round_trip(report):
    rng = np.random.default_rng(103)
    worst, clamped = 0.0, 0
    for _ in range(100):
        d = int(rng.integers(1, 17))
        q = rng.standard_normal((d, d))
        a = -(q @ q.T)
        f = factor_neg_semidefinite(a)
        worst = max(worst, np.linalg.norm(a + f.p @ f.p.T) / (1 + np.linalg.norm(a)))
        clamped += f.clamped_rank
    report("3 factorization round trip", worst <= 1e-6 and clamped == 0, f"max err {worst:.2e}, clamped {clamped}")


def test_c4_forward_identity(report, benchmark):
    su, sn = dio.default_covariances(32, seed=5)
    tr = dio.generate_synthetic(dio.SynthSpec(32, 100, 8, su, sn, seed=6))
    base = fit_baseline(tr, 12)
    net = init_from_jb(base.lda, base.jb, None, tr, balanced_trials(tr, 2000, 4000, 7))
    rng = np.random.default_rng(104)
    i, j = rng.integers(len(tr), size=(2, 1000))
    r, _ = forward(net, tr.rows[i], tr.rows[j])
    z = jb_features(base.lda, base.jb, tr.rows)
    ref = jb_score(base.jb, z[i], z[j])
    rel = float(np.max(np.abs(r - ref) / np.maximum(np.abs(ref), 1e-12)))
    result, _ = benchmark
    gap = abs(result.rows[("before", "full")][0] - result.rows[("baseline", "full")][0])
    ok = rel <= 1e-6 and gap <= 1e-9 and result.max_forward_rel_err <= 1e-6
    report("4 forward identity", ok, f"max rel err {rel:.2e}, epoch-0 EER gap {gap:.1e}")


def test_c5_gradients(report):
    rng = np.random.default_rng(105)
    from jbsiam.siamnn import init_random

    net = init_random(10, 5, 4, seed=3)
    net.input_mean = 0.1 * rng.standard_normal(10)
    net.norm_mean = 0.1 * rng.standard_normal(5)
    net.alpha, net.beta = 0.8, 0.1
    xi, xj = rng.standard_normal((32, 10)), rng.standard_normal((32, 10))
    y = (np.arange(32) % 3 == 0).astype(float)
    errs = {}
    for kind in ("bce", "ebr"):
        spec = LossSpec(kind, 0.4, 1.0, 2.0)
        _, grads = backward(net, xi, xj, y, spec)
        num = central_differences(lambda p: batch_loss(net.with_params(p), xi, xj, y, spec), net.params(), 1e-5)
        for n in PARAM_NAMES:
            errs[f"{kind}/{n}"] = np.linalg.norm(grads[n] - num[n]) / max(np.linalg.norm(num[n]), 1e-12)
    worst = max(errs, key=errs.get)
    report("5 gradient check", errs[worst] < 1e-4, f"worst {worst} rel err {errs[worst]:.2e}")


def test_c6_em(report):
    start = time.perf_counter()
    su, sn = recovery_design(16, np.random.default_rng(0))
    emb = dio.generate_synthetic(dio.SynthSpec(16, 200, 10, su, sn, seed=100))
    res = fit_jb_em(emb, max_iters=1000)
    took = time.perf_counter() - start
    h = res.history
    mono = all(b >= a - 1e-9 * abs(a) for a, b in zip(h, h[1:]))
    eu = np.linalg.norm(res.model.sigma_u - su) / np.linalg.norm(su)
    en = np.linalg.norm(res.model.sigma_n - sn) / np.linalg.norm(sn)
    ok = mono and eu < 0.15 and en < 0.15 and took < 60
    report("6 EM", ok, f"monotone {mono} over {len(h) - 1} iters, sigma_u err {eu:.3f}, sigma_n err {en:.3f}, {took:.1f}s")


def test_c7_directional_replication(report, benchmark):
    result, took = benchmark
    rows = result.rows
    base, after, rnd = rows[("baseline", "full")][0], rows[("after", "full")][0], rows[("random", "full")][0]
    checks = {
        "a": all(0.40 <= rows[(s, "a_only")][0] <= 0.60 for s in ("baseline", "before", "after")),
        "b": all(rows[(s, "full")][0] < rows[(s, "g_only")][0] for s in ("baseline", "after")),
        "c": after <= base + 0.002,
        "d": rnd >= after,
    }
    detail = (
        f"a_only {rows[('after', 'a_only')][0]:.4f}, g_only {rows[('after', 'g_only')][0]:.4f}, "
        f"baseline {100 * base:.3f}%, jb-init {100 * after:.3f}%, random {100 * rnd:.3f}%, "
        f"checks {checks}, {took:.1f}s"
    )
    report("7 directional replication", all(checks.values()) and took < 600, detail)


def test_c8_metric_oracles(report):
    rng = np.random.default_rng(108)
    worst, affine_ok = 0.0, True
    for _ in range(1000):
        n_t, n_n = rng.integers(1, 26, size=2)
        # coarse grid so ties occur
        tar = np.round(rng.normal(1, 1, n_t), 1)
        non = np.round(rng.normal(0, 1, n_n), 1)
        s = ScoreSet(np.concatenate([tar, non]), np.r_[np.ones(n_t, bool), np.zeros(n_n, bool)])
        e, d1, d2 = eer(s)[0], min_dcf(s, DCF1)[0], min_dcf(s, DCF2)[0]
        worst = max(
            worst,
            abs(e - brute_eer(tar.tolist(), non.tolist())),
            abs(d1 - brute_min_dcf(tar.tolist(), non.tolist(), 0.01)),
            abs(d2 - brute_min_dcf(tar.tolist(), non.tolist(), 0.001)),
        )
        a, b = float(rng.choice([0.5, 2.0, 4.0])), float(rng.integers(-5, 6))
        t = ScoreSet(a * s.scores + b, s.is_target)
        affine_ok &= (eer(t)[0], min_dcf(t, DCF1)[0], min_dcf(t, DCF2)[0]) == (e, d1, d2)
    report("8 metric oracles", worst <= 1e-12 and affine_ok, f"max abs err {worst:.1e}, affine invariant {affine_ok}")


def _digest(paths):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in paths}


def test_c9_cli_determinism(report, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "dim = 16\nnum_speakers = 40\nsamples_per_speaker = 6\nout_dim = 6\n"
        f"synth_out = {tmp_path / 'emb.txt'}\nembeddings = {tmp_path / 'emb.txt'}\n"
        f"out_dir = {tmp_path}\nnum_target = 500\nnum_nontarget = 1500\nbatch_size = 256\n"
        f"scores = {tmp_path / 'scores.txt'}\nablation = {tmp_path / 'ablation.txt'}\n"
        "epochs = 3\npatience = 0\nlearning_rate = 0.005\neval_num_target = 400\neval_num_nontarget = 800\n"
    )
    c = ["--config", str(cfg)]
    commands = [
        ["gen-synth", *c, "--seed", "11"],
        ["gen-synth", *c, "--seed", "12", "--out", str(tmp_path / "eval.txt")],
        ["fit", *c],
        ["train", *c, "--init", "jb"],
        ["train", *c, "--init", "random", "--out", str(tmp_path / "rand.txt")],
        ["score", *c, "--set", f"score_embeddings={tmp_path / 'eval.txt'}"],
        ["score", *c, "--set", f"score_embeddings={tmp_path / 'eval.txt'}", "--backend", "md",
         "--out", str(tmp_path / "md_scores.txt")],
        ["score", *c, "--set", f"score_embeddings={tmp_path / 'eval.txt'}", "--backend", "siamnn",
         "--variant", "g_only", "--out", str(tmp_path / "nn_scores.txt")],
        ["eval", *c, "--set", f"scores={tmp_path / 'scores.txt'}", "--out", str(tmp_path / "report.txt")],
        ["ablate", *c, "--set", f"score_embeddings={tmp_path / 'eval.txt'}"],
    ]

    def run_all():
        logs = []
        for argv in commands:
            buf = io.StringIO()
            assert main(argv, out=buf) == 0, argv
            logs.append(buf.getvalue())
        files = [p for p in tmp_path.iterdir() if p.name != "run.cfg"]
        return _digest(files), logs

    first, logs1 = run_all()
    second, logs2 = run_all()
    same = first == second and logs1 == logs2
    report("9 CLI determinism", same and len(first) >= 12, f"{len(first)} output files, identical {same}")
