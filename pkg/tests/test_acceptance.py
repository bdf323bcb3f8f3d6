"""Exit criteria. Each test records a PASS/FAIL line shown in the terminal summary."""

import json
import time

import numpy as np
import pytest

from conftest import central_diff, record_criterion, rel_err
from test_losses import reference_batch_loss
from svsl.cli import main
from svsl.data import Dataset, normalize_mean_std, read_idx, write_idx
from svsl.experiments import EVAL_SEEDS, SeedOutcome, ToySuite, tune_alpha
from svsl.losses import SvslConfig, total_loss
from svsl.metrics import (
    class_means_two_pass,
    compute_class_means,
    early_exit_eval,
    ncc_mismatch,
    ncc_predict,
)
from svsl.model import backward, forward_with_trace, init_network, mlp_specs
from svsl.numerics import make_rng
from svsl.training import latch_it

SUITE = ToySuite()


def _grad_case(seed):
    """Random MLP (<= 3 layers, widths <= 16), batch <= 8, SVSL with random alpha/gamma,
    redrawn until every ReLU pre-activation is at least 1e-3 from the kink."""
    rng = make_rng(seed)
    while True:
        k = int(rng.integers(2, 4))
        widths = [int(w) for w in rng.integers(2, 17, size=k + 1)]
        p = init_network(widths[0], mlp_specs(widths[1:-1], widths[-1]), rng)
        for b in p.biases:
            b[:] = rng.standard_normal(b.shape) * 0.1
        B = int(rng.integers(2, 9))
        X = rng.standard_normal((B, widths[0]))
        y = rng.integers(0, min(widths[-1], 3), size=B)
        cfg = SvslConfig(alpha=float(10 ** rng.uniform(-4, -1)), gamma=int(rng.integers(1, k)))
        tr = forward_with_trace(p, X)
        if all(np.abs(z).min() > 1e-3 for z, a in zip(tr.pre, p.activations) if a == "relu"):
            return p, X, y, cfg, tr


def _flat_fd(p, f):
    return np.concatenate([central_diff(f, a, 1e-5).ravel() for pair in zip(p.weights, p.biases) for a in pair])


def test_c1_gradient_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        p, X, y, cfg, tr = _grad_case(seed)
        lb = total_loss(tr, y, cfg)
        g = backward(p, tr, lb.logit_grad, lb.adjoints).flat()
        num = _flat_fd(p, lambda: total_loss(forward_with_trace(p, X), y, cfg).total)
        worst = max(worst, rel_err(g, num))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 30
    record_criterion("C1 gradient oracle", ok, f"max rel err {worst:.2e} (< 1e-6), {elapsed:.1f}s (< 30s)")
    assert ok


def test_c2_mean_gradient_equivalence():
    worst = 0.0
    for seed in range(20):
        p, X, y, cfg, tr = _grad_case(seed)
        lb = total_loss(tr, y, cfg)
        g = backward(p, tr, lb.logit_grad, lb.adjoints).flat()
        num = _flat_fd(p, lambda: reference_batch_loss(p, X, y, cfg.alpha, cfg.gamma))
        worst = max(worst, rel_err(g, num))
    ok = worst < 1e-6
    record_criterion("C2 mean-gradient equivalence", ok, f"max rel err {worst:.2e} (< 1e-6)")
    assert ok


@pytest.fixture(scope="module")
def toy_runs():
    t0 = time.perf_counter()
    outcomes = {s: SeedOutcome(s, SUITE.run(s)) for s in EVAL_SEEDS}
    return outcomes, time.perf_counter() - t0


@pytest.fixture(scope="module")
def paired_runs(toy_runs):
    outcomes, _ = toy_runs
    alpha, scores = tune_alpha(SUITE)
    for s, o in outcomes.items():
        o.svsl = SUITE.run(s, alpha, gamma=1)
    return outcomes, alpha, scores


@pytest.mark.slow
def test_c3_layer_ordering(toy_runs):
    outcomes, elapsed = toy_runs
    accs = [o.vanilla.eot.test_accuracy for o in outcomes.values()]
    holds = [o.ordering["train"] and o.ordering["test"] for o in outcomes.values()]
    in_band = all(0.85 <= a <= 0.98 for a in accs)
    ok = sum(holds) >= 4 and in_band and elapsed < 300
    record_criterion("C3 layer ordering", ok,
                     f"{sum(holds)}/5 seeds ordered at slack 0.02; vanilla EOT test acc "
                     f"{min(accs):.3f}..{max(accs):.3f} (band 0.85..0.98); {elapsed:.0f}s (< 300s)")
    assert ok


@pytest.mark.slow
def test_c4_it_to_eot(toy_runs):
    outcomes, _ = toy_runs
    checks = [o.it_to_eot for o in outcomes.values()]
    holds = [c.holds is True for c in checks]
    ok = sum(holds) >= 4
    record_criterion("C4 IT->EOT improvement", ok,
                     f"{sum(holds)}/5 seeds with Lambda_EOT <= Lambda_IT + 0.02 on every layer and split; "
                     f"IT epochs {[o.vanilla.it_epoch for o in outcomes.values()]}")
    assert ok


@pytest.mark.slow
def test_c5_svsl_lowers_mismatch(paired_runs):
    outcomes, alpha, _ = paired_runs
    deltas = [o.comparison.mean_intermediate_test_delta() for o in outcomes.values()]
    n = sum(d >= 0 for d in deltas)
    ok = n >= 4
    record_criterion("C5 SVSL lowers intermediate mismatch", ok,
                     f"alpha={alpha:g}, gamma=1; {n}/5 seeds with mean delta >= 0; deltas "
                     + ", ".join(f"{d:+.4f}" for d in deltas))
    assert ok


@pytest.mark.slow
def test_c6_svsl_test_accuracy(paired_runs):
    outcomes, alpha, scores = paired_runs
    deltas = [o.comparison.eot_test_accuracy_delta for o in outcomes.values()]
    every = all(d >= -0.0025 for d in deltas)
    mean_better = np.mean([o.svsl.eot.test_accuracy for o in outcomes.values()]) > \
        np.mean([o.vanilla.eot.test_accuracy for o in outcomes.values()])
    ok = every and mean_better
    record_criterion("C6 SVSL EOT test accuracy", ok,
                     f"alpha={alpha:g} (tuning-seed mean gains "
                     + ", ".join(f"{a:g}:{v:+.4f}" for a, v in scores.items())
                     + "); per-seed deltas " + ", ".join(f"{d:+.3f}" for d in deltas)
                     + f" (each >= -0.0025: {every}); seed-mean strictly higher: {mean_better}")
    assert ok


SMALL_CFG = """
[dataset]
kind = gaussian
sigma = 0.4
n_train_per_class = 100
n_test_per_class = 50
[model]
hidden_widths = 32,32,32
[train]
epochs = 25
batch_size = 32
lr = 0.02
probe_every = 5
seed = 7
"""


def test_c7_alpha_zero_reduction(tmp_path):
    (tmp_path / "v.ini").write_text(SMALL_CFG + "[loss]\nmode = vanilla\n")
    (tmp_path / "s.ini").write_text(SMALL_CFG + "[loss]\nmode = svsl\nalpha = 0.0\ngamma = 1\n")
    assert main(["train", "--config", str(tmp_path / "v.ini"), "--out", str(tmp_path / "v")]) == 0
    assert main(["train", "--config", str(tmp_path / "s.ini"), "--out", str(tmp_path / "s")]) == 0
    ok = (tmp_path / "v" / "metrics.csv").read_bytes() == (tmp_path / "s" / "metrics.csv").read_bytes()
    record_criterion("C7 alpha=0 reduction", ok, "metrics.csv byte-identical" if ok else "metrics.csv differs")
    assert ok


def test_c8_ncc_oracle_and_streaming_means():
    rng = make_rng(8)
    mismatches = 0
    for _ in range(10_000):
        C, d = int(rng.integers(2, 11)), int(rng.integers(1, 9))
        means = rng.standard_normal((C, d)) * rng.uniform(0.1, 10)
        if rng.random() < 0.1:
            pt = means[int(rng.integers(C))].copy()
        else:
            pt = rng.standard_normal(d) * 3
        dists = [sum((float(a) - float(b)) ** 2 for a, b in zip(pt, mu)) for mu in means]
        brute = min(range(C), key=lambda c: (dists[c], c))
        mismatches += ncc_predict(pt, means) != brute
    p = init_network(6, mlp_specs([16, 16], 5), rng)
    ds = Dataset(rng.standard_normal((3000, 6)) * 4, rng.integers(0, 5, 3000), 5)
    a, b = compute_class_means(p, ds, chunk=97), class_means_two_pass(p, ds)
    worst = max(np.abs(a.means[j] - b.means[j]).max() for j in a.layers)
    ok = mismatches == 0 and worst <= 1e-9
    record_criterion("C8 NCC oracle / streaming means", ok,
                     f"{mismatches} disagreements in 10^4 instances; max mean diff {worst:.1e} (<= 1e-9)")
    assert ok


def test_c9_it_latching():
    cases = [
        ([0.90, 0.996, 0.990, 0.997], 1, [False, True, True, True]),
        ([0.5, 0.995, 0.2, 0.1], 1, [False, True, True, True]),
        ([0.9949, 0.99, 0.98], None, [False, False, False]),
        ([1.0, 0.0], 0, [True, True]),
    ]
    ok = all(latch_it(acc, 0.995) == (it, flags) for acc, it, flags in cases)
    rng = make_rng(9)
    for _ in range(200):
        acc = rng.uniform(0.98, 1.0, int(rng.integers(1, 30)))
        it, flags = latch_it(acc, 0.995)
        first = next((i for i, a in enumerate(acc) if a >= 0.995), None)
        ok &= it == first and flags == sorted(flags) and flags == [first is not None and i >= first
                                                                   for i in range(len(acc))]
    record_criterion("C9 IT latching at 0.995", ok, "hand traces + 200 random traces")
    assert ok


def test_c10_data_layer(tmp_path):
    rng = make_rng(10)
    imgs = rng.integers(0, 256, (5, 4, 3)).astype(np.uint8)
    labels = rng.integers(0, 10, 5).astype(np.uint8)
    write_idx(imgs, labels, tmp_path / "i", tmp_path / "l")
    ds = read_idx(tmp_path / "i", tmp_path / "l", num_classes=10)
    roundtrip = np.array_equal(np.round(ds.X * 255).astype(np.uint8).reshape(5, 4, 3), imgs) and \
        np.array_equal(ds.y, labels)
    X = rng.standard_normal((200, 6)) * rng.uniform(0.01, 100, 6) + rng.uniform(-50, 50, 6)
    X[:, 4] = 3.0
    (n,), _ = normalize_mean_std(Dataset(X, rng.integers(0, 2, 200), 2))
    live = [0, 1, 2, 3, 5]
    m = np.abs(n.X[:, live].mean(axis=0)).max()
    s = np.abs(n.X[:, live].std(axis=0) - 1).max()
    const = bool(np.all(n.X[:, 4] == 0))
    ok = roundtrip and m < 1e-9 and s < 1e-9 and const
    record_criterion("C10 data layer", ok, f"IDX round-trip {roundtrip}; |mean| {m:.1e}, |std-1| {s:.1e}; "
                                           f"constant->0 {const}")
    assert ok


def test_c11_early_exit_identity(tmp_path):
    (tmp_path / "c.ini").write_text(SMALL_CFG)
    assert main(["train", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "r")]) == 0
    from svsl.config import load_config
    from svsl.model import load_params
    from svsl.records import load_means, load_run

    cfg = load_config(tmp_path / "r" / "config.echo")
    train, test = cfg.load_datasets()
    params = load_params(tmp_path / "r" / "params_eot.bin")
    means = load_means(tmp_path / "r" / "means_eot.npz")
    eot = load_run(tmp_path / "r").eot
    ok = True
    for split, ds, lam in (("train", train, eot.lambda_train), ("test", test, eot.lambda_test)):
        for j in sorted(lam):
            ok &= early_exit_eval(params, ds, means, j).agreement_with_classifier == 1.0 - lam[j]
            ok &= ncc_mismatch(params, ds, means).rates[j] == lam[j]
    record_criterion("C11 early-exit agreement = 1 - Lambda", ok, f"{2 * len(eot.lambda_train)} layer/split pairs")
    assert ok


def test_c12_determinism(tmp_path):
    (tmp_path / "c.ini").write_text(SMALL_CFG + "[loss]\nmode = svsl\nalpha = 0.1\n")
    for name in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / name)]) == 0
    ok = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
             for f in ("metrics.csv", "summary.json"))
    record_criterion("C12 determinism", ok, "metrics.csv and summary.json byte-identical" if ok else "outputs differ")
    assert ok
