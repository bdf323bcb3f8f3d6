import dataclasses

import numpy as np
import pytest

from svsl.data import GaussianMixtureSpec, generate_gaussian_mixture, normalize_mean_std
from svsl.losses import SvslConfig
from svsl.metrics import early_exit_eval, nc4_gap
from svsl.numerics import ContractError
from svsl.training import (
    EpochRecord,
    ModelSpec,
    RunResult,
    TrainConfig,
    check_it_to_eot,
    check_record_ordering,
    compare_runs,
    latch_it,
    run_experiment,
)


def toy(C=3, sigma=0.3, n=60, seed=0, d=6):
    tr, te = generate_gaussian_mixture(GaussianMixtureSpec(np.eye(C, d), sigma, n, n // 2, seed))
    (tr, te), _ = normalize_mean_std(tr, te)
    return tr, te


def rec(epoch, lam_tr, lam_te, acc=1.0, tpt=True):
    layers = range(1, len(lam_tr) + 1)
    return EpochRecord(epoch, acc, acc, 0.0, 0.0, 0.0, dict(zip(layers, lam_tr)), dict(zip(layers, lam_te)),
                       {j: 0.0 for j in layers}, tpt)


SMALL = ModelSpec((16, 16))


def test_run_is_deterministic():
    tr, te = toy()
    cfg = TrainConfig(epochs=6, batch_size=16, learning_rate=0.05, seed=3, probe_every=2)
    a = run_experiment(cfg, SMALL, tr, te)
    b = run_experiment(cfg, SMALL, tr, te)
    assert a.records == b.records
    for x, y in zip(a.params.weights, b.params.weights):
        assert x.tobytes() == y.tobytes()
    assert [r.epoch for r in a.records] == sorted({0, 2, 4, 5} | ({a.it_epoch} if a.it_epoch is not None else set()))


def test_alpha_zero_svsl_matches_vanilla():
    tr, te = toy(seed=2)
    van = TrainConfig(epochs=5, batch_size=8, learning_rate=0.05, seed=1)
    sv = dataclasses.replace(van, loss_mode="svsl", svsl=SvslConfig(0.0, 1))
    a, b = run_experiment(van, SMALL, tr, te), run_experiment(sv, SMALL, tr, te)
    assert a.records == b.records


def test_svsl_changes_trajectory():
    tr, te = toy(seed=2)
    van = TrainConfig(epochs=3, batch_size=8, learning_rate=0.05, seed=1)
    sv = dataclasses.replace(van, loss_mode="svsl", svsl=SvslConfig(0.5, 1))
    b = run_experiment(sv, SMALL, tr, te)
    assert b.records != run_experiment(van, SMALL, tr, te).records
    assert all(r.svsl_loss > 0 for r in b.records)


def test_gamma_validated_against_depth():
    tr, te = toy()
    cfg = TrainConfig(epochs=1, loss_mode="svsl", svsl=SvslConfig(0.1, 3))
    with pytest.raises(ContractError):
        run_experiment(cfg, SMALL, tr, te)


def test_latching_rule():
    it, flags = latch_it([0.90, 0.996, 0.990, 0.997], 0.995)
    assert it == 1
    assert flags == [False, True, True, True]
    assert latch_it([0.9, 0.98], 0.995) == (None, [False, False])
    assert latch_it([0.984, 0.985], 0.985)[0] == 1


def test_in_tpt_monotone_in_run():
    tr, te = toy(sigma=0.2)
    r = run_experiment(TrainConfig(epochs=15, batch_size=16, learning_rate=0.05, seed=0), SMALL, tr, te)
    flags = [x.in_tpt for x in r.records]
    assert flags == sorted(flags)
    assert r.it_epoch is not None
    assert r.record_at(r.it_epoch).train_accuracy >= 0.995
    assert r.it_params is not None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts():
    from svsl.training import TrainingAborted
    tr, te = toy()
    with pytest.raises(TrainingAborted, match="epoch 0"):
        run_experiment(TrainConfig(epochs=3, learning_rate=1e200), SMALL, tr, te)


def test_ordering_predicate_on_record():
    r = rec(0, [0.5, 0.52, 0.1], [0.5, 0.3, 0.1])
    assert check_record_ordering(r, 0.01) == {"train": False, "test": True}
    assert check_record_ordering(r, 0.03) == {"train": True, "test": True}


def _result(it_lam, eot_lam):
    records = [rec(0, it_lam, it_lam), rec(5, eot_lam, eot_lam)]
    return RunResult(records, 0, 5, None)


def test_it_to_eot_examples():
    assert check_it_to_eot(_result([0.1, 0.2], [0.1, 0.2]), 0.0).holds
    assert check_it_to_eot(_result([0.10], [0.04]), 0.0).holds
    res = check_it_to_eot(_result([0.05], [0.09]), 0.02)
    assert res.holds is False and res.train == {1: False}
    no_it = RunResult([rec(0, [0.1], [0.1], tpt=False)], None, 0, None)
    assert check_it_to_eot(no_it).reached_it is False
    assert check_it_to_eot(no_it).holds is None


def test_compare_identical_runs():
    r = _result([0.3, 0.1], [0.2, 0.05])
    c = compare_runs(r, r)
    assert all(v == 0 for v in c.lambda_train_delta.values())
    assert all(v == 0 for v in c.lambda_test_delta.values())
    assert c.eot_test_accuracy_delta == 0 and c.best_test_accuracy_delta == 0
    with pytest.raises(ContractError):
        compare_runs(r, _result([0.3], [0.2]))


@pytest.mark.slow
def test_two_class_toy_collapses_and_early_exit_is_cheap():
    gaps, losses = [], []
    for seed in range(5):
        tr, te = generate_gaussian_mixture(GaussianMixtureSpec(np.eye(2, 10) * 2, 0.3, 200, 200, seed))
        (tr, te), _ = normalize_mean_std(tr, te)
        r = run_experiment(TrainConfig(epochs=60, batch_size=32, learning_rate=0.02, seed=seed, probe_every=60),
                           ModelSpec((32, 32, 32)), tr, te)
        gaps.append(nc4_gap(r.params, tr, r.means))
        full = r.eot.test_accuracy
        losses.append(full - early_exit_eval(r.params, te, r.means, 3).ncc_accuracy)
    assert np.median(gaps) < 0.02
    assert max(losses) < 0.01
