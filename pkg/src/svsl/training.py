"""Seeded minibatch SGD with interpolation-threshold tracking and per-epoch probes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .losses import SvslConfig, cross_entropy, total_loss
from .metrics import (
    ClassMeans,
    check_layer_ordering,
    compute_class_means,
    mismatch_report,
    within_class_variability,
)
from .model import NetworkParams, backward, forward_with_trace, init_network, mlp_specs
from .numerics import ContractError

log = logging.getLogger(__name__)

LOSS_MODES = ("vanilla", "svsl")


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"training aborted at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class ModelSpec:
    hidden_widths: tuple[int, ...] = (64, 64, 64, 64)
    activation: str = "relu"

    def num_layers(self) -> int:
        return len(self.hidden_widths) + 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    loss_mode: str = "vanilla"
    svsl: SvslConfig = field(default_factory=SvslConfig)
    it_threshold: float = 0.995
    probe_every: int = 1

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ContractError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.probe_every < 1:
            raise ContractError("epochs, batch_size and probe_every must be >= 1")
        if not 0 < self.it_threshold <= 1:
            raise ContractError(f"it_threshold must lie in (0, 1], got {self.it_threshold}")


@dataclass
class EpochRecord:
    epoch: int
    train_accuracy: float
    test_accuracy: float
    ce_loss: float  # mean over the epoch's training batches
    svsl_loss: float
    test_ce_loss: float
    lambda_train: dict[int, float]
    lambda_test: dict[int, float]
    variability: dict[int, float]
    in_tpt: bool


@dataclass
class RunResult:
    records: list[EpochRecord]
    it_epoch: Optional[int]
    eot_epoch: int
    params: NetworkParams
    it_params: Optional[NetworkParams] = None
    means: Optional[ClassMeans] = None  # train class means at EOT

    def record_at(self, epoch: int) -> EpochRecord:
        for r in self.records:
            if r.epoch == epoch:
                return r
        raise KeyError(f"epoch {epoch} was not probed")

    @property
    def eot(self) -> EpochRecord:
        return self.record_at(self.eot_epoch)

    @property
    def best_test(self) -> EpochRecord:
        # earliest epoch among ties
        return max(self.records, key=lambda r: (r.test_accuracy, -r.epoch))

    @property
    def layers(self) -> list[int]:
        return sorted(self.records[0].lambda_train)


class ItTracker:
    """Latches the first epoch whose train accuracy reaches the threshold."""

    def __init__(self, threshold: float = 0.995):
        self.threshold = threshold
        self.it_epoch: Optional[int] = None

    @property
    def in_tpt(self) -> bool:
        return self.it_epoch is not None

    def update(self, epoch: int, train_accuracy: float) -> bool:
        """Returns True on the epoch that crosses the threshold."""
        if self.it_epoch is None and train_accuracy >= self.threshold:
            self.it_epoch = epoch
            return True
        return False


def latch_it(accuracies: Sequence[float], threshold: float = 0.995) -> tuple[Optional[int], list[bool]]:
    tracker = ItTracker(threshold)
    flags = []
    for e, acc in enumerate(accuracies):
        tracker.update(e, acc)
        flags.append(tracker.in_tpt)
    return tracker.it_epoch, flags


def _accuracy_and_ce(params: NetworkParams, ds: Dataset) -> tuple[float, float]:
    logits = forward_with_trace(params, ds.X).logits
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.y))
    ce, _ = cross_entropy(logits, ds.y)
    return acc, ce


def run_experiment(config: TrainConfig, model: ModelSpec, train: Dataset, test: Dataset,
                   progress: bool = False) -> RunResult:
    """Train from scratch; every random draw derives from ``config.seed``.

    Epochs are numbered from 0. A record is written every ``probe_every``
    epochs and always at the IT epoch and the last epoch.
    """
    if np.any(train.class_counts() == 0):
        missing = np.flatnonzero(train.class_counts() == 0).tolist()
        raise ContractError(f"classes {missing} have no train samples")
    init_ss, shuffle_ss = np.random.SeedSequence(int(config.seed)).spawn(2)
    params = init_network(train.dim, mlp_specs(model.hidden_widths, train.num_classes, model.activation),
                          np.random.Generator(np.random.PCG64(init_ss)))
    if config.loss_mode == "svsl":
        config.svsl.layer_range(params.num_layers)  # validate gamma against depth
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    svsl_cfg = config.svsl if config.loss_mode == "svsl" else None
    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    tracker = ItTracker(config.it_threshold)
    records: list[EpochRecord] = []
    it_params = None
    means = None
    N = len(train)
    lr, mu = config.learning_rate, config.momentum

    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(N)
        ce_sum = svsl_sum = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, N, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            trace = forward_with_trace(params, train.X[idx])
            loss = total_loss(trace, train.y[idx], svsl_cfg, in_tpt=tracker.in_tpt)
            if not np.isfinite(loss.total):
                raise TrainingAborted(epoch, b, f"non-finite loss {loss.total}")
            grads = backward(params, trace, loss.logit_grad, loss.adjoints)
            for j in range(params.num_layers):
                vel_w[j] = mu * vel_w[j] + grads.weights[j]
                vel_b[j] = mu * vel_b[j] + grads.biases[j]
                params.weights[j] -= lr * vel_w[j]
                params.biases[j] -= lr * vel_b[j]
            ce_sum += loss.ce
            svsl_sum += loss.svsl
            n_batches += 1

        train_acc, _ = _accuracy_and_ce(params, train)
        crossed = tracker.update(epoch, train_acc)
        last = epoch == config.epochs - 1
        if crossed:
            it_params = params.copy()
        if not (crossed or last or epoch % config.probe_every == 0):
            continue
        means = compute_class_means(params, train)
        report = mismatch_report(params, train, test, means, epoch)
        var = within_class_variability(params, train, means)
        test_acc, test_ce = _accuracy_and_ce(params, test)
        rec = EpochRecord(epoch, train_acc, test_acc, ce_sum / n_batches, svsl_sum / n_batches,
                          test_ce, report.train, report.test, var.values, tracker.in_tpt)
        records.append(rec)
        if progress:
            log.info("epoch %d train_acc %.4f test_acc %.4f ce %.4g svsl %.4g tpt %s",
                     epoch, train_acc, test_acc, rec.ce_loss, rec.svsl_loss, rec.in_tpt)
    return RunResult(records, tracker.it_epoch, config.epochs - 1, params, it_params, means)


# -- layer-behaviour checks --------------------------------------------------

def check_record_ordering(record: EpochRecord, slack: float = 0.0) -> dict[str, bool]:
    """Deeper layers have no larger mismatch (up to ``slack``), per split."""
    return {"train": check_layer_ordering(record.lambda_train, slack),
            "test": check_layer_ordering(record.lambda_test, slack)}


@dataclass
class ItToEotCheck:
    reached_it: bool
    train: dict[int, bool] = field(default_factory=dict)
    test: dict[int, bool] = field(default_factory=dict)

    @property
    def holds(self) -> Optional[bool]:
        """None when the run never reached IT."""
        if not self.reached_it:
            return None
        return all(self.train.values()) and all(self.test.values())


def check_it_to_eot(result: RunResult, slack: float = 0.0) -> ItToEotCheck:
    """Per layer and split: mismatch at EOT is no larger than at IT (up to ``slack``)."""
    if result.it_epoch is None:
        return ItToEotCheck(False)
    it, eot = result.record_at(result.it_epoch), result.eot
    return ItToEotCheck(
        True,
        {j: it.lambda_train[j] >= eot.lambda_train[j] - slack for j in it.lambda_train},
        {j: it.lambda_test[j] >= eot.lambda_test[j] - slack for j in it.lambda_test},
    )


@dataclass
class RunComparison:
    """Mismatch deltas are vanilla - svsl (positive favours SVSL); accuracy
    deltas are svsl - vanilla (positive favours SVSL)."""

    layers: list[int]
    lambda_train_delta: dict[int, float]
    lambda_test_delta: dict[int, float]
    eot_test_accuracy: tuple[float, float]
    best_test_accuracy: tuple[float, float]
    best_test_epoch: tuple[int, int]
    best_in_tpt: tuple[bool, bool]
    it_epoch: tuple[Optional[int], Optional[int]]
    it_test_accuracy: tuple[Optional[float], Optional[float]]

    @property
    def eot_test_accuracy_delta(self) -> float:
        return self.eot_test_accuracy[1] - self.eot_test_accuracy[0]

    @property
    def best_test_accuracy_delta(self) -> float:
        return self.best_test_accuracy[1] - self.best_test_accuracy[0]

    def mean_intermediate_test_delta(self, k: Optional[int] = None) -> float:
        """Average test-mismatch delta over layers 1..k-1."""
        k = k or max(self.layers)
        inner = [j for j in self.layers if j < k]
        return float(np.mean([self.lambda_test_delta[j] for j in inner]))


def compare_runs(vanilla: RunResult, svsl: RunResult) -> RunComparison:
    if vanilla.layers != svsl.layers:
        raise ContractError(f"probe layers differ: {vanilla.layers} vs {svsl.layers}")
    va, sv = vanilla.eot, svsl.eot
    vb, sb = vanilla.best_test, svsl.best_test

    def it_acc(r: RunResult):
        return None if r.it_epoch is None else r.record_at(r.it_epoch).test_accuracy

    return RunComparison(
        layers=vanilla.layers,
        lambda_train_delta={j: va.lambda_train[j] - sv.lambda_train[j] for j in vanilla.layers},
        lambda_test_delta={j: va.lambda_test[j] - sv.lambda_test[j] for j in vanilla.layers},
        eot_test_accuracy=(va.test_accuracy, sv.test_accuracy),
        best_test_accuracy=(vb.test_accuracy, sb.test_accuracy),
        best_test_epoch=(vb.epoch, sb.epoch),
        best_in_tpt=(vb.in_tpt, sb.in_tpt),
        it_epoch=(vanilla.it_epoch, svsl.it_epoch),
        it_test_accuracy=(it_acc(vanilla), it_acc(svsl)),
    )
