"""Per-layer class means, within-class variability and NCC mismatch.

Class means always come from the train split; test mismatch is measured
against those train means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .data import Dataset
from .model import NetworkParams, forward_with_trace
from .numerics import ContractError, pairwise_sq_distances

CHUNK = 4096


@dataclass
class ClassMeans:
    means: dict[int, np.ndarray]  # layer -> (C, n_j)
    counts: np.ndarray  # (C,)
    split: str = "train"

    @property
    def layers(self) -> list[int]:
        return sorted(self.means)

    @property
    def num_classes(self) -> int:
        return self.counts.size


@dataclass
class VariabilityReport:
    values: dict[int, float]  # layer -> trace of the within-class covariance


@dataclass
class LayerMismatch:
    split: str
    counts: dict[int, int]  # layer -> number of disagreements
    n: int

    @property
    def rates(self) -> dict[int, float]:
        return {j: c / self.n for j, c in self.counts.items()}


@dataclass
class MismatchReport:
    train: dict[int, float]
    test: dict[int, float]
    n_train: int
    n_test: int
    epoch: Optional[int] = None


def _chunks(params: NetworkParams, X: np.ndarray, upto: Optional[int] = None,
            chunk: int = CHUNK) -> Iterator[tuple[slice, object]]:
    for start in range(0, X.shape[0], chunk):
        sl = slice(start, min(start + chunk, X.shape[0]))
        yield sl, forward_with_trace(params, X[sl], upto=upto)


def _check_layers(params: NetworkParams, layers) -> list[int]:
    k = params.num_layers
    layers = list(range(1, k + 1)) if layers is None else sorted(set(int(j) for j in layers))
    for j in layers:
        if not 1 <= j <= k:
            raise ContractError(f"layer {j} outside 1..{k}")
    return layers


def compute_class_means(params: NetworkParams, dataset: Dataset, layers=None,
                        chunk: int = CHUNK) -> ClassMeans:
    """Per-class means of every probed layer's output in one streaming pass.

    Chunk sums are merged with Kahan compensation, so accuracy does not
    degrade with the number of chunks.
    """
    layers = _check_layers(params, layers)
    C = dataset.num_classes
    counts = dataset.class_counts()
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ContractError(f"class {missing[0]} has no samples in the {dataset.split} split; "
                            f"its mean is undefined (empty classes: {missing})")
    widths = params.widths
    sums = {j: np.zeros((C, widths[j])) for j in layers}
    comp = {j: np.zeros((C, widths[j])) for j in layers}
    for sl, trace in _chunks(params, dataset.X, upto=max(layers), chunk=chunk):
        y = dataset.y[sl]
        for j in layers:
            part = np.zeros((C, widths[j]))
            np.add.at(part, y, trace.layer(j))
            t = part - comp[j]
            s = sums[j] + t
            comp[j] = (s - sums[j]) - t
            sums[j] = s
    return ClassMeans({j: sums[j] / counts[:, None] for j in layers}, counts, dataset.split)


def class_means_two_pass(params: NetworkParams, dataset: Dataset, layers=None) -> ClassMeans:
    """Reference means from the full activation matrix, class by class."""
    layers = _check_layers(params, layers)
    trace = forward_with_trace(params, dataset.X)
    counts = dataset.class_counts()
    means = {j: np.stack([trace.layer(j)[dataset.y == c].mean(axis=0)
                          for c in range(dataset.num_classes)]) for j in layers}
    return ClassMeans(means, counts, dataset.split)


def _check_means(means: ClassMeans, dataset: Dataset):
    if means.split != "train":
        raise ContractError(f"class means must come from the train split, got {means.split!r}")
    if means.num_classes != dataset.num_classes:
        raise ContractError(f"means cover {means.num_classes} classes, dataset has {dataset.num_classes}")


def within_class_variability(params: NetworkParams, dataset: Dataset, means: ClassMeans,
                             chunk: int = CHUNK) -> VariabilityReport:
    """``v_j = (1/C) sum_c mean_{i in c} ||g_i - mu_c||^2`` = trace of Sigma_W."""
    _check_means(means, dataset)
    if dataset.split != means.split or not np.array_equal(dataset.class_counts(), means.counts):
        raise ContractError("means were not computed on this split")
    layers = means.layers
    C = dataset.num_classes
    acc = {j: np.zeros(C) for j in layers}
    for sl, trace in _chunks(params, dataset.X, upto=max(layers), chunk=chunk):
        y = dataset.y[sl]
        for j in layers:
            d = trace.layer(j) - means.means[j][y]
            np.add.at(acc[j], y, np.einsum("ij,ij->i", d, d))
    return VariabilityReport({j: float(np.mean(acc[j] / means.counts)) for j in layers})


def ncc_predict(activation, layer_means) -> int:
    """Index of the nearest class mean (lowest index on ties)."""
    a = np.asarray(activation, dtype=np.float64).reshape(1, -1)
    layer_means = np.asarray(layer_means, dtype=np.float64)
    if a.shape[1] != layer_means.shape[1]:
        raise ContractError(f"activation width {a.shape[1]} != mean width {layer_means.shape[1]}")
    return int(np.argmin(pairwise_sq_distances(a, layer_means)[0]))


def ncc_predict_batch(activations, layer_means) -> np.ndarray:
    return np.argmin(pairwise_sq_distances(activations, layer_means), axis=1)


def ncc_mismatch(params: NetworkParams, dataset: Dataset, means: ClassMeans,
                 split: Optional[str] = None, chunk: int = CHUNK) -> LayerMismatch:
    """Fraction of samples whose network prediction differs from the layer-j NCC prediction."""
    _check_means(means, dataset)
    split = split or dataset.split
    counts = {j: 0 for j in means.layers}
    for _, trace in _chunks(params, dataset.X, chunk=chunk):
        net = np.argmax(trace.logits, axis=1)
        for j in means.layers:
            counts[j] += int(np.count_nonzero(ncc_predict_batch(trace.layer(j), means.means[j]) != net))
    return LayerMismatch(split, counts, len(dataset))


def mismatch_report(params: NetworkParams, train: Dataset, test: Dataset,
                    means: ClassMeans, epoch: Optional[int] = None) -> MismatchReport:
    tr = ncc_mismatch(params, train, means, "train")
    te = ncc_mismatch(params, test, means, "test")
    return MismatchReport(tr.rates, te.rates, tr.n, te.n, epoch)


def nc4_gap(params: NetworkParams, train: Dataset, means: ClassMeans) -> float:
    """Train NCC mismatch at the penultimate layer ``k - 1``."""
    j = params.num_layers - 1
    if j < 1:
        raise ContractError("nc4_gap needs at least two layers")
    if j not in means.means:
        raise ContractError(f"means do not include layer {j}")
    sub = ClassMeans({j: means.means[j]}, means.counts, means.split)
    return ncc_mismatch(params, train, sub, "train").rates[j]


@dataclass
class EarlyExitResult:
    layer: int
    ncc_accuracy: float
    agreement_with_classifier: float
    n: int


def early_exit_eval(params: NetworkParams, dataset: Dataset, means: ClassMeans,
                    exit_layer: int) -> EarlyExitResult:
    """Classify by nearest train class mean at ``exit_layer``.

    Prediction only needs the forward pass up to ``exit_layer``; agreement
    with the full network needs the full pass and is reported as
    ``1 - mismatch`` so that it matches the mismatch rate exactly.
    """
    _check_means(means, dataset)
    k = params.num_layers
    if not 1 <= exit_layer <= k:
        raise ContractError(f"exit layer {exit_layer} outside 1..{k}")
    if exit_layer not in means.means:
        raise ContractError(f"means do not include layer {exit_layer}")
    correct = 0
    for sl, trace in _chunks(params, dataset.X, upto=exit_layer):
        pred = ncc_predict_batch(trace.layer(exit_layer), means.means[exit_layer])
        correct += int(np.count_nonzero(pred == dataset.y[sl]))
    sub = ClassMeans({exit_layer: means.means[exit_layer]}, means.counts, means.split)
    mismatch = ncc_mismatch(params, dataset, sub).rates[exit_layer]
    return EarlyExitResult(exit_layer, correct / len(dataset), 1.0 - mismatch, len(dataset))


def forward_cost_fraction(widths: Sequence[int], exit_layer: int) -> float:
    """Share of dense multiply-accumulates spent up to ``exit_layer``."""
    macs = [widths[i] * widths[i + 1] for i in range(len(widths) - 1)]
    if not 1 <= exit_layer <= len(macs):
        raise ContractError(f"exit layer {exit_layer} outside 1..{len(macs)}")
    return sum(macs[:exit_layer]) / sum(macs)


def check_layer_ordering(values: Sequence[float] | dict[int, float], slack: float = 0.0) -> bool:
    """True iff mismatch does not increase with depth by more than ``slack``."""
    if isinstance(values, dict):
        values = [values[j] for j in sorted(values)]
    values = list(values)
    if len(values) < 2:
        raise ContractError("layer ordering needs at least two probed layers")
    return all(a >= b - slack for a, b in zip(values, values[1:]))
