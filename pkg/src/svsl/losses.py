"""Cross-entropy and the stochastic variability-simplification penalty.

For a batch B and sample i of class c the per-sample loss is

    CE_i + eta_c * sum_{j=gamma}^{J} ||G_j[i] - mu_{c,B}^(j)||^2,
    eta_c = alpha / (C * (J + 1 - gamma) * n_c),

where mu_{c,B}^(j) is the mean of class c's rows of G_j inside the batch,
n_c is the in-batch class count and J is k (or k - 1 when the logit layer is
excluded). The batch loss is the mean over samples.

Gradients are taken with the batch means held constant. Because
sum_{i in c} (G_j[i] - mu) = 0 and eta is shared across a class, this equals
the gradient of the loss with the means depending on the activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ForwardTrace
from .numerics import ContractError, log_softmax_rows


@dataclass(frozen=True)
class SvslConfig:
    alpha: float = 0.0
    gamma: int = 1
    include_final_layer: bool = True
    tpt_only: bool = False

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.gamma < 1:
            raise ContractError(f"gamma must be >= 1, got {self.gamma}")

    def layer_range(self, k: int) -> range:
        """Penalised layers, 1-based and inclusive of the last one."""
        if not 1 <= self.gamma < k:
            raise ContractError(f"gamma={self.gamma} must satisfy 1 <= gamma < k={k}")
        last = k if self.include_final_layer else k - 1
        if last < self.gamma:
            raise ContractError(f"empty layer range {self.gamma}..{last}")
        return range(self.gamma, last + 1)


@dataclass
class BatchClassMeans:
    classes: np.ndarray  # classes present in the batch, ascending
    counts: np.ndarray  # n_c, aligned with classes
    means: dict[int, np.ndarray]  # layer -> (len(classes), n_j)


@dataclass
class LossBreakdown:
    ce: float
    svsl: float
    total: float
    logit_grad: np.ndarray
    adjoints: dict[int, np.ndarray] = field(default_factory=dict)


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / B``."""
    logp = log_softmax_rows(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logp.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"labels must lie in [0, {C})")
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def eta(alpha: float, C: int, k: int, gamma: int, class_count_in_batch: int) -> float:
    if class_count_in_batch < 1:
        raise ContractError("class count in batch must be >= 1")
    if gamma > k:
        raise ContractError(f"gamma={gamma} exceeds k={k}")
    return alpha / (C * (k + 1 - gamma) * class_count_in_batch)


def batch_class_means(trace: ForwardTrace, labels, layers) -> BatchClassMeans:
    labels = np.asarray(labels, dtype=np.int64)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    means = {}
    for j in layers:
        g = trace.layer(j)
        sums = np.zeros((classes.size, g.shape[1]))
        np.add.at(sums, inverse, g)
        means[j] = sums / counts[:, None]
    return BatchClassMeans(classes, counts, means)


def svsl_penalty(trace: ForwardTrace, labels, config: SvslConfig,
                 in_tpt: bool = False) -> tuple[float, dict[int, np.ndarray]]:
    """Batch-mean penalty and per-layer adjoints dP/dG_j.

    Returns ``(0.0, {})`` when alpha is zero, or when ``tpt_only`` is set and
    the interpolation threshold has not been reached yet.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B = labels.size
    if B == 0:
        raise ContractError("empty batch")
    k = len(trace.outputs)
    layers = config.layer_range(k)
    if config.alpha == 0 or (config.tpt_only and not in_tpt):
        return 0.0, {}
    C = trace.logits.shape[1]
    bm = batch_class_means(trace, labels, layers)
    _, inverse = np.unique(labels, return_inverse=True)
    # eta uses the last penalised layer in place of k so the normaliser counts
    # exactly the layers in the sum
    eta_c = np.array([eta(config.alpha, C, layers[-1], config.gamma, int(n)) for n in bm.counts])
    eta_i = eta_c[inverse]
    per_sample = np.zeros(B)
    adjoints = {}
    for j in layers:
        diff = trace.layer(j) - bm.means[j][inverse]
        per_sample += np.einsum("ij,ij->i", diff, diff)
        adjoints[j] = (2.0 / B) * eta_i[:, None] * diff
    penalty = float(np.mean(eta_i * per_sample))
    return penalty, adjoints


def total_loss(trace: ForwardTrace, labels, config: SvslConfig | None = None,
               in_tpt: bool = False) -> LossBreakdown:
    """CE plus the SVSL term; ``config=None`` means plain cross-entropy."""
    ce, grad = cross_entropy(trace.logits, labels)
    if config is None:
        return LossBreakdown(ce, 0.0, ce, grad)
    pen, adjoints = svsl_penalty(trace, labels, config, in_tpt)
    return LossBreakdown(ce, pen, ce + pen, grad, adjoints)
