"""Fully-connected network with per-layer activation capture.

Layer ``j`` (1-based) maps ``G_{j-1} -> act_j(G_{j-1} @ W_j + b_j)`` with
``G_0 = X``. Hidden layers use ReLU; the final layer is the identity, so
``G_k`` are the logits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import ContractError, as_matrix, relu, relu_grad

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    output_width: int
    activation: str = "relu"

    def __post_init__(self):
        if self.output_width < 1:
            raise ContractError(f"layer width must be >= 1, got {self.output_width}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


def mlp_specs(hidden_widths: Sequence[int], num_classes: int,
              activation: str = "relu") -> list[LayerSpec]:
    """Hidden layers with ``activation`` followed by an identity logit layer."""
    specs = [LayerSpec(int(w), activation) for w in hidden_widths]
    specs.append(LayerSpec(int(num_classes), "identity"))
    return specs


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ContractError("weights, biases and activations must have equal length")
        for j, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractError(f"layer {j}: W {w.shape} incompatible with b {b.shape}")
            if j > 1 and self.weights[j - 2].shape[1] != w.shape[0]:
                raise ContractError(
                    f"layer {j}: W rows {w.shape[0]} != previous width {self.weights[j - 2].shape[1]}")

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> list[int]:
        """``[n_0, n_1, ..., n_k]``."""
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], list(self.activations))


@dataclass
class ForwardTrace:
    X: np.ndarray
    pre: list[np.ndarray]  # Z_j = G_{j-1} W_j + b_j
    outputs: list[np.ndarray]  # G_j, j = 1..k

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]

    def layer(self, j: int) -> np.ndarray:
        """Output of layer ``j`` (1-based); ``j = 0`` is the input."""
        return self.X if j == 0 else self.outputs[j - 1]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


def init_network(input_dim: int, specs: Sequence[LayerSpec], rng: np.random.Generator) -> NetworkParams:
    """He-normal weights (variance 2/fan_in), zero biases."""
    if not specs:
        raise ContractError("need at least one layer")
    if input_dim < 1:
        raise ContractError(f"input_dim must be >= 1, got {input_dim}")
    weights, biases = [], []
    fan_in = input_dim
    for spec in specs:
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.standard_normal((fan_in, spec.output_width)) * std)
        biases.append(np.zeros(spec.output_width))
        fan_in = spec.output_width
    return NetworkParams(weights, biases, [s.activation for s in specs])


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return relu(z) if kind == "relu" else z


def forward_with_trace(params: NetworkParams, X, upto: Optional[int] = None) -> ForwardTrace:
    """Run the network, keeping every layer's pre-activation and output.

    ``upto`` truncates the pass after that layer (used for early exit).
    """
    X = as_matrix(X, "X")
    if X.shape[1] != params.widths[0]:
        raise ContractError(f"input has {X.shape[1]} columns, network expects {params.widths[0]}")
    last = params.num_layers if upto is None else upto
    if not 1 <= last <= params.num_layers:
        raise ContractError(f"layer index {last} outside 1..{params.num_layers}")
    pre, outputs = [], []
    h = X
    for j in range(last):
        z = h @ params.weights[j] + params.biases[j]
        h = _activate(z, params.activations[j])
        pre.append(z)
        outputs.append(h)
    return ForwardTrace(X, pre, outputs)


def predict(params: NetworkParams, X) -> np.ndarray:
    # argmax returns the first maximal index, so ties go to the lowest class
    return np.argmax(forward_with_trace(params, X).logits, axis=1)


def backward(params: NetworkParams, trace: ForwardTrace, logit_grad,
             layer_adjoints: Optional[dict[int, np.ndarray]] = None) -> Gradients:
    """Reverse-mode gradients for a loss with logit gradient ``logit_grad``.

    ``layer_adjoints`` maps a 1-based layer index to dL/dG_j contributions
    coming from terms other than the logits; each is added to the
    backpropagated signal at that layer before it continues downward.
    """
    k = params.num_layers
    if len(trace.outputs) != k:
        raise ContractError("trace does not cover every layer")
    delta = as_matrix(logit_grad, "logit_grad")
    if delta.shape != trace.logits.shape:
        raise ContractError(f"logit_grad shape {delta.shape} != logits shape {trace.logits.shape}")
    adj = layer_adjoints or {}
    for j, a in adj.items():
        if not 1 <= j <= k:
            raise ContractError(f"adjoint for layer {j} outside 1..{k}")
        if np.shape(a) != trace.outputs[j - 1].shape:
            raise ContractError(
                f"adjoint at layer {j} has shape {np.shape(a)}, expected {trace.outputs[j - 1].shape}")
    gw: list = [None] * k
    gb: list = [None] * k
    for j in range(k, 0, -1):
        if j in adj:
            delta = delta + adj[j]
        if params.activations[j - 1] == "relu":
            delta = delta * relu_grad(trace.pre[j - 1])
        g_prev = trace.layer(j - 1)
        gw[j - 1] = g_prev.T @ delta
        gb[j - 1] = delta.sum(axis=0)
        if j > 1:
            delta = delta @ params.weights[j - 1].T
    return Gradients(gw, gb)


# -- snapshots -------------------------------------------------------------

_MAGIC = b"SVSLPAR1"


def save_params(params: NetworkParams, path) -> None:
    """Write ``path`` (binary) and ``path.json`` (shape sidecar).

    Binary layout, all little-endian: 8-byte magic, uint64 k, k+1 uint64
    widths, one uint8 activation code per layer (0 relu, 1 identity), then
    W_1, b_1, ..., W_k, b_k as float64 in row-major order.
    """
    path = Path(path)
    k = params.num_layers
    parts = [_MAGIC, struct.pack("<Q", k), struct.pack(f"<{k + 1}Q", *params.widths),
             bytes(ACTIVATIONS.index(a) for a in params.activations)]
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))
    sidecar = {
        "format": "svsl-params-v1",
        "num_layers": k,
        "widths": params.widths,
        "activations": params.activations,
        "tensors": [{"name": f"{kind}{j}", "shape": list(t.shape)}
                    for j, (w, b) in enumerate(zip(params.weights, params.biases), start=1)
                    for kind, t in (("W", w), ("b", b))],
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_params(path) -> NetworkParams:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot (bad magic)")
    off = 8
    (k,) = struct.unpack_from("<Q", raw, off)
    off += 8
    widths = struct.unpack_from(f"<{k + 1}Q", raw, off)
    off += 8 * (k + 1)
    acts = [ACTIVATIONS[c] for c in raw[off:off + k]]
    off += k
    weights, biases = [], []
    for j in range(k):
        n_in, n_out = widths[j], widths[j + 1]
        w = np.frombuffer(raw, dtype="<f8", count=n_in * n_out, offset=off).reshape(n_in, n_out)
        off += 8 * n_in * n_out
        b = np.frombuffer(raw, dtype="<f8", count=n_out, offset=off)
        off += 8 * n_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after parameters")
    return NetworkParams(weights, biases, acts)
