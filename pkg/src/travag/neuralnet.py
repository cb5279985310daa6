"""Dense feed-forward networks with per-example backpropagation.

Only what the synthesizer needs: affine layers followed by an elementwise
activation, MSE and binary cross-entropy losses, and gradients that can be
returned either summed over a batch or one row per example (the latter feeds
per-example clipping in DP-SGD).

Parameters of layer ``k`` are ``W_k`` (out x in) and ``b_k`` (out). A
*subset* selects layers by index; ``None`` means every layer. Flat vectors
list the selected layers in ascending order, each as ``W.ravel()`` then ``b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from travag.errors import NumericalError

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")
LOSSES = ("bce", "mse")
BCE_EPS = 1e-7
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if int(self.in_dim) < 1 or int(self.out_dim) < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.out_dim * self.in_dim + self.out_dim


def mlp_specs(dims: Sequence[int], activations: Sequence[str]) -> list[LayerSpec]:
    """``mlp_specs([4, 3, 2], ["relu", "sigmoid"])`` -> 4->3 relu, 3->2 sigmoid."""
    if len(dims) != len(activations) + 1:
        raise ValueError("need one activation per layer")
    return [LayerSpec(dims[i], dims[i + 1], act) for i, act in enumerate(activations)]


def _normalize_subset(n_layers: int, subset: Optional[Iterable[int]]) -> tuple[int, ...]:
    if subset is None:
        return tuple(range(n_layers))
    layers = tuple(sorted(set(int(k) for k in subset)))
    for k in layers:
        if not 0 <= k < n_layers:
            raise IndexError(f"layer {k} outside network with {n_layers} layers")
    return layers


@dataclass(frozen=True)
class ParamLayout:
    """Maps slices of a flat parameter vector back to (layer, W|b)."""

    entries: tuple  # of (layer, "W"|"b", shape, start, stop)

    @property
    def size(self) -> int:
        return self.entries[-1][4] if self.entries else 0

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted({e[0] for e in self.entries}))


@dataclass
class GradientVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ValueError(
                f"gradient length {self.values.shape} does not match layout size {self.layout.size}"
            )

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __add__(self, other: "GradientVector") -> "GradientVector":
        _check_layout(self.layout, other.layout)
        return GradientVector(self.values + other.values, self.layout)

    def __mul__(self, scalar: float) -> "GradientVector":
        return GradientVector(self.values * scalar, self.layout)

    __rmul__ = __mul__


def _check_layout(a: ParamLayout, b: ParamLayout) -> None:
    if a != b:
        raise ValueError("gradient layouts differ")


class Network:
    """Weights, biases and activations of one MLP."""

    def __init__(self, specs: Sequence[LayerSpec], weights, biases, seed: Optional[int] = None):
        specs = list(specs)
        if not specs:
            raise ValueError("a network needs at least one layer")
        for k in range(len(specs) - 1):
            if specs[k].out_dim != specs[k + 1].in_dim:
                raise ValueError(
                    f"layer {k} outputs {specs[k].out_dim} but layer {k + 1} expects {specs[k + 1].in_dim}"
                )
        if len(weights) != len(specs) or len(biases) != len(specs):
            raise ValueError("one weight matrix and bias vector per layer required")
        self.specs = specs
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for k, spec in enumerate(specs):
            if self.weights[k].shape != (spec.out_dim, spec.in_dim):
                raise ValueError(f"layer {k} weight shape {self.weights[k].shape} mismatches spec")
            if self.biases[k].shape != (spec.out_dim,):
                raise ValueError(f"layer {k} bias shape {self.biases[k].shape} mismatches spec")
            if not (np.isfinite(self.weights[k]).all() and np.isfinite(self.biases[k]).all()):
                raise NumericalError(f"layer {k} has non-finite parameters")
        self.seed = seed

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def __len__(self) -> int:
        return len(self.specs)

    def layout(self, subset: Optional[Iterable[int]] = None) -> ParamLayout:
        entries = []
        pos = 0
        for k in _normalize_subset(len(self.specs), subset):
            spec = self.specs[k]
            w_size = spec.out_dim * spec.in_dim
            entries.append((k, "W", (spec.out_dim, spec.in_dim), pos, pos + w_size))
            pos += w_size
            entries.append((k, "b", (spec.out_dim,), pos, pos + spec.out_dim))
            pos += spec.out_dim
        return ParamLayout(tuple(entries))

    def parameter_count(self, subset: Optional[Iterable[int]] = None) -> int:
        return self.layout(subset).size

    def get_flat(self, subset: Optional[Iterable[int]] = None) -> np.ndarray:
        layers = _normalize_subset(len(self.specs), subset)
        parts = []
        for k in layers:
            parts.append(self.weights[k].ravel())
            parts.append(self.biases[k])
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_flat(self, values: np.ndarray, subset: Optional[Iterable[int]] = None) -> None:
        layout = self.layout(subset)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (layout.size,):
            raise ValueError("flat parameter vector has the wrong length")
        for k, kind, shape, start, stop in layout.entries:
            target = self.weights if kind == "W" else self.biases
            target[k] = values[start:stop].reshape(shape).copy()

    def copy(self) -> "Network":
        return Network(self.specs, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.specs == other.specs
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "layers": [
                {"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation} for s in self.specs
            ],
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Network":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
        specs = [LayerSpec(int(l["in_dim"]), int(l["out_dim"]), l["activation"]) for l in doc["layers"]]
        return cls(specs, doc["weights"], doc["biases"], doc.get("seed"))

    def to_json(self) -> str:
        # json emits repr() floats, which round-trip float64 exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Network":
        return cls.from_dict(json.loads(text))


def init_network(specs: Sequence[LayerSpec], seed: int) -> Network:
    """Xavier-uniform weights, zero biases, reproducible from ``seed``."""
    specs = list(specs)
    for k in range(len(specs) - 1):
        if specs[k].out_dim != specs[k + 1].in_dim:
            raise ValueError(f"layer {k} outputs {specs[k].out_dim} but layer {k + 1} expects {specs[k + 1].in_dim}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in specs:
        limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        weights.append(rng.uniform(-limit, limit, size=(spec.out_dim, spec.in_dim)))
        biases.append(np.zeros(spec.out_dim))
    return Network(specs, weights, biases, seed)


# ---------------------------------------------------------------------------
# Forward / backward


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class ForwardCache:
    inputs: list  # input to each layer, (B, in)
    pre: list  # pre-activations, (B, out)
    outputs: list  # activations, (B, out)
    squeeze: bool  # caller passed a single vector

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"input has shape {x.shape[-1:]} but network expects {net.in_dim} features")
    return x, squeeze


def forward_cached(net: Network, x) -> ForwardCache:
    a, squeeze = _as_batch(net, x)
    inputs, pre, outputs = [], [], []
    for spec, w, b in zip(net.specs, net.weights, net.biases):
        inputs.append(a)
        z = a @ w.T + b
        a = _activate(spec.activation, z)
        pre.append(z)
        outputs.append(a)
    if not np.isfinite(a).all():
        raise NumericalError("non-finite value in forward pass")
    return ForwardCache(inputs, pre, outputs, squeeze)


def forward(net: Network, x) -> np.ndarray:
    """Network output for one vector ``(in,)`` or a batch ``(B, in)``."""
    cache = forward_cached(net, x)
    out = cache.output
    return out[0] if cache.squeeze else out


def _layer_deltas(net: Network, cache: ForwardCache, grad, wrt_preactivation: bool):
    """dL/dz for every layer (index k -> (B, out_k)) and dL/dx of the input."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim == 1:
        grad = grad[None, :]
    last = len(net.specs) - 1
    if wrt_preactivation:
        delta = grad
    else:
        delta = grad * _activation_grad(net.specs[last].activation, cache.pre[last], cache.outputs[last])
    deltas = [None] * len(net.specs)
    for k in range(last, -1, -1):
        deltas[k] = delta
        d_in = delta @ net.weights[k]
        if k == 0:
            return deltas, d_in
        prev = net.specs[k - 1]
        delta = d_in * _activation_grad(prev.activation, cache.pre[k - 1], cache.outputs[k - 1])


def _check_grads(*arrays) -> None:
    for arr in arrays:
        if not np.isfinite(arr).all():
            raise NumericalError("non-finite value in backward pass")


def backward(
    net: Network,
    cache: ForwardCache,
    grad,
    subset: Optional[Iterable[int]] = None,
    per_example: bool = False,
    wrt_preactivation: bool = False,
):
    """Backpropagate ``grad`` (dL/d output, or dL/d last pre-activation).

    Returns ``(param_grads, input_grads)``. ``param_grads`` is ``(P,)`` summed
    over the batch, or ``(B, P)`` when ``per_example`` is set. ``input_grads``
    has shape ``(B, in)``.
    """
    layers = _normalize_subset(len(net.specs), subset)
    deltas, input_grad = _layer_deltas(net, cache, grad, wrt_preactivation)
    batch = input_grad.shape[0]
    parts = []
    for k in layers:
        delta, a_in = deltas[k], cache.inputs[k]
        if per_example:
            parts.append((delta[:, :, None] * a_in[:, None, :]).reshape(batch, -1))
            parts.append(delta)
        else:
            parts.append((delta.T @ a_in).ravel())
            parts.append(delta.sum(axis=0))
    axis = 1 if per_example else 0
    if parts:
        flat = np.concatenate(parts, axis=axis)
    else:
        flat = np.zeros((batch, 0)) if per_example else np.zeros(0)
    _check_grads(flat, input_grad)
    return flat, input_grad


def clipped_gradient_sum(
    net: Network,
    cache: ForwardCache,
    grad,
    clip_norm: float,
    subset: Optional[Iterable[int]] = None,
    wrt_preactivation: bool = False,
):
    """Sum over the batch of per-example gradients clipped to ``clip_norm``.

    Each per-example weight gradient is the outer product ``delta a^T``, so its
    squared norm is ``|delta|^2 |a|^2`` and the clipped sum is
    ``(c * delta)^T a``; no ``(B, P)`` matrix is formed.

    Returns ``(clipped_sum (P,), per_example_norms (B,), input_grads (B, in))``.
    """
    layers = _normalize_subset(len(net.specs), subset)
    deltas, input_grad = _layer_deltas(net, cache, grad, wrt_preactivation)
    batch = input_grad.shape[0]
    sq = np.zeros(batch)
    for k in layers:
        d2 = np.einsum("ij,ij->i", deltas[k], deltas[k])
        a2 = np.einsum("ij,ij->i", cache.inputs[k], cache.inputs[k])
        sq += d2 * a2 + d2
    norms = np.sqrt(sq)
    with np.errstate(divide="ignore"):
        factors = np.where(norms > clip_norm, clip_norm / norms, 1.0)
    parts = []
    for k in layers:
        scaled = deltas[k] * factors[:, None]
        parts.append((scaled.T @ cache.inputs[k]).ravel())
        parts.append(scaled.sum(axis=0))
    flat = np.concatenate(parts) if parts else np.zeros(0)
    _check_grads(flat, input_grad)
    return flat, norms, input_grad


# ---------------------------------------------------------------------------
# Losses


def _check_loss(kind: str) -> None:
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def _as_target(output: np.ndarray, target) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(output.shape, float(t))
    elif t.shape != output.shape:
        if t.ndim == 1 and output.ndim == 2 and output.shape[1] == 1 and t.shape[0] == output.shape[0]:
            t = t[:, None]  # one label per example
        elif t.ndim == 1 and output.ndim == 2 and t.shape[0] == output.shape[1]:
            t = np.broadcast_to(t, output.shape)  # one target row for every example
        else:
            raise ValueError(f"target shape {t.shape} does not match output shape {output.shape}")
    return t


def example_losses(kind: str, output, target) -> np.ndarray:
    """Loss of every row of a ``(B, k)`` output; mean over the k outputs."""
    _check_loss(kind)
    y = np.asarray(output, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    t = _as_target(y, target)
    if kind == "mse":
        return np.mean((y - t) ** 2, axis=1)
    if (y < 0).any() or (y > 1).any():
        raise ValueError("binary cross-entropy needs outputs in [0, 1]")
    yc = np.clip(y, BCE_EPS, 1.0 - BCE_EPS)
    return np.mean(-(t * np.log(yc) + (1.0 - t) * np.log1p(-yc)), axis=1)


def loss_value(kind: str, output, target) -> float:
    """MSE or clamped BCE averaged over the outputs (and over rows for a batch)."""
    y = np.atleast_1d(np.asarray(output, dtype=np.float64))
    return float(np.mean(example_losses(kind, y, target)))


def loss_delta(net: Network, cache: ForwardCache, kind: str, target) -> np.ndarray:
    """dL_i/dz for the last pre-activation, one row per example.

    For sigmoid outputs under BCE this is the exact ``(y - t) / k``; the
    probability clamp only guards the loss value against log(0).
    """
    _check_loss(kind)
    y = cache.output
    t = _as_target(y, target)
    k = y.shape[1]
    spec = net.specs[-1]
    if kind == "mse":
        dy = 2.0 * (y - t) / k
    elif spec.activation == "sigmoid":
        return (y - t) / k
    else:
        if (y < 0).any() or (y > 1).any():
            raise ValueError("binary cross-entropy needs outputs in [0, 1]")
        inside = (y > BCE_EPS) & (y < 1.0 - BCE_EPS)
        yc = np.clip(y, BCE_EPS, 1.0 - BCE_EPS)
        dy = np.where(inside, (yc - t) / (yc * (1.0 - yc)), 0.0) / k
    return dy * _activation_grad(spec.activation, cache.pre[-1], y)


def per_example_gradients(net: Network, x, target, loss: str, subset=None):
    """Per-example gradients of the loss over a batch.

    Returns ``(grads (B, P), losses (B,), input_grads (B, in), layout)``.
    """
    cache = forward_cached(net, x)
    losses = example_losses(loss, cache.output, target)
    delta = loss_delta(net, cache, loss, target)
    grads, input_grads = backward(net, cache, delta, subset, per_example=True, wrt_preactivation=True)
    return grads, losses, input_grads, net.layout(subset)


def clipped_sum_for_loss(net: Network, x, target, loss: str, clip_norm: float, subset=None):
    """Clipped per-example gradient sum of ``loss``; see :func:`clipped_gradient_sum`.

    Returns ``(clipped_sum, losses, input_grads, layout)``.
    """
    cache = forward_cached(net, x)
    losses = example_losses(loss, cache.output, target)
    delta = loss_delta(net, cache, loss, target)
    total, _, input_grads = clipped_gradient_sum(net, cache, delta, clip_norm, subset, wrt_preactivation=True)
    return total, losses, input_grads, net.layout(subset)


def per_example_gradient(net: Network, x, target, loss: str, subset=None) -> GradientVector:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("per_example_gradient takes a single input vector")
    t = np.asarray(target, dtype=np.float64)
    grads, _, _, layout = per_example_gradients(net, x[None, :], t.reshape(1, -1) if t.ndim else t, loss, subset)
    return GradientVector(grads[0], layout)


def batch_gradient(net: Network, x, target, loss: str, subset=None) -> GradientVector:
    """Gradient of the batch-mean loss, computed without per-example rows."""
    cache = forward_cached(net, x)
    delta = loss_delta(net, cache, loss, target)
    batch = delta.shape[0]
    grads, _ = backward(net, cache, delta / batch, subset, per_example=False, wrt_preactivation=True)
    return GradientVector(grads, net.layout(subset))


def apply_update(net: Network, delta: GradientVector, subset=None) -> None:
    """In-place ``theta <- theta + delta`` on the selected layers only."""
    layout = net.layout(subset)
    _check_layout(layout, delta.layout)
    values = delta.values
    if not np.isfinite(values).all():
        raise NumericalError("non-finite update")
    for k, kind, shape, start, stop in layout.entries:
        if kind == "W":
            net.weights[k] = net.weights[k] + values[start:stop].reshape(shape)
        else:
            net.biases[k] = net.biases[k] + values[start:stop]
