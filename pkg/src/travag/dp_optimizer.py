"""DP-SGD: Poisson batch sampling, per-example clipping and Gaussian noise.

The private update is plain SGD on the noisy clipped mean gradient,

    g_B = (sum_i clip(g_i, C) + N(0, C^2 Phi^2 I)) / |B|,    theta <- theta - lr * g_B

so that the privacy analysis is exactly that of the sampled Gaussian
mechanism. Parameters that need no protection use :class:`Adam`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence, Union

import numpy as np

from travag.errors import NumericalError
from travag.neuralnet import (
    GradientVector,
    Network,
    apply_update,
    clipped_sum_for_loss,
    per_example_gradients,
)


@dataclass(frozen=True)
class DpSgdConfig:
    clip_norm: float
    noise_multiplier: float
    sampling_rate: float
    learning_rate: float
    iterations: int
    microbatch_size: int = 1

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if not self.noise_multiplier >= 0:
            raise ValueError(f"noise_multiplier must be non-negative, got {self.noise_multiplier}")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError(f"sampling_rate must lie in (0, 1], got {self.sampling_rate}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")
        if int(self.microbatch_size) != self.microbatch_size or self.microbatch_size < 1:
            raise ValueError(f"microbatch_size must be a positive integer, got {self.microbatch_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "DpSgdConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


class RngStream:
    """Seeded source of uniform, Bernoulli and Gaussian draws.

    Gaussians come from Box-Muller on the uniform stream so the sequence
    depends only on the seed and the PCG64 bit generator.
    """

    def __init__(self, seed: Union[int, Sequence[int], np.random.SeedSequence]):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def gaussian(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape))
        pairs = (count + 1) // 2
        u = self._gen.random(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u in (0, 1]
        angle = 2.0 * math.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.ravel()[:count].reshape(shape)

    def bernoulli(self, size, p: float) -> np.ndarray:
        return self._gen.random(size) < p

    def seed_int(self) -> int:
        """A fresh 63-bit integer, e.g. to seed a network initializer."""
        return int(self._gen.integers(0, 2**63 - 1))

    def spawn(self, n: int) -> list["RngStream"]:
        return [RngStream(child) for child in self._seq.spawn(n)]


def _as_array(g) -> tuple[np.ndarray, Optional[object]]:
    if isinstance(g, GradientVector):
        return g.values, g.layout
    return np.asarray(g, dtype=np.float64), None


def _wrap(values: np.ndarray, layout):
    return GradientVector(values, layout) if layout is not None else values


def clip_gradient(g, clip_norm: float):
    """``g * min(1, C / ||g||_2)``; the result never exceeds ``C`` in norm."""
    if not clip_norm > 0:
        raise ValueError("clip norm must be positive")
    values, layout = _as_array(g)
    if not np.isfinite(values).all():
        raise NumericalError("cannot clip a non-finite gradient")
    norm = np.linalg.norm(values)
    if norm <= clip_norm:
        return _wrap(values.copy(), layout)
    factor = clip_norm / norm
    clipped = values * factor
    while np.linalg.norm(clipped) > clip_norm:
        factor = np.nextafter(factor, 0.0)
        clipped = values * factor
    return _wrap(clipped, layout)


def clip_rows(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    """Clip every row of a ``(B, P)`` matrix independently."""
    grads = np.asarray(grads, dtype=np.float64)
    if not np.isfinite(grads).all():
        raise NumericalError("cannot clip a non-finite gradient")
    norms = np.sqrt(np.einsum("ij,ij->i", grads, grads))
    over = norms > clip_norm
    if not over.any():
        return grads.copy()
    out = grads.copy()
    for i in np.flatnonzero(over):
        out[i] = clip_gradient(grads[i], clip_norm)
    return out


def noisy_batch_gradient(per_example, clip_norm: float, noise_multiplier: float, rng: RngStream):
    """Clip, sum in index order, add ``N(0, C^2 Phi^2 I)``, divide by |B|.

    ``per_example`` is a list of :class:`GradientVector` or a ``(B, P)``
    array; the return type follows the input.
    """
    if isinstance(per_example, np.ndarray):
        grads, layout = np.asarray(per_example, dtype=np.float64), None
        if grads.ndim != 2:
            raise ValueError("per-example gradients must be a (B, P) matrix")
    else:
        items = list(per_example)
        if not items:
            raise ValueError("empty batch")
        layout = items[0].layout
        for g in items[1:]:
            if g.layout != layout:
                raise ValueError("per-example gradients have different layouts")
        grads = np.stack([g.values for g in items])
    batch = grads.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    if noise_multiplier < 0:
        raise ValueError("noise multiplier must be non-negative")
    clipped = clip_rows(grads, clip_norm)
    total = np.zeros(grads.shape[1])
    for row in clipped:
        total += row
    noise = rng.gaussian(grads.shape[1]) * (clip_norm * noise_multiplier)
    return _wrap((total + noise) / batch, layout)


def poisson_sample(m: int, q: float, rng: RngStream) -> np.ndarray:
    """Indices ``0..m-1`` each kept independently with probability ``q``."""
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate must lie in (0, 1], got {q}")
    return np.flatnonzero(rng.bernoulli(m, q))


def microbatch_gradients(grads: np.ndarray, size: int) -> np.ndarray:
    """Average consecutive groups of ``size`` per-example rows."""
    if size == 1:
        return grads
    batch = grads.shape[0]
    groups = [grads[s:s + size].mean(axis=0) for s in range(0, batch, size)]
    return np.stack(groups)


@dataclass
class StepResult:
    loss: float
    gradient: GradientVector
    input_grads: np.ndarray  # clean per-example dL_i/dx, (B, in)


def dp_sgd_step(
    net: Network,
    subset,
    inputs: np.ndarray,
    targets,
    loss: str,
    cfg: DpSgdConfig,
    rng: RngStream,
    public_gradient: Optional[GradientVector] = None,
) -> StepResult:
    """One private descent step on ``subset`` of ``net``.

    ``public_gradient`` is added unclipped and unnoised; it carries terms that
    do not depend on private data (generated samples in the discriminator).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("dp_sgd_step needs a non-empty (B, in) batch")
    if cfg.microbatch_size == 1:
        # factored per-example clipping, same result as the materialized path
        total, losses, input_grads, layout = clipped_sum_for_loss(net, inputs, targets, loss, cfg.clip_norm, subset)
        noise = rng.gaussian(layout.size) * (cfg.clip_norm * cfg.noise_multiplier)
        g = GradientVector((total + noise) / inputs.shape[0], layout)
    else:
        grads, losses, input_grads, layout = per_example_gradients(net, inputs, targets, loss, subset)
        groups = microbatch_gradients(grads, cfg.microbatch_size)
        g = GradientVector(noisy_batch_gradient(groups, cfg.clip_norm, cfg.noise_multiplier, rng), layout)
    if public_gradient is not None:
        g = g + public_gradient
    apply_update(net, g * (-cfg.learning_rate), subset)
    return StepResult(float(np.mean(losses)), g, input_grads)


class Adam:
    """Adaptive moment estimation for the non-private networks."""

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Optional[np.ndarray] = None
        self._v: Optional[np.ndarray] = None
        self._t = 0

    def step(self, net: Network, grad: GradientVector, subset=None) -> None:
        g = grad.values
        if self._m is None:
            self._m = np.zeros_like(g)
            self._v = np.zeros_like(g)
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * g
        self._v = self.beta2 * self._v + (1 - self.beta2) * g * g
        m_hat = self._m / (1 - self.beta1 ** self._t)
        v_hat = self._v / (1 - self.beta2 ** self._t)
        update = -self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        apply_update(net, GradientVector(update, grad.layout), subset)
