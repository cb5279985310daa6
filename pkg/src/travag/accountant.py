"""Renyi-DP accounting for DP-SGD.

Three steps turn a DP-SGD run into an (epsilon, delta) guarantee:

1. per-iteration RDP of the Poisson-subsampled Gaussian mechanism, evaluated
   at integer orders with the exact binomial expansion;
2. composition over ``T`` iterations (RDP adds up, so multiply by ``T``);
3. conversion ``eps_dp = eps_rdp(alpha) + log(1/delta) / (alpha - 1)``,
   minimized over the order grid.

Guarantees of separate mechanisms (autoencoder, discriminator) are then
added with basic sequential composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from travag.errors import CalibrationError, PrivacyError

# Dense integer orders, then a sparse tail. The tail is what makes very small
# epsilons (eps < log(1/delta) / 127) reachable at all.
DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 129)) + (
    160, 192, 256, 320, 384, 512, 640, 768, 1024, 1280, 1536, 2048, 2560, 3072,
    4096, 5120, 6144, 8192, 10240, 12288, 16384, 20480, 24576, 32768,
)

PHI_BRACKET = (0.3, 100.0)


@dataclass(frozen=True)
class RdpCurve:
    """RDP epsilon at each order alpha."""

    orders: tuple
    epsilons: tuple

    def __post_init__(self):
        orders = tuple(self.orders)
        eps = tuple(float(e) for e in self.epsilons)
        if len(orders) != len(eps):
            raise ValueError("orders and epsilons differ in length")
        for a in orders:
            if not a > 1:
                raise ValueError(f"RDP orders must exceed 1, got {a}")
        for e in eps:
            if not e >= 0:
                raise ValueError(f"RDP epsilons must be non-negative, got {e}")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "epsilons", eps)

    @classmethod
    def from_mapping(cls, points: Mapping[float, float]) -> "RdpCurve":
        items = sorted(points.items())
        return cls(tuple(a for a, _ in items), tuple(e for _, e in items))

    def as_dict(self) -> dict:
        return dict(zip(self.orders, self.epsilons))

    def __len__(self) -> int:
        return len(self.orders)


@dataclass(frozen=True)
class DpGuarantee:
    epsilon: float
    delta: float
    alpha_star: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise PrivacyError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise PrivacyError(f"delta must lie in (0, 1), got {self.delta}")

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "delta": self.delta, "alpha_star": self.alpha_star}


@dataclass(frozen=True)
class MechanismSpend:
    """Sampling rate, noise multiplier and iteration count of one DP-SGD run."""

    q: float
    phi: float
    iterations: int

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError(f"sampling rate must lie in (0, 1], got {self.q}")
        if not self.phi >= 0:
            raise ValueError(f"noise multiplier must be non-negative, got {self.phi}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")

    def to_dict(self) -> dict:
        return {"q": self.q, "phi": self.phi, "iterations": self.iterations}


def gaussian_rdp(alpha: float, phi: float) -> float:
    """RDP of the Gaussian mechanism with sensitivity 1 and std ``phi``."""
    if not alpha > 1:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if not phi > 0:
        raise ValueError(f"noise multiplier must be positive, got {phi}")
    return alpha / (2.0 * phi * phi)


_LOG_FACTORIALS = np.zeros(1)


def _log_binomials(alpha: int) -> np.ndarray:
    global _LOG_FACTORIALS
    if len(_LOG_FACTORIALS) <= alpha:
        size = max(alpha + 1, 2 * len(_LOG_FACTORIALS))
        _LOG_FACTORIALS = np.array([math.lgamma(i + 1) for i in range(size)])
    lf = _LOG_FACTORIALS
    k = np.arange(alpha + 1)
    return lf[alpha] - lf[k] - lf[alpha - k]


def subsampled_gaussian_rdp(alpha: int, q: float, phi: float) -> float:
    """RDP at integer order ``alpha`` of the Poisson-subsampled Gaussian.

    ``log(sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp((k^2 - k) / (2 phi^2))) / (alpha - 1)``
    evaluated with log-sum-exp.
    """
    if isinstance(alpha, bool) or int(alpha) != alpha or alpha < 2:
        raise ValueError(f"alpha must be an integer >= 2, got {alpha}")
    alpha = int(alpha)
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate must lie in (0, 1], got {q}")
    if not phi > 0:
        raise ValueError(f"noise multiplier must be positive, got {phi}")

    k = np.arange(alpha + 1, dtype=np.float64)
    rest = alpha - k
    if q == 1.0:
        log_q_part = np.where(rest == 0, 0.0, -np.inf)
    else:
        log_q_part = k * math.log(q) + rest * math.log1p(-q)
    log_terms = _log_binomials(alpha) + log_q_part + (k * k - k) / (2.0 * phi * phi)
    top = np.max(log_terms)
    log_a = top + math.log(np.sum(np.exp(log_terms - top)))
    return max(log_a / (alpha - 1), 0.0)


def rdp_curve(q: float, phi: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    return RdpCurve(tuple(orders), tuple(subsampled_gaussian_rdp(a, q, phi) for a in orders))


def compose(step_curve: RdpCurve, iterations: int) -> RdpCurve:
    """RDP of ``iterations`` adaptive repetitions: pointwise multiplication."""
    if int(iterations) != iterations or iterations < 1:
        raise ValueError(f"iterations must be a positive integer, got {iterations}")
    return RdpCurve(step_curve.orders, tuple(e * iterations for e in step_curve.epsilons))


def dp_objective(curve: RdpCurve, delta: float) -> np.ndarray:
    """``eps_rdp(alpha) + log(1/delta) / (alpha - 1)`` at every order."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    orders = np.asarray(curve.orders, dtype=np.float64)
    return np.asarray(curve.epsilons) + math.log(1.0 / delta) / (orders - 1.0)


def rdp_to_dp(curve: RdpCurve, delta: float) -> DpGuarantee:
    if len(curve) == 0:
        raise PrivacyError("cannot convert an empty RDP curve")
    values = dp_objective(curve, delta)
    best = int(np.argmin(values))
    return DpGuarantee(float(values[best]), delta, curve.orders[best])


def account_dpsgd(spend: MechanismSpend, delta: float, orders: Sequence[int] = DEFAULT_ORDERS) -> DpGuarantee:
    if spend.phi == 0:
        raise PrivacyError("noise multiplier 0 gives no differential privacy")
    step = rdp_curve(spend.q, spend.phi, orders)
    return rdp_to_dp(compose(step, spend.iterations), delta)


def combine_mechanisms(*guarantees: DpGuarantee) -> DpGuarantee:
    """Basic sequential composition: epsilons and deltas add."""
    if not guarantees:
        raise ValueError("nothing to combine")
    epsilon = math.fsum(g.epsilon for g in guarantees)
    delta = math.fsum(g.delta for g in guarantees)
    if delta >= 1:
        raise PrivacyError(f"combined delta {delta} >= 1 makes the guarantee vacuous")
    return DpGuarantee(epsilon, delta, None)


def calibrate_phi(
    target_eps: float,
    delta: float,
    q: float,
    iterations: int,
    bracket: tuple[float, float] = PHI_BRACKET,
    tol: float = 1e-3,
    orders: Sequence[int] = DEFAULT_ORDERS,
) -> float:
    """Smallest noise multiplier (to ``tol``) whose epsilon stays within target."""
    if not target_eps > 0:
        raise ValueError("target epsilon must be positive")
    lo, hi = bracket

    def eps_at(phi: float) -> float:
        return account_dpsgd(MechanismSpend(q, phi, iterations), delta, orders).epsilon

    eps_lo, eps_hi = eps_at(lo), eps_at(hi)
    if eps_lo <= target_eps:
        return lo
    if eps_hi > target_eps:
        raise CalibrationError(
            f"target epsilon {target_eps} unreachable for q={q}, T={iterations}, delta={delta}: "
            f"phi={lo} gives {eps_lo:.6g}, phi={hi} gives {eps_hi:.6g}"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


def epsilon_table(spend: MechanismSpend, delta: float, orders: Sequence[int] = DEFAULT_ORDERS) -> list[tuple]:
    """Rows ``(alpha, eps_rdp_total, eps_dp)`` for reporting."""
    curve = compose(rdp_curve(spend.q, spend.phi, orders), spend.iterations)
    dp = dp_objective(curve, delta)
    return [(a, e, float(d)) for a, e, d in zip(curve.orders, curve.epsilons, dp)]
