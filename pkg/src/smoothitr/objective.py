"""Weighted smoothed-hinge risk, its gradient, and the shifted surrogate.

Coefficient vectors are laid out as ``(beta0, beta1_1, ..., beta1_p)``.
Sums over units go through numpy reductions (pairwise summation); the
gradient is a single matrix-vector product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptySample
from .nuisance import WeightedSample
from .smoothing import SmoothedLoss


@dataclass(frozen=True)
class RuleCoefficients:
    """Linear decision function f(x) = beta0 + beta1'x."""

    beta0: float
    beta1: tuple

    def __post_init__(self):
        b1 = tuple(float(v) for v in np.ravel(self.beta1))
        object.__setattr__(self, "beta1", b1)
        object.__setattr__(self, "beta0", float(self.beta0))
        if not np.all(np.isfinite((self.beta0,) + b1)):
            raise ValueError("coefficients must be finite")

    @classmethod
    def from_vector(cls, v) -> "RuleCoefficients":
        v = np.asarray(v, dtype=float)
        return cls(v[0], v[1:])

    @classmethod
    def zeros(cls, p: int) -> "RuleCoefficients":
        return cls(0.0, np.zeros(p))

    @property
    def p(self) -> int:
        return len(self.beta1)

    def as_vector(self) -> np.ndarray:
        return np.array((self.beta0,) + self.beta1)

    def decision(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.beta0 + X @ np.asarray(self.beta1)

    def rule(self, X) -> np.ndarray:
        """Treatment recommendation I(f(x) > 0); ties go to control."""
        return (self.decision(X) > 0).astype(np.int64)


def as_vector(beta) -> np.ndarray:
    if isinstance(beta, RuleCoefficients):
        return beta.as_vector()
    return np.asarray(beta, dtype=float)


def _check(ws: WeightedSample, b: np.ndarray):
    if ws.n == 0:
        raise EmptySample("risk of an empty sample")
    if b.shape != (ws.p + 1,):
        raise DimensionMismatch(f"expected {ws.p + 1} coefficients, got {b.shape}")


def margins(ws: WeightedSample, beta) -> np.ndarray:
    b = as_vector(beta)
    return ws.labels * (b[0] + ws.covariates @ b[1:])


def risk(ws: WeightedSample, beta, sl: SmoothedLoss) -> float:
    """Mean of |delta_i| * phi_h(Z_i f(x_i))."""
    b = as_vector(beta)
    _check(ws, b)
    return float(np.mean(ws.weights * sl.loss(margins(ws, b))))


def risk_gradient(ws: WeightedSample, beta, sl: SmoothedLoss) -> np.ndarray:
    b = as_vector(beta)
    _check(ws, b)
    r = ws.weights * sl.deriv(margins(ws, b)) * ws.labels / ws.n
    return np.concatenate([[np.sum(r)], ws.covariates.T @ r])


def penalty(beta, lam: float) -> float:
    b = as_vector(beta)
    return float(lam * (b[1:] @ b[1:]))


def penalty_gradient(beta, lam: float) -> np.ndarray:
    b = as_vector(beta)
    g = 2.0 * lam * b
    g[0] = 0.0
    return g


def penalized_objective(ws, beta, sl, lam: float) -> float:
    """Risk plus ridge penalty on the slopes; the intercept is never penalized."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return risk(ws, beta, sl) + penalty(beta, lam)


def penalized_gradient(ws, beta, sl, lam: float) -> np.ndarray:
    return risk_gradient(ws, beta, sl) + penalty_gradient(beta, lam)


def surrogate_shift(central_ws, anchor, sl_b, global_gradient) -> np.ndarray:
    """grad Q_{1,b}(anchor) - grad Q_h(anchor)."""
    g = np.asarray(global_gradient, dtype=float)
    local = risk_gradient(central_ws, anchor, sl_b)
    if g.shape != local.shape:
        raise DimensionMismatch("global gradient has the wrong length")
    return local - g


def surrogate_objective(central_ws, beta, sl_b, shift, anchor, lam: float) -> float:
    """Q_{1,b}(beta) - <shift, beta - anchor> + lam * ||beta1||^2."""
    b, a, s = as_vector(beta), as_vector(anchor), np.asarray(shift, dtype=float)
    if not (b.shape == a.shape == s.shape):
        raise DimensionMismatch("beta, anchor and shift must have equal length")
    return penalized_objective(central_ws, b, sl_b, lam) - float(s @ (b - a))


def surrogate_gradient(central_ws, beta, sl_b, shift, lam: float) -> np.ndarray:
    return penalized_gradient(central_ws, beta, sl_b, lam) - np.asarray(shift, dtype=float)
