"""Convolution-smoothed hinge loss.

The hinge loss ``max(1 - t, 0)`` convolved with a scaled kernel
``K_h(u) = K(u / h) / h`` has the closed form

    phi_h(t) = h * G((1 - t) / h),   G(s) = s * F(s) - int_{-inf}^{s} w K(w) dw

where ``F`` is the kernel CDF.  Differentiating gives ``phi_h'(t) = -F(s)`` and
``phi_h''(t) = K(s) / h``.  All functions accept scalars or arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class KernelKind(str, enum.Enum):
    EPANECHNIKOV = "epanechnikov"
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"

    @property
    def bounded(self) -> bool:
        return self is not KernelKind.GAUSSIAN

    @property
    def peak(self) -> float:
        """sup_u K(u)."""
        return _PEAK[self]

    def pdf(self, u):
        u = np.asarray(u, dtype=float)
        if self is KernelKind.EPANECHNIKOV:
            return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
        if self is KernelKind.UNIFORM:
            return np.where(np.abs(u) <= 1.0, 0.5, 0.0)
        return np.exp(-0.5 * u * u) / _SQRT_2PI

    def cdf(self, s):
        s = np.asarray(s, dtype=float)
        if self is KernelKind.GAUSSIAN:
            return ndtr(s)
        c = np.clip(s, -1.0, 1.0)
        if self is KernelKind.EPANECHNIKOV:
            return 0.5 + 0.75 * (c - c**3 / 3.0)
        return 0.5 * (c + 1.0)

    def partial_hinge(self, s):
        """G(s) = E[(s - W)_+] for W ~ K."""
        s = np.asarray(s, dtype=float)
        if self is KernelKind.GAUSSIAN:
            return s * ndtr(s) + np.exp(-0.5 * s * s) / _SQRT_2PI
        c = np.clip(s, -1.0, 1.0)
        if self is KernelKind.EPANECHNIKOV:
            inner = 0.1875 + 0.5 * c + 0.375 * c**2 - c**4 / 16.0
        else:
            inner = 0.25 * (c + 1.0) ** 2
        # s >= 1: full mass below s, G = s; s <= -1: G = 0 (inner is 0 there).
        return np.where(s >= 1.0, s, inner)


_PEAK = {
    KernelKind.EPANECHNIKOV: 0.75,
    KernelKind.UNIFORM: 0.5,
    KernelKind.GAUSSIAN: 1.0 / _SQRT_2PI,
}


def hinge(t):
    return np.maximum(1.0 - np.asarray(t, dtype=float), 0.0)


@dataclass(frozen=True)
class SmoothedLoss:
    """Hinge loss smoothed with ``kernel`` at bandwidth ``h``."""

    kernel: KernelKind = KernelKind.EPANECHNIKOV
    h: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kernel", KernelKind(self.kernel))
        h = float(self.h)
        if not np.isfinite(h) or h <= 0.0:
            raise ValueError(f"bandwidth must be positive, got {self.h!r}")
        object.__setattr__(self, "h", h)

    def with_bandwidth(self, h: float) -> "SmoothedLoss":
        return SmoothedLoss(self.kernel, h)

    def loss(self, t):
        t = np.asarray(t, dtype=float)
        s = (1.0 - t) / self.h
        if self.kernel.bounded:
            # Half-open branches keep the linear regime exact: t <= 1-h gives 1-t.
            return np.where(t <= 1.0 - self.h, 1.0 - t,
                            np.where(t >= 1.0 + self.h, 0.0,
                                     self.h * self.kernel.partial_hinge(s)))
        return self.h * self.kernel.partial_hinge(s)

    def deriv(self, t):
        s = (1.0 - np.asarray(t, dtype=float)) / self.h
        return -self.kernel.cdf(s)

    def second_deriv(self, t):
        s = (1.0 - np.asarray(t, dtype=float)) / self.h
        return self.kernel.pdf(s) / self.h

    def lipschitz_constant(self) -> float:
        """Lipschitz constant of ``deriv``: sup K / h (3/(4h) for Epanechnikov)."""
        return self.kernel.peak / self.h


def loss(sl: SmoothedLoss, t):
    return sl.loss(t)


def loss_deriv(sl: SmoothedLoss, t):
    return sl.deriv(t)


def loss_second_deriv(sl: SmoothedLoss, t):
    return sl.second_deriv(t)


def lipschitz_constant(sl: SmoothedLoss) -> float:
    return sl.lipschitz_constant()
