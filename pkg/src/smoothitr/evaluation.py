"""Rule quality on held-out data: agreement with the optimal rule and IPW value."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import EmptyIntersection, MissingTruth
from .nuisance import DEFAULT_CLIP, clip_propensity, fit_logistic
from .objective import RuleCoefficients


class PropensitySource(str, enum.Enum):
    TRUE_DESIGN = "true"
    ESTIMATED = "estimated"


@dataclass(frozen=True)
class EvalResult:
    ccr: float | None
    value: float
    n_test: int
    method: str = ""
    scenario: str = ""

    def __post_init__(self):
        if self.ccr is not None and not 0.0 <= self.ccr <= 1.0:
            raise ValueError(f"ccr out of range: {self.ccr}")
        if self.n_test < 1:
            raise ValueError("empty test set")


def _rule(beta, X) -> np.ndarray:
    if not isinstance(beta, RuleCoefficients):
        beta = RuleCoefficients.from_vector(beta)
    return beta.rule(X)


def ccr(beta, test) -> float:
    """Share of test units whose recommendation matches I(delta*(x) > 0)."""
    if test.true_cte is None:
        raise MissingTruth("test data has no true contrast column")
    d = _rule(beta, test.covariates)
    return float(np.mean(d == (np.asarray(test.true_cte) > 0)))


def resolve_propensity(test, source=PropensitySource.TRUE_DESIGN, clip=DEFAULT_CLIP) -> np.ndarray:
    """P(A=1|x) per test unit, from the stored design truth or a logistic fit."""
    source = PropensitySource(source)
    if source is PropensitySource.TRUE_DESIGN:
        if test.true_propensity is None:
            raise MissingTruth("test data has no true propensity column")
        return np.asarray(test.true_propensity, dtype=float)
    pf = fit_logistic(test.covariates, test.treatments)
    return clip_propensity(pf.predict(test.covariates), clip)


def empirical_value(beta, test, propensity_source=PropensitySource.TRUE_DESIGN,
                    clip=DEFAULT_CLIP, pi=None) -> float:
    """Self-normalized IPW value of the rule I(f(x) > 0).

    Each unit whose received treatment agrees with the rule is weighted by
    1 / P(A = a_i | x_i).  ``pi`` (P(A=1|x)) overrides ``propensity_source``.
    """
    if pi is None:
        pi = resolve_propensity(test, propensity_source, clip)
    A = np.asarray(test.treatments)
    d = _rule(beta, test.covariates)
    agree = A == d
    if not agree.any():
        raise EmptyIntersection("no test unit received the recommended treatment")
    p_received = np.where(A == 1, pi, 1.0 - pi)
    w = agree / p_received
    return float(np.sum(w * np.asarray(test.outcomes)) / np.sum(w))


def evaluate(beta, test, method: str = "", scenario: str = "",
             propensity_source=None) -> EvalResult:
    """CCR when truth is present, value always.

    Without an explicit source, the true propensity is used when stored and
    a fitted (clipped) logistic propensity otherwise.
    """
    if propensity_source is None:
        propensity_source = (PropensitySource.TRUE_DESIGN if test.true_propensity is not None
                             else PropensitySource.ESTIMATED)
    c = ccr(beta, test) if test.true_cte is not None else None
    v = empirical_value(beta, test, propensity_source)
    return EvalResult(c, v, int(test.N), method, scenario)
