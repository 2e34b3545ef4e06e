"""Nuisance working models and doubly robust contrasts.

Propensity is a logistic model fitted by IRLS, outcome models are per-arm
linear regressions.  Contrasts follow the augmented inverse probability
weighted estimator; their signs and magnitudes become the labels and
weights of the weighted classification problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import DegenerateDesign, DimensionMismatch, NonConvergence

log = logging.getLogger(__name__)

DEFAULT_CLIP = (0.01, 0.99)
LL_ROUNDOFF = 1e-13
SEPARATION_BOUND = 30.0
CONDITION_LIMIT = 1e12


def add_intercept(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(X.shape[0]), X])


@dataclass
class PropensityFit:
    gamma: np.ndarray
    n_iter: int = 0
    converged: bool = True
    separated: bool = False
    loglik_path: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        if not np.all(np.isfinite(self.gamma)):
            raise ValueError("propensity coefficients must be finite")

    def predict(self, X):
        return expit(add_intercept(X) @ self.gamma)


@dataclass
class OutcomeFit:
    eta0: np.ndarray
    eta1: np.ndarray

    def __post_init__(self):
        self.eta0 = np.asarray(self.eta0, dtype=float)
        self.eta1 = np.asarray(self.eta1, dtype=float)
        if self.eta0.shape != self.eta1.shape:
            raise DimensionMismatch("outcome models must have the same length")
        if not (np.all(np.isfinite(self.eta0)) and np.all(np.isfinite(self.eta1))):
            raise ValueError("outcome coefficients must be finite")

    @classmethod
    def zero(cls, p: int) -> "OutcomeFit":
        return cls(np.zeros(p + 1), np.zeros(p + 1))

    def predict(self, X, a: int):
        eta = self.eta1 if a == 1 else self.eta0
        return add_intercept(X) @ eta


@dataclass
class WeightedSample:
    """Weights |delta_hat|, labels sign(delta_hat) in {-1, +1}, and covariates."""

    weights: np.ndarray
    labels: np.ndarray
    covariates: np.ndarray
    contrasts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        X = np.asarray(self.covariates, dtype=float)
        self.covariates = X[:, None] if X.ndim == 1 else X
        n = self.weights.shape[0]
        if self.labels.shape != (n,) or self.covariates.shape[0] != n:
            raise DimensionMismatch("weights, labels and covariates disagree in length")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def subset(self, idx) -> "WeightedSample":
        idx = np.asarray(idx)
        c = None if self.contrasts is None else self.contrasts[idx]
        return WeightedSample(self.weights[idx], self.labels[idx], self.covariates[idx], c)

    @classmethod
    def concat(cls, samples: Sequence["WeightedSample"]) -> "WeightedSample":
        return cls(np.concatenate([s.weights for s in samples]),
                   np.concatenate([s.labels for s in samples]),
                   np.vstack([s.covariates for s in samples]))


def _loglik(Xt, A, gamma):
    eta = Xt @ gamma
    return float(np.sum(A * log_expit(eta) + (1 - A) * log_expit(-eta)))


def fit_logistic(covariates, treatments, max_iter: int = 100, tol: float = 1e-8) -> PropensityFit:
    """Logistic regression of treatment on covariates by IRLS with step halving.

    ``covariates`` may have zero columns (intercept-only model).  Converges
    when the max-norm of the log-likelihood score is at most ``tol``.  If a
    coefficient exceeds 30 in magnitude the fit is clipped and returned with
    ``separated=True``.
    """
    Xt = add_intercept(covariates)
    A = np.asarray(treatments, dtype=float)
    n, k = Xt.shape
    if A.shape != (n,):
        raise DimensionMismatch("treatments length differs from covariates")
    if n < k + 1:
        raise DegenerateDesign(f"need at least {k + 1} units, got {n}")
    if A.min() == A.max():
        raise DegenerateDesign("all treatments identical")

    gamma = np.zeros(k)
    ll = _loglik(Xt, A, gamma)
    path = [ll]
    for it in range(1, max_iter + 1):
        mu = expit(Xt @ gamma)
        score = Xt.T @ (A - mu)
        if np.max(np.abs(score)) <= tol:
            return PropensityFit(gamma, n_iter=it - 1, loglik_path=path)
        info = Xt.T @ (Xt * (mu * (1 - mu))[:, None])
        if np.linalg.cond(info) > CONDITION_LIMIT:
            raise DegenerateDesign("logistic information matrix is numerically singular")
        step = np.linalg.solve(info, score)
        if 0.5 * float(score @ step) < LL_ROUNDOFF * (1.0 + abs(ll)):
            # predicted gain is below the roundoff of ll; the line search
            # cannot see it, so take the pure Newton step
            gamma = gamma + step
            ll = _loglik(Xt, A, gamma)
            path.append(ll)
            continue
        t = 1.0
        while True:
            cand = gamma + t * step
            ll_cand = _loglik(Xt, A, cand)
            if ll_cand >= ll or t < 1e-10:
                break
            t *= 0.5
        if ll_cand >= ll:
            gamma, ll = cand, ll_cand
        path.append(ll)
        if np.max(np.abs(gamma)) > SEPARATION_BOUND:
            log.warning("logistic fit separated; coefficients clipped at %g", SEPARATION_BOUND)
            return PropensityFit(np.clip(gamma, -SEPARATION_BOUND, SEPARATION_BOUND),
                                 n_iter=it, converged=False, separated=True, loglik_path=path)
    mu = expit(Xt @ gamma)
    if np.max(np.abs(Xt.T @ (A - mu))) <= tol:
        return PropensityFit(gamma, n_iter=max_iter, loglik_path=path)
    raise NonConvergence(f"IRLS did not reach tol={tol} in {max_iter} iterations")


def fit_ols(covariates, outcomes, subset=None) -> np.ndarray:
    """Least squares of outcome on (1, x) over ``subset``; returns length p+1."""
    Xt = add_intercept(covariates)
    Y = np.asarray(outcomes, dtype=float)
    if subset is not None:
        Xt, Y = Xt[subset], Y[subset]
    n, k = Xt.shape
    if n < k + 1:
        raise DegenerateDesign(f"need at least {k + 1} units, got {n}")
    eta, _, rank, sv = np.linalg.lstsq(Xt, Y, rcond=None)
    if rank < k or sv[-1] <= sv[0] * 1e-12:
        raise DegenerateDesign("outcome design matrix is rank deficient")
    return eta


def fit_outcome(covariates, treatments, outcomes) -> OutcomeFit:
    A = np.asarray(treatments)
    return OutcomeFit(fit_ols(covariates, outcomes, A == 0),
                      fit_ols(covariates, outcomes, A == 1))


def clip_propensity(pi, clip=DEFAULT_CLIP):
    lo, hi = clip
    if not 0 < lo < hi < 1:
        raise ValueError(f"clip bounds must satisfy 0 < lo < hi < 1, got {clip}")
    return np.clip(pi, lo, hi)


def aipwe_contrasts(covariates, treatments, outcomes, pf: PropensityFit, of: OutcomeFit,
                    clip=DEFAULT_CLIP) -> np.ndarray:
    """Per-unit AIPW estimates of the treatment contrast."""
    X = np.asarray(covariates, dtype=float)
    A = np.asarray(treatments, dtype=float)
    Y = np.asarray(outcomes, dtype=float)
    pi = clip_propensity(pf.predict(X), clip)
    q1, q0 = of.predict(X, 1), of.predict(X, 0)
    return (A * (Y - q1) / pi + q1) - ((1 - A) * (Y - q0) / (1 - pi) + q0)


def aipwe_contrast(y: float, a: int, q1: float, q0: float, pi: float, clip=DEFAULT_CLIP) -> float:
    """Scalar contrast from fitted values; ``pi`` is clipped before use."""
    pi = float(clip_propensity(pi, clip))
    return (a * (y - q1) / pi + q1) - ((1 - a) * (y - q0) / (1 - pi) + q0)


def pseudo_labels(contrasts, covariates) -> WeightedSample:
    d = np.asarray(contrasts, dtype=float)
    return WeightedSample(np.abs(d), np.where(d > 0, 1.0, -1.0), covariates, contrasts=d)


def dnc_average(fits):
    """Coordinatewise mean of site-local fits (propensity, outcome or raw vectors)."""
    fits = list(fits)
    if not fits:
        raise ValueError("nothing to average")
    first = fits[0]
    if isinstance(first, PropensityFit):
        vecs = [f.gamma for f in fits]
        _check_same_shape(vecs)
        return PropensityFit(np.mean(vecs, axis=0), converged=all(f.converged for f in fits),
                             separated=any(f.separated for f in fits))
    if isinstance(first, OutcomeFit):
        e0, e1 = [f.eta0 for f in fits], [f.eta1 for f in fits]
        _check_same_shape(e0)
        return OutcomeFit(np.mean(e0, axis=0), np.mean(e1, axis=0))
    vecs = [np.asarray(f, dtype=float) for f in fits]
    _check_same_shape(vecs)
    return np.mean(vecs, axis=0)


def _check_same_shape(vecs):
    if any(v.shape != vecs[0].shape for v in vecs):
        raise DimensionMismatch("fits have different dimensions")


def fit_nuisance(covariates, treatments, outcomes, propensity: str = "logistic",
                 outcome: str = "linear") -> tuple[PropensityFit, OutcomeFit]:
    """Fit both working models on one sample.

    ``propensity='intercept'`` drops all covariates from the propensity model
    and ``outcome='zero'`` replaces the outcome model by zero, which are the
    two single-model misspecifications used to probe double robustness.
    """
    X = np.asarray(covariates, dtype=float)
    if propensity == "logistic":
        pf = fit_logistic(X, treatments)
    elif propensity == "intercept":
        pf = fit_logistic(X[:, :0], treatments)
        pf = PropensityFit(np.concatenate([pf.gamma, np.zeros(X.shape[1])]), pf.n_iter,
                           pf.converged, pf.separated)
    else:
        raise ValueError(f"unknown propensity model {propensity!r}")
    if outcome == "linear":
        of = fit_outcome(X, treatments, outcomes)
    elif outcome == "zero":
        of = OutcomeFit.zero(X.shape[1])
    else:
        raise ValueError(f"unknown outcome model {outcome!r}")
    return pf, of
