"""Multi-round distributed fitting with a gradient-only protocol.

Round ``t``: the coordinator broadcasts the current coefficients, every site
replies with the gradient of its local smoothed risk at bandwidth ``h``,
and the coordinator solves the gradient-shifted surrogate on its own data
at bandwidth ``b``.  Only coefficient and gradient vectors of length p+1
cross site boundaries; every such message is logged in the transcript.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptySite, ItrError, MissingReply, NonFinite
from .gcd import Standardization, solve_surrogate, standardize
from .nuisance import (DEFAULT_CLIP, OutcomeFit, PropensityFit, WeightedSample,
                       aipwe_contrasts, dnc_average, fit_nuisance, pseudo_labels)
from .objective import RuleCoefficients, penalized_gradient, penalty_gradient, risk_gradient
from .smoothing import KernelKind, SmoothedLoss

log = logging.getLogger(__name__)

HEADER_BYTES = 16  # kind, round, site id, unit count
REAL_BYTES = 8
KKT_TOL = 1e-5


def default_bandwidths(N: int, n: int) -> tuple[float, float]:
    """Global h = N^(-1/3) and central b = n^(-1/3); b >= h whenever n <= N."""
    return N ** (-1.0 / 3.0), n ** (-1.0 / 3.0)


def default_lambda(N: int) -> float:
    return 1.0 / np.sqrt(N)


@dataclass
class SiteView:
    site_id: int
    indices: np.ndarray
    sample: WeightedSample
    propensity: PropensityFit | None = None
    outcome: OutcomeFit | None = None
    local_sample: WeightedSample | None = None

    @property
    def n(self) -> int:
        return self.sample.n


def build_sites(covariates, treatments, outcomes, partition: Sequence, nuisance: str = "dnc",
                clip=DEFAULT_CLIP, propensity: str = "logistic",
                outcome: str = "linear") -> list[SiteView]:
    """Fit site-local nuisances and form each site's weighted sample.

    ``nuisance='dnc'`` averages the M local fits; ``'central-only'`` uses the
    fits of site 0.  Each site also keeps a sample weighted with its own
    local fits (``local_sample``), used by the averaging baseline.
    """
    X = np.asarray(covariates, dtype=float)
    A = np.asarray(treatments)
    Y = np.asarray(outcomes, dtype=float)
    locals_ = []
    for idx in partition:
        idx = np.asarray(idx)
        if idx.size == 0:
            raise EmptySite("site with no units")
        locals_.append(fit_nuisance(X[idx], A[idx], Y[idx], propensity, outcome))
    if nuisance == "dnc":
        pf = dnc_average([f[0] for f in locals_])
        of = dnc_average([f[1] for f in locals_])
    elif nuisance == "central-only":
        pf, of = locals_[0]
    else:
        raise ValueError(f"unknown nuisance mode {nuisance!r}")
    sites = []
    for k, (idx, (lpf, lof)) in enumerate(zip(partition, locals_)):
        idx = np.asarray(idx)
        xs, as_, ys = X[idx], A[idx], Y[idx]
        shared = pseudo_labels(aipwe_contrasts(xs, as_, ys, pf, of, clip), xs)
        own = pseudo_labels(aipwe_contrasts(xs, as_, ys, lpf, lof, clip), xs)
        sites.append(SiteView(k, idx, shared, lpf, lof, own))
    return sites


# --- messages ----------------------------------------------------------------

@dataclass(frozen=True)
class RoundMessage:
    kind: str  # "broadcast" or "grad"
    round: int
    payload: tuple
    site_id: int | None = None
    unit_count: int | None = None

    def __post_init__(self):
        if self.kind not in ("broadcast", "grad"):
            raise ValueError(f"unknown message kind {self.kind!r}")
        payload = tuple(float(v) for v in self.payload)
        if not np.all(np.isfinite(payload)):
            raise NonFinite("non-finite message payload")
        object.__setattr__(self, "payload", payload)
        if self.kind == "grad" and (self.unit_count is None or self.unit_count < 1):
            raise ValueError("gradient replies must carry a positive unit count")

    @property
    def nbytes(self) -> int:
        return HEADER_BYTES + REAL_BYTES * len(self.payload)

    def to_record(self) -> dict:
        vec = [float(v) for v in self.payload]
        if self.kind == "broadcast":
            return {"round": self.round, "kind": "broadcast", "beta": vec}
        return {"round": self.round, "kind": "grad", "site": self.site_id,
                "n": self.unit_count, "g": vec}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "RoundMessage":
        rec = json.loads(line)
        if rec["kind"] == "broadcast":
            return cls("broadcast", rec["round"], rec["beta"])
        return cls("grad", rec["round"], rec["g"], rec["site"], rec["n"])


def local_gradient(site: SiteView, beta, sl_h: SmoothedLoss, round: int = 0) -> RoundMessage:
    """Gradient reply of one site at bandwidth ``h``."""
    if site.n == 0:
        raise EmptySite(f"site {site.site_id} holds no units")
    b = beta.as_vector() if isinstance(beta, RuleCoefficients) else np.asarray(beta, float)
    if not np.all(np.isfinite(b)):
        raise NonFinite("broadcast coefficients are not finite")
    g = risk_gradient(site.sample, b, sl_h)
    return RoundMessage("grad", round, g, site.site_id, site.n)


class SiteEndpoint:
    """In-process stand-in for a remote site.

    ``handle`` is the whole transport surface: it receives a broadcast and
    returns a gradient reply, or ``None`` for rounds listed in
    ``drop_rounds`` (used to exercise missing-reply handling).
    """

    def __init__(self, site: SiteView, sl_h: SmoothedLoss, drop_rounds=()):
        self.site = site
        self.sl_h = sl_h
        self.drop_rounds = set(drop_rounds)

    @property
    def site_id(self) -> int:
        return self.site.site_id

    def handle(self, msg: RoundMessage) -> RoundMessage | None:
        if msg.round in self.drop_rounds:
            return None
        return local_gradient(self.site, np.array(msg.payload), self.sl_h, msg.round)


def aggregate(replies: Sequence[RoundMessage], expected_sites=None) -> np.ndarray:
    """Combine site gradients into the global gradient.

    Balanced sites give the plain mean; unequal sizes are weighted by unit
    count so the result equals the pooled-sample gradient.
    """
    got = [r for r in replies if r is not None]
    if expected_sites is not None:
        missing = set(expected_sites) - {r.site_id for r in got}
        if missing:
            raise MissingReply(missing)
    if not got:
        raise MissingReply(set())
    dims = {len(r.payload) for r in got}
    if len(dims) != 1:
        raise DimensionMismatch("gradient replies differ in length")
    G = np.array([r.payload for r in got])
    counts = np.array([r.unit_count for r in got], dtype=float)
    if np.all(counts == counts[0]):
        return G.mean(axis=0)
    return (counts @ G) / counts.sum()


# --- fits --------------------------------------------------------------------

@dataclass
class FitConfig:
    rounds: int = 10
    h: float | None = None
    b: float | None = None
    lam: float | None = None
    kernel: KernelKind = KernelKind.EPANECHNIKOV
    T_cd: int = 500
    tol_cd: float = 1e-8
    tol: float = 1e-8
    fce_T_cd: int = 50_000
    fce_tol: float = 1e-10

    def resolve(self, N: int, n: int) -> "FitConfig":
        h0, b0 = default_bandwidths(N, n)
        h = self.h if self.h is not None else h0
        b = self.b if self.b is not None else b0
        lam = self.lam if self.lam is not None else default_lambda(N)
        if not (h > 0 and b >= h):
            raise ValueError(f"bandwidths must satisfy b >= h > 0 (got h={h}, b={b})")
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.rounds < 1:
            raise ValueError("need at least one round")
        return FitConfig(self.rounds, h, b, lam, KernelKind(self.kernel), self.T_cd,
                         self.tol_cd, self.tol, self.fce_T_cd, self.fce_tol)

    def to_json(self) -> dict:
        return {"rounds": self.rounds, "h": self.h, "b": self.b, "lambda": self.lam,
                "kernel": KernelKind(self.kernel).value, "T_cd": self.T_cd,
                "tol_cd": self.tol_cd, "tol": self.tol}


def fit_fce(ws: WeightedSample, sl_h: SmoothedLoss, lam: float, T_cd: int = 50_000,
            tol: float = 1e-10, standardization: Standardization | None = None) -> RuleCoefficients:
    """Minimize risk + lam * ||beta1||^2 on one (pooled) sample."""
    zero = np.zeros(ws.p + 1)
    res = solve_surrogate(ws, zero, zero, sl_h, lam, T_cd, tol, standardization)
    kkt = kkt_residual(ws, res.beta, sl_h, lam)
    if not res.converged or kkt > KKT_TOL:
        log.warning("pooled fit: %d sweeps, converged=%s, KKT residual %.2e",
                    res.sweeps, res.converged, kkt)
    return res.beta


def kkt_residual(ws: WeightedSample, beta, sl_h: SmoothedLoss, lam: float) -> float:
    """Sup-norm of the penalized gradient; zero at the exact minimizer."""
    return float(np.max(np.abs(penalized_gradient(ws, beta, sl_h, lam))))


def fit_initial(central: SiteView, config: FitConfig) -> RuleCoefficients:
    """Central-site-only fit at the local bandwidth ``b``."""
    sl_b = SmoothedLoss(config.kernel, config.b)
    return fit_fce(central.sample, sl_b, config.lam, config.fce_T_cd, config.fce_tol)


@dataclass
class FitReport:
    trajectory: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    transcript: list = field(default_factory=list)
    rounds: int = 0
    standardization: Standardization | None = None
    config: FitConfig | None = None

    @property
    def beta(self) -> RuleCoefficients:
        return RuleCoefficients.from_vector(self.trajectory[-1])

    @property
    def bytes_total(self) -> int:
        return sum(m.nbytes for m in self.transcript)

    def transcript_jsonl(self) -> str:
        return "".join(m.to_json() + "\n" for m in self.transcript)

    def to_json(self) -> str:
        return json.dumps({
            "trajectory": [[float(v) for v in b] for b in self.trajectory],
            "grad_norms": [float(v) for v in self.grad_norms],
            "rounds": self.rounds,
            "bytes": self.bytes_total,
            "transcript": [m.to_record() for m in self.transcript],
        }, sort_keys=True)


def fit_dce(sites: Sequence[SiteView], config: FitConfig, init=None,
            endpoints: Sequence[SiteEndpoint] | None = None) -> FitReport:
    """Distributed fit; site 0 is the coordinator (central site).

    ``config`` must already be resolved (``h``, ``b``, ``lam`` set).  The
    initial coefficients default to the central-only fit.  Rounds stop early
    when successive iterates differ by less than ``config.tol`` in 2-norm.
    """
    if config.h is None or config.b is None or config.lam is None:
        raise ValueError("resolve the config before fitting")
    if not (config.b >= config.h > 0):
        raise ValueError("bandwidths must satisfy b >= h > 0")
    central = sites[0]
    sl_h = SmoothedLoss(config.kernel, config.h)
    sl_b = SmoothedLoss(config.kernel, config.b)
    if endpoints is None:
        endpoints = [SiteEndpoint(s, sl_h) for s in sites]
    site_ids = [e.site_id for e in endpoints]
    _, std = standardize(central.sample.covariates)

    beta = fit_initial(central, config).as_vector() if init is None else (
        init.as_vector() if isinstance(init, RuleCoefficients) else np.asarray(init, float))
    report = FitReport([beta.copy()], [], [], 0, std, config)
    for t in range(1, config.rounds + 1):
        msg = RoundMessage("broadcast", t, beta)
        report.transcript.append(msg)
        replies = [e.handle(msg) for e in endpoints]
        g_global = aggregate(replies, site_ids)
        report.transcript.extend(r for r in replies if r is not None)
        report.grad_norms.append(float(np.linalg.norm(g_global + penalty_gradient(beta, config.lam))))
        shift = risk_gradient(central.sample, beta, sl_b) - g_global
        res = solve_surrogate(central.sample, beta, shift, sl_b, config.lam,
                              config.T_cd, config.tol_cd, std)
        new = res.beta.as_vector()
        if not np.all(np.isfinite(new)):
            raise NonFinite(f"round {t} produced non-finite coefficients")
        step = float(np.linalg.norm(new - beta))
        beta = new
        report.trajectory.append(beta.copy())
        report.rounds = t
        if step < config.tol:
            break
    return report


def fit_avg(sites: Sequence[SiteView], config: FitConfig) -> RuleCoefficients:
    """Mean of per-site fits, each using only that site's data and nuisances."""
    sl_b = SmoothedLoss(config.kernel, config.b)
    fits, failed = [], []
    for s in sites:
        ws = s.local_sample if s.local_sample is not None else s.sample
        try:
            fits.append(fit_fce(ws, sl_b, config.lam, config.fce_T_cd, config.fce_tol).as_vector())
        except ItrError as exc:
            failed.append((s.site_id, str(exc)))
    if not fits:
        raise ItrError(f"every local fit failed: {failed}")
    if failed:
        warnings.warn(f"averaging over {len(fits)} sites; failed: {failed}", RuntimeWarning)
    return RuleCoefficients.from_vector(np.mean(fits, axis=0))
