"""Simulation designs: covariates, treatment assignment, outcomes and sites.

Units are generated in blocks of ``BLOCK`` rows, each block drawing from its
own counter-based stream, so datasets are identical however the blocks are
scheduled.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import BadShape, DimensionMismatch
from .rng import stream

BLOCK = 4096
OUTCOME_SLOPES = np.array([2.0, 3.0, 4.0, 5.0, 6.0])
OBS_PROPENSITY = (0.1, 0.25, 0.25)


class Scenario(str, enum.Enum):
    A = "a"
    B = "b"
    C = "c"
    D = "d"

    @property
    def min_p(self) -> int:
        return 5 if self is Scenario.A else 3


class Design(str, enum.Enum):
    RCT = "rct"
    OBS = "obs"


def _as_enum(cls, value):
    if isinstance(value, cls):
        return value
    value = str(value).lower()
    aliases = {"observational": "obs", "randomized": "rct"}
    return cls(aliases.get(value, value))


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: Scenario = Scenario.A
    design: Design = Design.OBS
    N: int = 1000
    M: int = 1
    p: int = 5
    seed: int = 0
    noise_sd: float = 0.5
    covariates: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "scenario", _as_enum(Scenario, self.scenario))
        object.__setattr__(self, "design", _as_enum(Design, self.design))
        if self.N < 1 or self.M < 1:
            raise BadShape("N and M must be positive")
        if self.M > self.N:
            raise BadShape(f"more sites ({self.M}) than units ({self.N})")
        if self.p < max(5, self.scenario.min_p):
            raise DimensionMismatch("the outcome model uses X1..X5, so p >= 5")
        if self.covariates not in ("uniform", "normal"):
            raise ValueError(f"unknown covariate law {self.covariates!r}")

    @property
    def balanced(self) -> bool:
        return self.N % self.M == 0

    @property
    def n(self) -> int:
        return self.N // self.M

    def to_json(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        d["design"] = self.design.value
        return d


@dataclass
class GeneratedDataset:
    covariates: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray
    true_cte: np.ndarray | None = None
    true_propensity: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=float)
        self.treatments = np.asarray(self.treatments, dtype=np.int64)
        self.outcomes = np.asarray(self.outcomes, dtype=float)
        if self.ids is None:
            self.ids = np.arange(1, len(self.outcomes) + 1)

    @property
    def N(self) -> int:
        return self.outcomes.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def subset(self, idx) -> "GeneratedDataset":
        pick = (lambda a: None if a is None else a[idx])
        return GeneratedDataset(self.covariates[idx], self.treatments[idx], self.outcomes[idx],
                                pick(self.true_cte), pick(self.true_propensity), self.ids[idx])


def true_cte(scenario, x):
    """Conditional treatment effect; ``x`` is one row or an N x p matrix."""
    scenario = _as_enum(Scenario, scenario)
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] < scenario.min_p:
        raise DimensionMismatch(f"scenario {scenario.value} needs p >= {scenario.min_p}")
    x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2]
    if scenario is Scenario.A:
        out = X[:, :5] @ np.arange(1.0, 6.0)
    elif scenario is Scenario.B:
        out = 0.4 * np.abs(x3) * (1.0 - x1 - x2)
    elif scenario is Scenario.C:
        out = 1.8 * (0.9 - x1)
    else:
        out = np.arctan(np.exp(1.0 + x1) - 3.0 * x2 - 5.0)
    return float(out[0]) if single else out


def propensity(design, x):
    design = _as_enum(Design, design)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if design is Design.RCT:
        pi = np.full(X.shape[0], 0.5)
    else:
        g0, g1, g2 = OBS_PROPENSITY
        pi = expit(g0 + g1 * X[:, 0] + g2 * X[:, 1])
    return float(pi[0]) if np.ndim(x) == 1 else pi


def assign_treatment(design, x, rng: np.random.Generator):
    """Bernoulli draw with the design's propensity; returns ``(a, pi)``."""
    pi = propensity(design, x)
    u = rng.random(np.shape(pi))
    a = (u < pi).astype(np.int64)
    return (int(a), pi) if np.ndim(pi) == 0 else (a, pi)


def outcome_mean(x, a, delta_star):
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[1] < 5:
        raise DimensionMismatch("outcome model needs p >= 5")
    mean = 1.0 + X[:, :5] @ OUTCOME_SLOPES + np.asarray(a) * np.asarray(delta_star)
    return float(mean[0]) if np.ndim(x) == 1 else mean


def gen_outcome(x, a, delta_star, rng: np.random.Generator, noise_sd: float = 0.5):
    mean = outcome_mean(x, a, delta_star)
    return mean + noise_sd * rng.standard_normal(np.shape(mean))


def partition_sites(N: int, M: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Random permutation of 0..N-1 cut into M contiguous blocks.

    When M does not divide N the first ``N % M`` sites get one extra unit.
    """
    if M < 1 or M > N:
        raise BadShape(f"cannot split {N} units over {M} sites")
    perm = rng.permutation(N)
    base, extra = divmod(N, M)
    sizes = [base + (k < extra) for k in range(M)]
    bounds = np.cumsum([0] + sizes)
    return [np.sort(perm[bounds[k]:bounds[k + 1]]) for k in range(M)]


def _draw_covariates(rng, m, p, law):
    if law == "uniform":
        return rng.uniform(-1.0, 1.0, size=(m, p))
    return rng.standard_normal((m, p))


def gen_dataset(spec: ScenarioSpec, stream_tag: str = "train") -> GeneratedDataset:
    """Draw a full dataset, storing the true contrast and propensity per unit."""
    X, A, Y, D, P = [], [], [], [], []
    for k, start in enumerate(range(0, spec.N, BLOCK)):
        m = min(BLOCK, spec.N - start)
        rng = stream(spec.seed, stream_tag, "units", k)
        x = _draw_covariates(rng, m, spec.p, spec.covariates)
        d = true_cte(spec.scenario, x)
        a, pi = assign_treatment(spec.design, x, rng)
        y = gen_outcome(x, a, d, rng, spec.noise_sd)
        X.append(x), A.append(a), Y.append(y), D.append(d), P.append(pi)
    return GeneratedDataset(np.vstack(X), np.concatenate(A), np.concatenate(Y),
                            np.concatenate(D), np.concatenate(P))


def site_partition(spec: ScenarioSpec, stream_tag: str = "train") -> list[np.ndarray]:
    return partition_sites(spec.N, spec.M, stream(spec.seed, stream_tag, "partition"))


# --- CSV -------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def write_dataset_csv(ds: GeneratedDataset, path, truth: bool = True) -> None:
    truth = truth and ds.true_cte is not None and ds.true_propensity is not None
    header = ["id", "y", "a"] + [f"x{j + 1}" for j in range(ds.p)]
    if truth:
        header += ["delta_star", "prop_true"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.N):
            row = [str(int(ds.ids[i])), _fmt(ds.outcomes[i]), str(int(ds.treatments[i]))]
            row += [_fmt(v) for v in ds.covariates[i]]
            if truth:
                row += [_fmt(ds.true_cte[i]), _fmt(ds.true_propensity[i])]
            w.writerow(row)


def read_dataset_csv(path) -> GeneratedDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise BadShape(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    col = {name: j for j, name in enumerate(header)}
    for need in ("y", "a"):
        if need not in col:
            raise BadShape(f"{path}: missing column {need!r}")
    xcols = sorted((name for name in header if name.startswith("x") and name[1:].isdigit()),
                   key=lambda s: int(s[1:]))
    if not xcols:
        raise BadShape(f"{path}: no covariate columns x1..xp")
    data = np.array(body, dtype=object)
    if data.size == 0:
        raise BadShape(f"{path}: no data rows")
    get = (lambda name, dt=float: data[:, col[name]].astype(dt))
    A = get("a", float)
    if not np.all(np.isin(A, (0.0, 1.0))):
        raise BadShape(f"{path}: treatment column must be 0/1")
    X = np.column_stack([get(c) for c in xcols])
    ids = get("id", float).astype(np.int64) if "id" in col else None
    cte = get("delta_star") if "delta_star" in col else None
    prop = get("prop_true") if "prop_true" in col else None
    return GeneratedDataset(X, A.astype(np.int64), get("y"), cte, prop, ids)


def write_spec_json(spec: ScenarioSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
