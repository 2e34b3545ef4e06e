"""Monte Carlo driver: scenarios x designs x (N, n) cells x methods x replicates.

Each replicate draws its own training data from a seed derived from the
master seed and the cell coordinates; all methods are fitted on that same
draw, so method comparisons are paired.  The 10,000-unit test set depends
only on (scenario, design, rep) and comes from an independent stream.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadShape, ItrError
from .evaluation import empirical_value, ccr
from .federation import (HEADER_BYTES, REAL_BYTES, FitConfig, build_sites, fit_avg, fit_dce,
                         fit_fce, fit_initial)
from .nuisance import WeightedSample, aipwe_contrasts, fit_nuisance, pseudo_labels
from .rng import derive_seed
from .simgen import Scenario, ScenarioSpec, gen_dataset, site_partition
from .smoothing import KernelKind, SmoothedLoss

log = logging.getLogger(__name__)

METHODS = ("DCE", "FCE", "Avg", "Initial")
LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
RESULT_FIELDS = ("scenario", "design", "N", "n", "method", "rep", "ccr", "value",
                 "rounds", "seconds", "bytes", "error")
SUMMARY_FIELDS = ("scenario", "design", "N", "n", "method", "ccr_mean", "ccr_sd",
                  "value_mean", "value_sd")


def _auto(v):
    return None if v in (None, "auto") else v


@dataclass
class ExperimentConfig:
    scenarios: tuple = ("a", "b", "c", "d")
    designs: tuple = ("obs",)
    N: tuple = (1000, 3000, 5000)
    n: tuple = (200, 500)
    reps: int = 20
    methods: tuple = METHODS
    h: float | str | None = "auto"
    b: float | str | None = "auto"
    lam: float | str | None = "auto"
    rounds: int = 10
    kernel: str = "epanechnikov"
    seed: int = 0
    n_test: int = 10_000
    p: int = 5
    covariates: str = "uniform"
    nuisance: str = "dnc"
    timing: bool = False
    results: str | None = None
    summary: str | None = None

    def __post_init__(self):
        self.scenarios = tuple(Scenario(str(s).lower()).value for s in self.scenarios)
        self.designs = tuple(ScenarioSpec(design=d).design.value for d in self.designs)
        self.N = tuple(int(v) for v in np.atleast_1d(self.N))
        self.n = tuple(int(v) for v in np.atleast_1d(self.n))
        known = {m.lower(): m for m in METHODS}
        bad = [m for m in self.methods if str(m).lower() not in known]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        self.methods = tuple(known[str(m).lower()] for m in self.methods)
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        for N, n in self.cells:
            if N % n:
                raise BadShape(f"N={N} is not a multiple of n={n}; sites must be balanced")
        if not (self.lam in (None, "auto", "grid") or float(self.lam) >= 0):
            raise ValueError("lambda must be 'auto', 'grid' or a nonnegative number")
        KernelKind(self.kernel)

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [(N, n) for N in self.N for n in self.n if n <= N]

    @classmethod
    def from_json(cls, obj) -> "ExperimentConfig":
        if isinstance(obj, (str, Path)):
            obj = json.loads(Path(obj).read_text(encoding="utf-8"))
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        unknown = set(obj) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class ResultRow:
    scenario: str
    design: str
    N: int
    n: int
    method: str
    rep: int
    ccr: float = math.nan
    value: float = math.nan
    rounds: int = 0
    seconds: float | None = None
    bytes: int = 0
    error: str = ""

    def sort_key(self):
        return (self.scenario, self.design, self.N, self.n, METHODS.index(self.method), self.rep)

    def to_csv(self) -> list[str]:
        def real(v):
            return "" if v is None or not math.isfinite(v) else repr(float(v))
        return [self.scenario, self.design, str(self.N), str(self.n), self.method, str(self.rep),
                real(self.ccr), real(self.value), str(self.rounds), real(self.seconds),
                str(self.bytes), self.error]


def rep_seed(master: int, scenario, design, N, n, rep) -> int:
    return derive_seed(master, scenario, design, N, n, rep)


def eval_seed(master: int, scenario, design, rep) -> int:
    return derive_seed(master, scenario, design, "test", rep)


def _pooled_sample(ds) -> WeightedSample:
    pf, of = fit_nuisance(ds.covariates, ds.treatments, ds.outcomes)
    return pseudo_labels(aipwe_contrasts(ds.covariates, ds.treatments, ds.outcomes, pf, of),
                         ds.covariates)


def select_lambda(ds, partition, fit_cfg: FitConfig, nuisance: str, grid=LAMBDA_GRID,
                  seed: int = 0) -> float:
    """Pick the DCE penalty maximizing the IPW value on a held-out 20% split."""
    rng = np.random.default_rng(seed)
    hold = np.zeros(ds.N, dtype=bool)
    hold[rng.permutation(ds.N)[: max(1, ds.N // 5)]] = True
    keep_idx = np.flatnonzero(~hold)
    remap = -np.ones(ds.N, dtype=np.int64)
    remap[keep_idx] = np.arange(keep_idx.size)
    parts = [remap[idx[~hold[idx]]] for idx in partition]
    train, val = ds.subset(keep_idx), ds.subset(np.flatnonzero(hold))
    sites = build_sites(train.covariates, train.treatments, train.outcomes, parts, nuisance)
    best, best_val = grid[0], -math.inf
    for lam in grid:
        cfg = replace(fit_cfg, lam=lam)
        try:
            beta = fit_dce(sites, cfg).beta
            v = empirical_value(beta, val)
        except ItrError:
            continue
        if v > best_val:
            best, best_val = lam, v
    return best


def run_rep(config: ExperimentConfig, scenario: str, design: str, N: int, n: int,
            rep: int) -> list[ResultRow]:
    """Fit every requested method on one replicate and score it on the test set."""
    M = N // n
    base = dict(scenario=scenario, design=design, N=N, n=n, rep=rep)
    try:
        spec = ScenarioSpec(scenario, design, N, M, config.p,
                            rep_seed(config.seed, scenario, design, N, n, rep),
                            covariates=config.covariates)
        ds = gen_dataset(spec)
        partition = site_partition(spec)
        test = gen_dataset(replace(spec, N=config.n_test, M=1,
                                   seed=eval_seed(config.seed, scenario, design, rep)), "test")
        sites = build_sites(ds.covariates, ds.treatments, ds.outcomes, partition, config.nuisance)
        fit_cfg = FitConfig(rounds=config.rounds, h=_auto(config.h), b=_auto(config.b),
                            lam=None if config.lam in ("auto", "grid") else config.lam,
                            kernel=KernelKind(config.kernel)).resolve(N, n)
        if config.lam == "grid":
            fit_cfg = replace(fit_cfg, lam=select_lambda(ds, partition, fit_cfg, config.nuisance,
                                                         seed=spec.seed))
    except (ItrError, ValueError, FloatingPointError) as exc:
        return [ResultRow(method=m, error=f"{type(exc).__name__}: {exc}", **base)
                for m in config.methods]

    rows = []
    for method in config.methods:
        row = ResultRow(method=method, **base)
        t0 = time.perf_counter()
        try:
            if method == "FCE":
                beta = fit_fce(_pooled_sample(ds), SmoothedLoss(fit_cfg.kernel, fit_cfg.h),
                               fit_cfg.lam, fit_cfg.fce_T_cd, fit_cfg.fce_tol)
            elif method == "DCE":
                report = fit_dce(sites, fit_cfg)
                beta, row.rounds, row.bytes = report.beta, report.rounds, report.bytes_total
            elif method == "Avg":
                beta = fit_avg(sites, fit_cfg)
                row.rounds, row.bytes = 1, M * (HEADER_BYTES + REAL_BYTES * (config.p + 1))
            else:
                beta = fit_initial(sites[0], fit_cfg)
            row.ccr = ccr(beta, test)
            row.value = empirical_value(beta, test)
        except (ItrError, ValueError, FloatingPointError) as exc:
            row.error = f"{type(exc).__name__}: {exc}"
        if config.timing:
            row.seconds = time.perf_counter() - t0
        rows.append(row)
    return rows


def run_cell(config: ExperimentConfig, scenario: str, design: str, N: int, n: int) -> list[ResultRow]:
    rows = []
    for rep in range(config.reps):
        rows.extend(run_rep(config, scenario, design, N, n, rep))
    return rows


def _worker_count(n_tasks: int) -> int:
    cap = os.environ.get("ITR_THREADS")
    workers = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(workers, n_tasks))


def _run_task(args):
    return run_rep(*args)


def run_experiment(config: ExperimentConfig) -> list[ResultRow]:
    """All cells and reps, sorted deterministically regardless of scheduling."""
    tasks = [(config, s, d, N, n, r)
             for s, d, (N, n) in itertools.product(config.scenarios, config.designs, config.cells)
             for r in range(config.reps)]
    workers = _worker_count(len(tasks))
    if workers == 1:
        chunks = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_task, tasks))
    return sorted((r for c in chunks for r in c), key=ResultRow.sort_key)


@dataclass
class SummaryRow:
    scenario: str
    design: str
    N: int
    n: int
    method: str
    ccr_mean: float
    ccr_sd: float
    value_mean: float
    value_sd: float
    reps: int
    single: bool = field(default=False)

    def to_csv(self) -> list[str]:
        def real(v):
            return "" if not math.isfinite(v) else repr(float(v))
        return [self.scenario, self.design, str(self.N), str(self.n), self.method,
                real(self.ccr_mean), real(self.ccr_sd), real(self.value_mean), real(self.value_sd)]


def _mean_sd(xs):
    xs = np.asarray([x for x in xs if math.isfinite(x)], dtype=float)
    if xs.size == 0:
        return math.nan, math.nan
    if xs.size == 1:
        return float(xs[0]), 0.0
    return float(np.mean(xs)), float(np.std(xs, ddof=1))


def aggregate_table(rows) -> list[SummaryRow]:
    """Mean and sample sd (divisor reps-1) per cell and method; failed reps are skipped.

    A group with a single successful rep reports sd 0 and ``single=True``.
    """
    rows = sorted(rows, key=ResultRow.sort_key)
    if not rows:
        raise ValueError("no result rows to aggregate")
    out = []
    for key, grp in itertools.groupby(rows, key=lambda r: r.sort_key()[:5]):
        grp = [r for r in grp if not r.error]
        cm, cs = _mean_sd([r.ccr for r in grp])
        vm, vs = _mean_sd([r.value for r in grp])
        first = key
        out.append(SummaryRow(first[0], first[1], first[2], first[3], METHODS[first[4]],
                              cm, cs, vm, vs, len(grp), len(grp) == 1))
    return out


def write_results_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in sorted(rows, key=ResultRow.sort_key):
            w.writerow(r.to_csv())


def write_summary_csv(summary, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for s in summary:
            w.writerow(s.to_csv())


def format_table(summary, metric: str = "ccr") -> str:
    """Text table with one row per cell and one "mean(sd)" column per method."""
    methods = [m for m in METHODS if any(s.method == m for s in summary)]
    cells = {}
    for s in summary:
        cells.setdefault((s.scenario, s.design, s.N, s.n), {})[s.method] = s
    head = ["scenario", "design", "N", "n"] + methods
    lines = [head]
    for key in sorted(cells):
        row = [key[0], key[1], str(key[2]), str(key[3])]
        for m in methods:
            s = cells[key].get(m)
            if s is None:
                row.append("-")
                continue
            mean, sd = getattr(s, f"{metric}_mean"), getattr(s, f"{metric}_sd")
            row.append(f"{mean:.3f}({sd:.3f})" + ("*" if s.single else ""))
        lines.append(row)
    widths = [max(len(r[j]) for r in lines) for j in range(len(head))]
    text = "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in lines)
    if any(s.single for s in summary):
        text += "\n* single successful replicate; sd undefined"
    return text
