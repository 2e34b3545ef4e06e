import filecmp
import json

import numpy as np
import pytest

from smoothitr.errors import BadShape
from smoothitr.experiments import (RESULT_FIELDS, SUMMARY_FIELDS, ExperimentConfig, ResultRow,
                                   aggregate_table, format_table, rep_seed, run_cell,
                                   run_experiment, write_results_csv, write_summary_csv)


def small(**kw):
    base = dict(scenarios=("a",), N=(400,), n=(200,), reps=2, n_test=2000)
    base.update(kw)
    return ExperimentConfig(**base)


def row(ccr, rep=0, method="DCE", value=1.0, **kw):
    return ResultRow("a", "obs", 1000, 200, method, rep, ccr=ccr, value=value, **kw)


class TestConfig:
    def test_unbalanced_cell_rejected(self):
        with pytest.raises(BadShape):
            ExperimentConfig(N=(1000,), n=(300,))

    def test_reps_positive(self):
        with pytest.raises(ValueError):
            ExperimentConfig(reps=0)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            ExperimentConfig(methods=("SVM",))

    def test_cells_skip_n_above_N(self):
        assert ExperimentConfig(N=(200, 1000), n=(200, 500)).cells == [(200, 200), (1000, 200),
                                                                      (1000, 500)]

    def test_json_round_trip(self):
        cfg = small(lam=0.01, methods=("fce", "dce"))
        back = ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json())))
        assert back == cfg and back.methods == ("FCE", "DCE")

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_json({"repz": 3})


class TestRunCell:
    def test_two_fce_rows(self):
        rows = run_cell(small(methods=("FCE",)), "a", "obs", 400, 200)
        assert len(rows) == 2 and [r.rep for r in rows] == [0, 1]
        assert all(0.0 <= r.ccr <= 1.0 and not r.error for r in rows)
        assert rep_seed(0, "a", "obs", 400, 200, 0) != rep_seed(0, "a", "obs", 400, 200, 1)

    def test_single_site_dce_equals_fce(self):
        rows = run_cell(small(N=(300,), n=(300,), reps=1, methods=("FCE", "DCE")),
                        "b", "obs", 300, 300)
        fce, dce = rows
        assert fce.ccr == dce.ccr and fce.value == dce.value

    def test_bookkeeping(self):
        rows = run_cell(small(methods=("DCE", "Avg", "Initial"), reps=1, rounds=3), "a", "obs",
                        400, 200)
        dce, avg, init = rows
        assert 1 <= dce.rounds <= 3 and dce.bytes == dce.rounds * 3 * (16 + 48)
        assert avg.rounds == 1 and avg.bytes == 2 * (16 + 48)
        assert init.bytes == 0
        assert all(r.seconds is None for r in rows)

    def test_timing_column(self):
        rows = run_cell(small(methods=("Initial",), reps=1, timing=True), "a", "obs", 400, 200)
        assert rows[0].seconds > 0

    def test_failure_recorded_not_raised(self):
        rows = run_cell(small(methods=("DCE",), reps=1, h=0.5, b=0.1), "a", "obs", 400, 200)
        assert rows[0].error.startswith("ValueError") and np.isnan(rows[0].ccr)

    def test_scenario_a_dce_accuracy(self):
        cfg = ExperimentConfig(scenarios=("a",), N=(1000,), n=(200,), reps=20, methods=("DCE",))
        rows = run_experiment(cfg)
        assert np.mean([r.ccr for r in rows]) >= 0.97


class TestAggregate:
    def test_mean_and_sd(self):
        (s,) = aggregate_table([row(0.9, 0), row(1.0, 1)])
        assert s.ccr_mean == pytest.approx(0.95) and s.ccr_sd == pytest.approx(0.0707, abs=1e-4)
        assert s.reps == 2 and not s.single

    def test_single_row_flagged(self):
        (s,) = aggregate_table([row(0.9)])
        assert s.ccr_sd == 0.0 and s.single
        assert "*" in format_table([s])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        rows = [row(float(rng.uniform()), r, m, float(rng.normal()))
                for m in ("DCE", "Avg") for r in range(5)]
        perm = [rows[i] for i in rng.permutation(len(rows))]
        assert aggregate_table(perm) == aggregate_table(rows)

    def test_errors_skipped(self):
        (s,) = aggregate_table([row(0.9, 0), row(float("nan"), 1, error="NonFinite: x")])
        assert s.ccr_mean == 0.9 and s.single

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_table([])

    def test_method_order(self):
        out = aggregate_table([row(0.5, method="Initial"), row(0.9, method="DCE"),
                               row(0.7, method="Avg")])
        assert [s.method for s in out] == ["DCE", "Avg", "Initial"]


class TestOutput:
    def test_results_byte_identical(self, tmp_path):
        cfg = small(methods=("DCE", "Avg"))
        write_results_csv(run_experiment(cfg), tmp_path / "a.csv")
        write_results_csv(run_experiment(cfg), tmp_path / "b.csv")
        assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == ",".join(RESULT_FIELDS) and len(lines) == 5

    def test_summary_csv(self, tmp_path):
        write_summary_csv(aggregate_table([row(0.9, 0), row(1.0, 1)]), tmp_path / "s.csv")
        header, line = (tmp_path / "s.csv").read_text().splitlines()
        assert header == ",".join(SUMMARY_FIELDS)
        assert line.startswith("a,obs,1000,200,DCE,0.95")

    def test_blank_missing_reals(self):
        assert row(float("nan")).to_csv()[6] == "" and row(0.5).to_csv()[9] == ""

    def test_format_table(self):
        text = format_table(aggregate_table([row(0.9, 0), row(1.0, 1)]), "ccr")
        assert "0.950(0.071)" in text
