"""Sweep grid planning, CSV schema, resumability, determinism."""

import csv

import numpy as np
import pytest

from normkit.sweep import (
    CSV_COLUMNS,
    SweepSpec,
    completed_run_ids,
    make_run_id,
    plan_runs,
    run_sweep,
)


def tiny_sweep(tmp_path, name="s.csv", **overrides):
    defaults = dict(
        normalizers=["bn"], batch_sizes=[8], group_counts=["auto"], seeds=[0],
        epochs=3, dataset="synthetic", subset=80, difficulty=1.0,
        out=str(tmp_path / name))
    defaults.update(overrides)
    return SweepSpec(**defaults)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestPlanRuns:
    def test_every_combination_exactly_once(self):
        spec = SweepSpec(normalizers=["bn", "bgn"], batch_sizes=[8, 2],
                         group_counts=[4, 1], seeds=[0, 1], out="x.csv")
        runs = plan_runs(spec)
        # bn ignores the G axis (one run per batch/seed); bgn gets both Gs
        assert len(runs) == 2 * 2 + 2 * 2 * 2
        keys = {(r["kind"], r["batch"], r["group"], r["seed"]) for r in runs}
        assert len(keys) == len(runs)

    def test_auto_group_uses_schedule(self):
        spec = SweepSpec(normalizers=["bgn"], batch_sizes=[64, 2],
                         group_counts=["auto"], seeds=[0], out="x.csv")
        runs = plan_runs(spec)
        by_batch = {r["batch"]: r["group"] for r in runs}
        assert by_batch == {64: 256, 2: 1}

    def test_infeasible_gn_groups_skipped(self, caplog):
        spec = SweepSpec(normalizers=["gn"], batch_sizes=[8],
                         group_counts=[64, 8], seeds=[0], out="x.csv")
        with caplog.at_level("WARNING"):
            runs = plan_runs(spec)
        assert [r["group"] for r in runs] == [8]
        assert "exceeds channel count" in caplog.text

    def test_infeasible_bgn_groups_skipped(self, caplog):
        spec = SweepSpec(normalizers=["bgn"], batch_sizes=[8],
                         group_counts=[100000, 4], seeds=[0], out="x.csv")
        with caplog.at_level("WARNING"):
            runs = plan_runs(spec)
        assert [r["group"] for r in runs] == [4]
        assert "exceeds merged dimension" in caplog.text

    def test_duplicate_resolved_groups_deduplicated(self):
        # auto at batch 2 resolves to G=1, same as the explicit 1
        spec = SweepSpec(normalizers=["bgn"], batch_sizes=[2],
                         group_counts=["auto", 1], seeds=[0], out="x.csv")
        assert len(plan_runs(spec)) == 1

    def test_unknown_normalizer_rejected(self):
        with pytest.raises(ValueError, match="unknown normalizer"):
            SweepSpec(normalizers=["zz"], out="x.csv")


class TestRunSweep:
    def test_row_count_and_schema(self, tmp_path):
        spec = tiny_sweep(tmp_path)
        out = run_sweep(spec)
        rows = read_rows(out)
        # 3 epoch rows + 1 summary row
        assert len(rows) == 4
        with open(out, newline="") as fh:
            header = fh.readline().strip().split(",")
        assert header == CSV_COLUMNS
        assert [r["epoch"] for r in rows] == ["1", "2", "3", "summary"]
        assert all(r["status"] == "ok" for r in rows)
        assert rows[0]["normalizer"] == "bn"
        assert rows[0]["worker_shards"] == "1"

    def test_summary_uses_median_of_last_five(self, tmp_path):
        spec = tiny_sweep(tmp_path, epochs=3)
        out = run_sweep(spec)
        rows = read_rows(out)
        accs = [float(r["test_acc"]) for r in rows if r["epoch"] != "summary"]
        summary = [r for r in rows if r["epoch"] == "summary"][0]
        assert float(summary["test_acc"]) == float(np.median(accs))

    def test_resume_skips_completed_runs(self, tmp_path):
        spec = tiny_sweep(tmp_path)
        out = run_sweep(spec)
        before = out.read_text()
        run_sweep(spec)                     # everything already done
        assert out.read_text() == before

        spec2 = tiny_sweep(tmp_path, seeds=[0, 1])
        run_sweep(spec2)                    # only the new seed runs
        rows = read_rows(out)
        assert len(rows) == 8
        assert before in out.read_text()    # original rows untouched

    def test_completed_run_ids_reads_summaries(self, tmp_path):
        spec = tiny_sweep(tmp_path)
        out = run_sweep(spec)
        done = completed_run_ids(out)
        assert done == {make_run_id(spec, "bn", 8, 1, 0)}

    def test_rows_deterministic_across_sweeps(self, tmp_path):
        rows_a = read_rows(run_sweep(tiny_sweep(tmp_path, name="a.csv")))
        rows_b = read_rows(run_sweep(tiny_sweep(tmp_path, name="b.csv")))
        assert len(rows_a) == len(rows_b)
        for ra, rb in zip(rows_a, rows_b):
            for col in CSV_COLUMNS:
                if col == "wall_time_s":
                    continue
                assert ra[col] == rb[col], col

    def test_diverged_run_recorded_and_sweep_continues(self, tmp_path):
        spec = tiny_sweep(tmp_path, normalizers=["bn", "ln"], epochs=2, lr=1e18)
        out = run_sweep(spec)
        rows = read_rows(out)
        summaries = [r for r in rows if r["epoch"] == "summary"]
        assert len(summaries) == 2
        assert all(s["status"] == "diverged" for s in summaries)

    def test_mismatched_existing_schema_rejected(self, tmp_path):
        out = tmp_path / "bad.csv"
        out.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="unexpected schema"):
            run_sweep(tiny_sweep(tmp_path, name="bad.csv"))

    def test_parallel_workers_match_sequential(self, tmp_path, monkeypatch):
        spec_seq = tiny_sweep(tmp_path, name="seq.csv", seeds=[0, 1], epochs=2)
        rows_seq = read_rows(run_sweep(spec_seq))
        monkeypatch.setenv("NORMKIT_THREADS", "2")
        spec_par = tiny_sweep(tmp_path, name="par.csv", seeds=[0, 1], epochs=2)
        rows_par = read_rows(run_sweep(spec_par))
        for ra, rb in zip(rows_seq, rows_par):
            for col in CSV_COLUMNS:
                if col == "wall_time_s":
                    continue
                assert ra[col] == rb[col], col
