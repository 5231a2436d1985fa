"""
Tests for result export
CSV tables, JSON summaries and the run manifest
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.export import (
    DENSITY_COLUMNS,
    MANIFEST_NAME,
    ResultWriter,
    file_checksum,
    read_csv_table,
    write_results,
)
from src.lab import ERROR_COLUMNS, SPLITTING_COLUMNS, ConvergenceReport, ErrorRow, fit_loglog_slope
from src.meanfield import DensityEvolution, UCellMesh
from src.particles import grid_locations
from src.performance_monitor import PerformanceMonitor
from src.plotting import PlotStyle


def _error_report():
    rows = [ErrorRow(N=64, M=M, error=0.8 * M ** -0.5, stderr=0.01 * M ** -0.5, replicas=8, dt=0.01)
            for M in (8, 16, 32, 64)]
    fit = fit_loglog_slope([(r.M, r.error, r.stderr) for r in rows], variable="M", quantity="coupled_error")
    return ConvergenceReport(kind="coupled-error", config_hash="abc", master_seed=3, error_rows=rows,
                             slopes=[fit], tolerances={"triangle_slack": 1e-9})


def _density():
    xgrid = grid_locations(2, 1)
    ucells = UCellMesh(1.0, 4)
    masses = np.full((2, 2, 1, 4), 0.25)
    moments = np.full((2, 2, 1), 0.5)
    times = np.array([0.0, 0.5])
    return DensityEvolution(xgrid=xgrid, ucells=ucells, times=times, moment_times=times,
                            moments=moments, dt=0.5, masses=masses)


# ============================================================================
# Property-Based Tests
# ============================================================================

class TestCsvRoundTrip:
    """Lossless decimal serialization"""

    @settings(max_examples=100, deadline=None)
    @given(values=st.lists(st.floats(allow_nan=False, allow_infinity=False, min_value=1e-300),
                           min_size=1, max_size=20))
    def test_write_then_read_is_bit_exact(self, tmp_path_factory, values):
        """
        **Feature: result-export, Property 1: 17-digit CSV round-trip**

        Any finite binary64 value read back from a written table equals the
        value that was written.
        """
        writer = ResultWriter(tmp_path_factory.mktemp("csv"), monitor=PerformanceMonitor())
        path = writer.write_table("values.csv", ["index", "value"], ([i, v] for i, v in enumerate(values)))
        columns, rows = read_csv_table(path)
        assert columns == ["index", "value"]
        assert [row["index"] for row in rows] == list(range(len(values)))
        assert [float(row["value"]) for row in rows] == values


# ============================================================================
# Unit Tests
# ============================================================================

class TestResultWriter:
    """Tests for ResultWriter"""

    def test_manifest_is_reserved(self, tmp_path):
        writer = ResultWriter(tmp_path, monitor=PerformanceMonitor())
        with pytest.raises(ValueError, match="reserved"):
            writer.write_json(MANIFEST_NAME, {})

    def test_register_missing_file(self, tmp_path):
        writer = ResultWriter(tmp_path, monitor=PerformanceMonitor())
        with pytest.raises(FileNotFoundError):
            writer.register("rates.svg")

    def test_none_and_bool_cells(self, tmp_path):
        writer = ResultWriter(tmp_path, monitor=PerformanceMonitor())
        path = writer.write_table("flags.csv", ["a", "b", "c"], [[None, True, 2]])
        _, rows = read_csv_table(path)
        assert rows == [{"a": None, "b": True, "c": 2}]

    def test_finalize_lists_files_with_checksums(self, tmp_path):
        monitor = PerformanceMonitor()
        with monitor.track("stage", "transport"):
            pass
        writer = ResultWriter(tmp_path / "nested" / "out", monitor=monitor)
        writer.write_json("a.json", {"x": np.float64(1.5), "y": np.arange(3)})
        writer.write_text("b.txt", "hello\n")
        manifest = writer.finalize("hash", np.int64(7), {"tol": 1e-10})
        assert [entry["name"] for entry in manifest.files] == ["a.json", "b.txt"]
        on_disk = json.loads((tmp_path / "nested" / "out" / MANIFEST_NAME).read_text())
        assert on_disk["master_seed"] == 7
        assert on_disk["timings"]["total_stages"] == 1
        assert json.loads((tmp_path / "nested" / "out" / "a.json").read_text()) == {"x": 1.5, "y": [0, 1, 2]}


class TestWriteResults:
    """Tests for write_results"""

    def test_empty_report(self, tmp_path):
        files = write_results(ConvergenceReport(kind="coupled-error"), tmp_path, monitor=PerformanceMonitor())
        assert files == ["errors.csv", "wasserstein.csv", "rate_table.txt", "summary.json", MANIFEST_NAME]
        assert read_csv_table(tmp_path / "errors.csv") == (ERROR_COLUMNS, [])
        assert read_csv_table(tmp_path / "wasserstein.csv") == (SPLITTING_COLUMNS, [])

    def test_manifest_checksums_match_content(self, tmp_path):
        files = write_results(_error_report(), tmp_path, monitor=PerformanceMonitor())
        manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
        assert [entry["name"] for entry in manifest["files"]] == files[:-1]
        for entry in manifest["files"]:
            assert entry["sha256"] == file_checksum(tmp_path / entry["name"])
        assert manifest["config_hash"] == "abc"
        assert manifest["tolerances"] == {"triangle_slack": 1e-9}

    def test_error_rows_round_trip(self, tmp_path):
        report = _error_report()
        write_results(report, tmp_path, monitor=PerformanceMonitor())
        _, rows = read_csv_table(tmp_path / "errors.csv")
        assert [row["error"] for row in rows] == [r.error for r in report.error_rows]
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["slopes"][0]["slope"] == report.slopes[0].slope
        assert summary["master_seed"] == 3

    def test_plot_is_registered(self, tmp_path):
        files = write_results(_error_report(), tmp_path, monitor=PerformanceMonitor(),
                              plot_style=PlotStyle(xlabel="M"), extra={"command": "rate-m"})
        assert "rates.svg" in files
        assert files.index("rates.svg") < files.index(MANIFEST_NAME)
        assert json.loads((tmp_path / "summary.json").read_text())["command"] == "rate-m"

    def test_reference_density_tables(self, tmp_path):
        report = ConvergenceReport(kind="empirical-measure", reference=_density())
        files = write_results(report, tmp_path, monitor=PerformanceMonitor())
        assert "density.csv" in files and "density_nodes.csv" in files
        columns, rows = read_csv_table(tmp_path / "density.csv")
        assert columns == DENSITY_COLUMNS
        assert len(rows) == 2 * 2 * 4
        assert sum(row["mass"] for row in rows if row["t"] == 0.5 and row["node"] == 1) == pytest.approx(1.0)
        _, nodes = read_csv_table(tmp_path / "density_nodes.csv")
        assert [row["x0"] for row in nodes] == [0.25, 0.75]

    def test_nonpositive_series_skips_plot(self, tmp_path):
        report = ConvergenceReport(kind="coupled-error",
                                   error_rows=[ErrorRow(N=4, M=2, error=0.0, stderr=0.0, replicas=2, dt=0.01)])
        files = write_results(report, tmp_path, monitor=PerformanceMonitor(), plot_style=PlotStyle())
        assert "rates.svg" not in files
