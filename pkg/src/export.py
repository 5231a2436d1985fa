"""
Result export for laboratory runs
Writes CSV tables, JSON summaries and the run manifest (always last)
"""

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src import __version__
from src.lab import (
    ERROR_COLUMNS,
    SPLITTING_COLUMNS,
    ConvergenceReport,
    format_value,
    parse_value,
    rate_table,
)
from src.meanfield import DensityEvolution
from src.performance_monitor import PerformanceMonitor, get_performance_monitor
from src.plotting import PlotStyle, render_plot, report_series

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    """Provenance record of one output directory"""
    config_hash: str
    master_seed: int
    code_version: str
    started_at: str
    finished_at: str
    tolerances: Dict[str, float] = field(default_factory=dict)
    files: List[Dict[str, Any]] = field(default_factory=list)
    timings: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def file_checksum(path: Path) -> str:
    """SHA-256 hex digest of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def read_csv_table(path) -> Tuple[List[str], List[Dict[str, Any]]]:
    """
    Read a table written by ResultWriter

    Returns:
        (columns, rows) with values parsed back to int, float, bool or None
    """
    with open(path, 'r', newline='') as f:
        reader = csv.reader(f)
        columns = next(reader)
        rows = [{name: parse_value(value) for name, value in zip(columns, record)} for record in reader]
    return columns, rows


class ResultWriter:
    """Writes the files of one run and finishes with the manifest"""

    def __init__(self, out_dir, monitor: Optional[PerformanceMonitor] = None):
        """
        Initialize the writer

        Args:
            out_dir: Output directory (created when missing)
            monitor: Stage timer whose summary goes into the manifest
        """
        self.out_dir = Path(out_dir)
        self.monitor = monitor or get_performance_monitor()
        self.started_at = datetime.now().isoformat()
        self.written: List[str] = []
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"Cannot create output directory {self.out_dir}: {e}") from e

    def _path(self, name: str) -> Path:
        if name == MANIFEST_NAME:
            raise ValueError(f"{MANIFEST_NAME} is reserved for the run manifest")
        return self.out_dir / name

    def _record(self, name: str) -> Path:
        if name not in self.written:
            self.written.append(name)
        return self.out_dir / name

    def write_table(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """
        Write a CSV table with a header row and 17-digit decimals

        Args:
            name: File name inside the output directory
            columns: Header
            rows: Value sequences in column order

        Returns:
            Path of the written file
        """
        path = self._path(name)
        try:
            with open(path, 'w', newline='') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(columns)
                for row in rows:
                    writer.writerow([format_value(value) for value in row])
        except OSError as e:
            raise OSError(f"Failed to write {path}: {e}") from e
        return self._record(name)

    def write_json(self, name: str, data: Dict[str, Any]) -> Path:
        path = self._path(name)
        try:
            with open(path, 'w') as f:
                json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
                f.write('\n')
        except OSError as e:
            raise OSError(f"Failed to write {path}: {e}") from e
        return self._record(name)

    def write_text(self, name: str, text: str) -> Path:
        path = self._path(name)
        try:
            path.write_text(text)
        except OSError as e:
            raise OSError(f"Failed to write {path}: {e}") from e
        return self._record(name)

    def register(self, name: str) -> Path:
        """Add a file written by someone else (e.g. a plot) to the inventory"""
        if not (self.out_dir / name).exists():
            raise FileNotFoundError(f"Cannot register missing output {self.out_dir / name}")
        return self._record(name)

    def finalize(self, config_hash: str, master_seed: int,
                 tolerances: Optional[Dict[str, float]] = None) -> RunManifest:
        """Checksum every written file and write the manifest"""
        files = []
        for name in self.written:
            path = self.out_dir / name
            files.append({"name": name, "sha256": file_checksum(path), "bytes": path.stat().st_size})
        manifest = RunManifest(
            config_hash=config_hash,
            master_seed=int(master_seed),
            code_version=__version__,
            started_at=self.started_at,
            finished_at=datetime.now().isoformat(),
            tolerances=dict(tolerances or {}),
            files=files,
            timings=self.monitor.summary(),
        )
        path = self.out_dir / MANIFEST_NAME
        try:
            with open(path, 'w') as f:
                json.dump(manifest.to_dict(), f, indent=2, sort_keys=True, default=_json_default)
                f.write('\n')
        except OSError as e:
            raise OSError(f"Failed to write {path}: {e}") from e
        logger.info(f"Wrote {len(files)} result files and manifest to {self.out_dir}")
        return manifest


DENSITY_COLUMNS = ["t", "node", "orientation", "u_center", "mass"]


def density_rows(density: DensityEvolution) -> Iterable[List[Any]]:
    """Rows (t, node, orientation, u_center, mass) of the marginal masses at every record time"""
    centers = density.ucells.centers
    for index, t in enumerate(density.times):
        masses = density.marginal_masses(index)
        for node in range(masses.shape[0]):
            for beta in range(masses.shape[1]):
                for j, mass in enumerate(masses[node, beta]):
                    yield [float(t), node, beta, float(centers[j]), float(mass)]


def write_density_csv(writer: ResultWriter, density: DensityEvolution, name: str = "density.csv") -> Path:
    """Density table plus the node coordinates in a companion table"""
    d = density.xgrid.d
    writer.write_table(f"{Path(name).stem}_nodes.csv", ["node"] + [f"x{a}" for a in range(d)],
                       ([p] + [float(c) for c in density.xgrid.points[p]] for p in range(density.xgrid.N)))
    return writer.write_table(name, DENSITY_COLUMNS, density_rows(density))


def write_results(report: ConvergenceReport, out_dir, monitor: Optional[PerformanceMonitor] = None,
                  extra: Optional[Dict[str, Any]] = None, plot_style: Optional[PlotStyle] = None) -> List[str]:
    """
    Persist a convergence report

    Writes errors.csv and wasserstein.csv (header-only when empty), density
    tables when the report carries its reference law, rate_table.txt,
    rates.svg when a plot style is given and the series are positive,
    summary.json and finally manifest.json.

    Args:
        report: Report to persist
        out_dir: Output directory
        monitor: Stage timer for the manifest
        extra: Additional summary entries
        plot_style: Labels and guides of the rate plot

    Returns:
        File inventory in write order, manifest last
    """
    writer = ResultWriter(out_dir, monitor)
    writer.write_table("errors.csv", ERROR_COLUMNS,
                       ([getattr(row, name) for name in ERROR_COLUMNS] for row in report.error_rows))
    writer.write_table("wasserstein.csv", SPLITTING_COLUMNS,
                       ([getattr(row, name) for name in SPLITTING_COLUMNS] for row in report.splitting_rows))
    if report.reference is not None:
        write_density_csv(writer, report.reference)
    table = rate_table(report)
    writer.write_text("rate_table.txt", table.text)
    series = report_series(report)
    if plot_style is not None and series and all(v > 0 for s in series for v in s.y):
        render_plot(series, writer.out_dir / "rates.svg", plot_style)
        writer.register("rates.svg")
    summary = dict(table.summary)
    if extra:
        summary.update(extra)
    writer.write_json("summary.json", summary)
    writer.finalize(report.config_hash, report.master_seed, report.tolerances)
    return writer.written + [MANIFEST_NAME]
