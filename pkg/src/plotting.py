"""
Static rate plots
Log-log scatter of errors with the fitted line and reference slope guides, as SVG
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.errors import ValidationError  # noqa: E402
from src.lab import ConvergenceReport, SlopeFit  # noqa: E402

logger = logging.getLogger(__name__)

SVG_SETTINGS = {
    "svg.hashsalt": "gridcell-lab",   # stable clip-path ids
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (4.5, 3.5),
    "lines.linewidth": 1.0,
}

GUIDE_IDS = {"half": "guide-half", "holder": "guide-holder", "quarter": "guide-quarter"}


@dataclass
class PlotSeries:
    """Points (x, y) with optional error bars and fitted line"""
    label: str
    x: Sequence[float]
    y: Sequence[float]
    yerr: Optional[Sequence[float]] = None
    fit: Optional[SlopeFit] = None


@dataclass
class PlotStyle:
    title: str = ""
    xlabel: str = "M"
    ylabel: str = "error"
    alpha: float = 1.0
    space_dim: int = 1
    guides: bool = True
    markers: List[str] = field(default_factory=lambda: ["o", "s", "^", "D"])


def guide_slopes(style: PlotStyle) -> dict:
    return {"half": -0.5, "holder": -style.alpha / style.space_dim, "quarter": -0.25}


def _check(series: Sequence[PlotSeries]) -> None:
    if not series:
        raise ValidationError("Nothing to plot", "series")
    for s in series:
        x = np.asarray(s.x, dtype=float)
        y = np.asarray(s.y, dtype=float)
        if x.size == 0 or x.shape != y.shape:
            raise ValidationError(f"Series '{s.label}' needs matching, nonempty x and y", "series")
        if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValidationError(f"Series '{s.label}' has nonpositive values on log axes", "series")


def render_plot(series: Sequence[PlotSeries], path, style: Optional[PlotStyle] = None) -> Path:
    """
    Render a log-log rate plot to SVG

    Guides through the first point of the first series have slopes -1/2,
    -alpha/d and -1/4; each is tagged with a group id (GUIDE_IDS), as is every
    fitted line ('fit-<index>').

    Args:
        series: Data series (positive values)
        path: Output file
        style: Labels and guide parameters

    Returns:
        Path of the SVG

    Raises:
        ValidationError: On empty series or nonpositive values
    """
    style = style or PlotStyle()
    _check(series)
    path = Path(path)

    with mpl.rc_context(SVG_SETTINGS):
        fig, ax = plt.subplots()
        try:
            ax.set_xscale("log")
            ax.set_yscale("log")
            all_x = np.concatenate([np.asarray(s.x, dtype=float) for s in series])
            for idx, s in enumerate(series):
                x = np.asarray(s.x, dtype=float)
                y = np.asarray(s.y, dtype=float)
                marker = style.markers[idx % len(style.markers)]
                if s.yerr is not None:
                    ax.errorbar(x, y, yerr=np.asarray(s.yerr, dtype=float), fmt=marker, label=s.label,
                                capsize=2, markersize=4)
                else:
                    ax.plot(x, y, marker, label=s.label, markersize=4)
                if s.fit is not None and x.size > 1:
                    xs = np.array([x.min(), x.max()])
                    (line,) = ax.plot(xs, np.exp(s.fit.intercept) * xs ** s.fit.slope, "-",
                                      label=f"fit {s.fit.slope:.3f} ± {s.fit.slope_stderr:.3f}")
                    line.set_gid(f"fit-{idx}")

            x_lo, x_hi = float(all_x.min()), float(all_x.max())
            if style.guides and x_hi > x_lo:
                x0 = float(series[0].x[0])
                y0 = float(series[0].y[0])
                xs = np.array([x_lo, x_hi])
                for name, slope in guide_slopes(style).items():
                    (line,) = ax.plot(xs, y0 * (xs / x0) ** slope, ":", color="0.5", linewidth=0.8,
                                      label=f"slope {slope:g}")
                    line.set_gid(GUIDE_IDS[name])

            ax.set_xlabel(style.xlabel)
            ax.set_ylabel(style.ylabel)
            if style.title:
                ax.set_title(style.title)
            ax.legend(loc="best")
            fig.tight_layout()
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    logger.debug(f"Rendered plot {path}")
    return path


def report_series(report: ConvergenceReport) -> List[PlotSeries]:
    """Error (or final-time W1) series of a report, with its fitted slope"""
    fits = {fit.quantity: fit for fit in report.slopes}
    if report.error_rows:
        rows = report.error_rows
        fit = fits.get("coupled_error")
        variable = fit.variable if fit else "M"
        x = [r.M if variable == "M" else r.N for r in rows]
        return [PlotSeries("coupled error", x, [r.error for r in rows], [r.stderr for r in rows], fit)]
    if report.splitting_rows:
        final_t = max(r.t for r in report.splitting_rows)
        rows = [r for r in report.splitting_rows if r.t == final_t]
        fit = fits.get("w1_total")
        variable = fit.variable if fit else "M"
        x = [r.M if variable == "M" else r.N for r in rows]
        return [PlotSeries(f"W1 at t={final_t:g}", x, [r.total for r in rows], [r.total_stderr for r in rows], fit)]
    return []
