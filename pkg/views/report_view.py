"""
Text views for command results.

Tables are rendered with pandas and written to stdout; diagnostics go through
logging and never reach these views.
"""

import sys
from typing import Dict, Iterable, Optional, TextIO

import pandas as pd

from models.pointcloud_model import DensitySummary
from models.report_model import STATISTICS, EvalReport


class ReportView:
    """Writes result tables for the command line."""

    def __init__(self, stream: Optional[TextIO] = None):
        self.stream = stream or sys.stdout

    def _emit(self, text: str) -> None:
        self.stream.write(text.rstrip("\n") + "\n")

    def show_gradient_check(self, errors: Dict[str, float], tolerance: float) -> str:
        """
        Table of kernel -> max relative gradient error with a pass/fail column.

        Returns:
            The rendered table
        """
        frame = pd.DataFrame({
            "kernel": list(errors),
            "max_rel_error": [errors[name] for name in errors],
            "status": ["ok" if errors[name] < tolerance else "FAIL" for name in errors],
        })
        text = frame.to_string(index=False, formatters={"max_rel_error": "{:.3e}".format})
        self._emit(text)
        return text

    def show_evaluation(self, report: EvalReport, statistics: Iterable[str] = STATISTICS) -> str:
        """Bands as rows, statistics as columns; aggregated reports show mean ± std."""
        statistics = list(statistics)
        rows = {}
        for band in sorted(report.bands):
            row = {}
            for name in statistics:
                value = report.bands[band][name]
                if report.spread:
                    row[name] = f"{value:.4f} ± {report.spread[band][name]:.4f}"
                else:
                    row[name] = f"{value:.4f}"
            rows[band] = row
        frame = pd.DataFrame.from_dict(rows, orient="index", columns=statistics)
        text = frame.to_string()
        text += f"\nn_valid={report.n_valid} threshold={report.threshold:g} m"
        if report.tiles:
            text += f" tiles={len(report.tiles)}"
        self._emit(text)
        return text

    def show_density(self, summary: DensitySummary) -> str:
        frame = pd.DataFrame({"tile": list(summary.tiles), "points_per_m2": list(summary.tiles.values())})
        text = frame.to_string(index=False, formatters={"points_per_m2": "{:.2f}".format})
        text += (f"\nmean {summary.mean:.2f}  min {summary.minimum:.2f}  "
                 f"max {summary.maximum:.2f} points/m²")
        self._emit(text)
        return text

    def show_outputs(self, command: str, outputs: Iterable[str]) -> str:
        outputs = list(outputs)
        text = f"{command}: wrote {len(outputs)} files"
        self._emit(text)
        return text
