"""
Export utilities for balance-bench.
Save reports as JSON, tables and traces as CSV, and render Markdown summaries.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
from rich.console import Console
from rich.table import Table

from .data import LoggedDataset
from .schema import (
    EvaluationReport,
    LearnedPolicyReport,
    RateReport,
    ReplicationReport,
    TraceEntry,
    TuningResult,
)
from .utils.io import ensure_dir, save_csv, save_json, write_dataset_csv

logger = logging.getLogger(__name__)

TABLE_COLUMNS = [
    'method', 'rmse', 'bias', 'sd', 'dr_rmse', 'dr_bias', 'dr_sd', 'support_mean', 'support_sd', 'failures'
]
LEARNING_COLUMNS = ['method', 'mean_regret', 'regret_sd', 'failures']

Report = Union[EvaluationReport, LearnedPolicyReport, ReplicationReport, RateReport, TuningResult]


def replication_table(report: ReplicationReport) -> pd.DataFrame:
    """One row per method with the columns of the report's mode."""
    columns = TABLE_COLUMNS if report.mode == "evaluation" else LEARNING_COLUMNS
    records = [row.model_dump() for row in report.rows]
    return pd.DataFrame.from_records(records, columns=columns)


def rate_table(report: RateReport) -> pd.DataFrame:
    """Long format: method, n, rmse."""
    records = [
        {'method': method, 'n': n, 'rmse': value}
        for method, values in report.rmse.items()
        for n, value in zip(report.n_grid, values)
    ]
    return pd.DataFrame.from_records(records, columns=['method', 'n', 'rmse'])


def trace_table(trace: List[TraceEntry]) -> pd.DataFrame:
    records = [entry.model_dump() for entry in trace]
    return pd.DataFrame.from_records(records, columns=['iteration', 'objective', 'grad_norm', 'active_set_size'])


def _fmt(value: Optional[float], digits: int = 3) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def render_replication_table(report: ReplicationReport, console: Optional[Console] = None) -> Table:
    """Rich table of a replication report; printed when a console is given."""
    table = Table(title=f"{report.mode} benchmark (n={report.n}, reps={report.replications})")
    if report.mode == "evaluation":
        for header in ("Method", "RMSE", "Bias", "SD", "DR RMSE", "DR Bias", "DR SD", "|W|_0", "Failures"):
            table.add_column(header, justify="left" if header == "Method" else "right")
        for row in report.rows:
            support = "-" if row.support_mean is None else f"{row.support_mean:.1f} ± {row.support_sd:.1f}"
            table.add_row(
                row.method, _fmt(row.rmse), _fmt(row.bias), _fmt(row.sd),
                _fmt(row.dr_rmse), _fmt(row.dr_bias), _fmt(row.dr_sd), support, str(row.failures)
            )
    else:
        for header in ("Learner", "Mean regret", "SD", "Failures"):
            table.add_column(header, justify="left" if header == "Learner" else "right")
        for row in report.rows:
            table.add_row(row.method, _fmt(row.mean_regret), _fmt(row.regret_sd), str(row.failures))
    if console is not None:
        console.print(table)
    return table


class ResultExporter:
    """Write run artifacts under an output directory."""

    def __init__(self, output_dir: Path):
        """
        Initialize exporter.

        Args:
            output_dir: Base output directory
        """
        self.output_dir = Path(output_dir)
        ensure_dir(self.output_dir)

        self.results_dir = self.output_dir / "results"
        self.reports_dir = self.output_dir / "reports"
        ensure_dir(self.results_dir)
        ensure_dir(self.reports_dir)

    def export_report(self, report: Report, name: str) -> Path:
        """Save any report model as results/<name>.json."""
        return save_json(report, self.results_dir / f"{name}.json")

    def export_replication(self, report: ReplicationReport, name: str = "benchmark") -> Dict[str, Path]:
        """
        Export a replication report as JSON, a CSV table and a Markdown summary.

        Returns:
            Dictionary of format -> file path
        """
        exported = {
            'json': self.export_report(report, name),
            'csv': save_csv(replication_table(report), self.results_dir / f"{name}_table.csv"),
            'md': self._export_markdown_summary(report, name)
        }
        logger.info(f"Exported {report.mode} benchmark to {self.output_dir}",
                    extra={'event': 'export', 'files': len(exported)})
        return exported

    def export_rate(self, report: RateReport, name: str = "rate") -> Dict[str, Path]:
        return {
            'json': self.export_report(report, name),
            'csv': save_csv(rate_table(report), self.results_dir / f"{name}_rmse.csv")
        }

    def export_learned_policy(
        self,
        report: LearnedPolicyReport,
        trace: Optional[List[TraceEntry]] = None,
        regions: Optional[pd.DataFrame] = None,
        name: str = "policy"
    ) -> Dict[str, Path]:
        exported = {'json': self.export_report(report, name)}
        if trace is not None:
            exported['trace'] = save_csv(trace_table(trace), self.results_dir / f"{name}_trace.csv")
        if regions is not None:
            exported['regions'] = save_csv(regions, self.results_dir / f"{name}_regions.csv")
        return exported

    def export_dataset(self, ds: LoggedDataset, name: str = "dataset") -> Path:
        return write_dataset_csv(ds, self.results_dir / f"{name}.csv")

    def _export_markdown_summary(self, report: ReplicationReport, name: str) -> Path:
        """Markdown table mirroring the CSV, for quick reading."""
        report_path = self.reports_dir / f"{name}.md"
        table = replication_table(report)

        with open(report_path, 'w', encoding='utf-8') as f:
            f.write(f"# balance-bench {report.mode} benchmark\n\n")
            f.write(f"- **n:** {report.n}\n")
            f.write(f"- **sigma:** {report.sigma}\n")
            f.write(f"- **Replications:** {report.replications}\n")
            f.write(f"- **Seed:** {report.seed}\n")
            if report.target is not None:
                f.write(f"- **Target SAPE:** {report.target:.4f}\n")
            f.write("\n")

            cells = table.astype(object).where(table.notna(), None)
            f.write(cells.to_markdown(index=False, floatfmt=".3f", missingval="-"))
            f.write("\n")

            failed = [row for row in report.rows if row.failures]
            if failed:
                f.write("\n**Notes:**\n")
                for row in failed:
                    f.write(f"- {row.method} failed in {row.failures} replication(s)\n")

        logger.info(f"Markdown summary exported to {report_path}")
        return report_path
