"""Result tables and scanpath reports."""
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from scanpath import FixationReport

logger = logging.getLogger(__name__)

COMPARISON_COLUMNS = ["Model", "Params (M)", "Infer Time (ms/im)", "Accuracy"]


class ReportGenerator:
    """Write comparison tables and fixation reports as plain files."""

    def __init__(self, output_dir: Path):
        """Initialize report generator.

        Args:
            output_dir: Directory to save generated reports
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def comparison_table(rows: List[Dict]) -> pd.DataFrame:
        """Build the Model | Params | Infer Time | Accuracy table.

        Args:
            rows: dicts with model_tag, param_count, ms_per_image, test_accuracy

        Returns:
            DataFrame with one row per cell, in input order
        """
        table = pd.DataFrame([
            {
                "Model": row["model_tag"],
                "Params (M)": round(row["param_count"] / 1e6, 3),
                "Infer Time (ms/im)": None if row.get("ms_per_image") is None else round(row["ms_per_image"], 3),
                "Accuracy": None if row.get("test_accuracy") is None else round(100.0 * row["test_accuracy"], 2),
            }
            for row in rows
        ], columns=COMPARISON_COLUMNS)
        return table

    def _dataframe_to_markdown(self, df: pd.DataFrame) -> str:
        """Render a DataFrame as a pipe table."""
        header = "| " + " | ".join(str(c) for c in df.columns) + " |"
        rule = "|" + "|".join("---" for _ in df.columns) + "|"
        body = [
            "| " + " | ".join("" if pd.isna(v) else str(v) for v in row) + " |"
            for row in df.itertuples(index=False)
        ]
        return "\n".join([header, rule] + body) + "\n"

    def write_comparison(self, rows: List[Dict], title: Optional[str] = None) -> Dict[str, Path]:
        """Write ``comparison.csv`` and ``comparison.md``."""
        table = self.comparison_table(rows)
        csv_path = self.output_dir / "comparison.csv"
        md_path = self.output_dir / "comparison.md"
        table.to_csv(csv_path, index=False)
        heading = f"# {title}\n\n" if title else ""
        md_path.write_text(heading + self._dataframe_to_markdown(table))
        logger.info(f"Comparison table with {len(table)} rows written to {csv_path}")
        return {"csv": csv_path, "markdown": md_path}

    def write_scanpath_report(self, report: FixationReport) -> Dict[str, Path]:
        """Write the duration, distance and density tables plus the summary."""
        paths = {
            "durations": self.output_dir / "durations.csv",
            "distances": self.output_dir / "distances.csv",
            "density": self.output_dir / "density.csv",
            "summary_json": self.output_dir / "summary.json",
            "summary_text": self.output_dir / "summary.txt",
        }
        report.durations.to_csv(paths["durations"], index=False)
        report.distances.to_csv(paths["distances"], index=False)
        report.density.to_csv(paths["density"], index=False)
        with open(paths["summary_json"], "w") as f:
            json.dump(report.summary, f, indent=2, default=_json_default)
        paths["summary_text"].write_text(self.summary_text(report))
        logger.info(f"Scanpath report written to {self.output_dir}")
        return paths

    @staticmethod
    def summary_text(report: FixationReport) -> str:
        s = report.summary
        lines = [
            "Scanpath analysis",
            f"Generated on: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
            "",
            f"paths analysed:        {s['num_paths']}",
            f"fixation threshold:    {s['threshold']} px",
            f"fixations:             {s['num_fixations']}",
            f"saccades:              {s['num_saccades']}",
            f"mean duration:         {s['mean_duration']:.3f} glimpses",
            f"median duration:       {s['median_duration']:.3f} glimpses",
            f"mean distance:         {s['mean_distance']:.3f} px",
            f"median distance:       {s['median_distance']:.3f} px",
            f"fixation + long jump:  {100.0 * s['mixed_fraction']:.1f}% of paths",
        ]
        if s.get("model_tags"):
            lines.append(f"models:                {', '.join(s['model_tags'])}")
        return "\n".join(lines) + "\n"


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")
