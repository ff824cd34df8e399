import json

import pandas as pd
import pytest

from models import ModelSpec
from report_generator import COMPARISON_COLUMNS, ReportGenerator
from scanpath import ScanPath, analyze_paths

ROWS = [
    {"model_tag": ModelSpec(variant="RAM", num_glimpses=7).tag(), "param_count": 603_405,
     "ms_per_image": 0.41234, "test_accuracy": 0.9879},
    {"model_tag": ModelSpec(variant="MRAM", baseline_mode="hybrid", num_glimpses=10).tag(),
     "param_count": 1_161_357, "ms_per_image": 0.9, "test_accuracy": None},
]


def test_comparison_table_columns_and_rounding():
    table = ReportGenerator.comparison_table(ROWS)
    assert list(table.columns) == COMPARISON_COLUMNS
    assert table["Model"].tolist() == ["RAM, 7 glimpses", "MRAM, 10 glimpses"]
    assert table["Params (M)"].tolist() == [0.603, 1.161]
    assert table["Infer Time (ms/im)"].iloc[0] == pytest.approx(0.412)
    assert table["Accuracy"].iloc[0] == pytest.approx(98.79)
    assert pd.isna(table["Accuracy"].iloc[1])


def test_write_comparison_files(tmp_path):
    paths = ReportGenerator(tmp_path / "report").write_comparison(ROWS, title="MNIST")
    assert len(pd.read_csv(paths["csv"])) == 2
    markdown = paths["markdown"].read_text().splitlines()
    assert markdown[0] == "# MNIST"
    assert markdown[2] == "| Model | Params (M) | Infer Time (ms/im) | Accuracy |"
    assert markdown[-1].startswith("| MRAM, 10 glimpses | 1.161 | 0.9 |")


def test_write_scanpath_report(tmp_path):
    paths = [ScanPath([(0, 0), (1, 0), (20, 20)], image_id=i, label=i % 2, model_tag="DRAM, 6 glimpses")
             for i in range(3)]
    report = analyze_paths(paths)
    written = ReportGenerator(tmp_path).write_scanpath_report(report)
    assert all(p.exists() for p in written.values())
    summary = json.loads(written["summary_json"].read_text())
    assert summary["num_fixations"] == 6
    assert summary["bandwidth"] == "scott"
    assert pd.read_csv(written["durations"])["duration"].tolist() == [2, 1] * 3
    text = written["summary_text"].read_text()
    assert "fixation + long jump:  100.0% of paths" in text
    assert "DRAM, 6 glimpses" in text
