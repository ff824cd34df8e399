import json
import math

import numpy as np
import pytest

from scanpath import (
    FALLBACK_BANDWIDTH,
    GRID_POINTS,
    ScanPath,
    analyze,
    analyze_paths,
    density_curve,
    kde,
    saccade_distances,
    scott_bandwidth,
    segment_fixations,
    threshold_sweep,
)


def durations(points, threshold=6.0):
    return [length for _, length in segment_fixations(ScanPath(points), threshold)]


def write_log(path, paths, image_size=28):
    with open(path, "w") as f:
        for i, (points, label) in enumerate(paths):
            steps = [{"t": t, "pixel_x": x, "pixel_y": y} for t, (x, y) in enumerate(points)]
            f.write(json.dumps({"image_id": i, "label": label, "image_size": image_size,
                                "model_tag": "MRAM, 4 glimpses", "steps": steps}) + "\n")
    return path


# ---------------------------------------------------------------------------
# Fixations and saccades
# ---------------------------------------------------------------------------

def test_fixation_runs_example():
    points = [(5, 5), (7, 5), (20, 20), (21, 21), (22, 22)]
    assert segment_fixations(ScanPath(points)) == [(0, 2), (2, 3)]
    assert saccade_distances(ScanPath(points))[0] == pytest.approx(2.0)


def test_identical_points_form_one_fixation():
    assert durations([(13.5, 13.5)] * 10) == [10]
    assert saccade_distances(ScanPath([(13.5, 13.5)] * 10)) == [0.0] * 9


def test_alternating_corners_give_one_run_per_glimpse():
    points = [(0, 0), (27, 27)] * 4
    assert durations(points) == [1] * 8
    assert all(d == pytest.approx(27 * math.sqrt(2)) for d in saccade_distances(ScanPath(points)))


def test_threshold_is_strict():
    assert durations([(0, 0), (6, 0)]) == [1, 1]
    assert durations([(0, 0), (5.999, 0)]) == [2]


def test_saccade_distance_is_euclidean():
    assert saccade_distances(ScanPath([(0, 0), (3, 4)])) == [5.0]
    assert saccade_distances(ScanPath([(1, 1)])) == []


def test_segment_rejects_non_positive_threshold():
    with pytest.raises(ValueError):
        segment_fixations(ScanPath([(0, 0)]), 0.0)


def test_runs_partition_every_random_path():
    rng = np.random.default_rng(11)
    for _ in range(100):
        steps = int(rng.integers(1, 16))
        points = rng.uniform(0, 27, size=(steps, 2))
        runs = segment_fixations(ScanPath(points), 6.0)
        assert sum(length for _, length in runs) == steps
        assert runs[0][0] == 0
        # brute force: a new run opens at every step of at least 6 pixels
        jumps = np.linalg.norm(np.diff(points, axis=0), axis=1)
        assert len(runs) == 1 + int(np.sum(jumps >= 6.0))
        assert [start for start, _ in runs[1:]] == [int(i) + 1 for i in np.flatnonzero(jumps >= 6.0)]


def test_run_count_falls_as_threshold_grows():
    rng = np.random.default_rng(2)
    paths = [ScanPath(rng.uniform(0, 27, size=(10, 2))) for _ in range(20)]
    sweep = threshold_sweep(paths, [1, 2, 4, 8, 16, 32, 64])
    runs = sweep["runs"].tolist()
    assert runs == sorted(runs, reverse=True)
    assert runs[-1] == 20


def test_scanpath_from_normalized_record():
    record = {"image_size": 28, "steps": [{"t": 1, "loc_x": 1.0, "loc_y": 1.0},
                                          {"t": 0, "loc_x": -1.0, "loc_y": -1.0}]}
    np.testing.assert_allclose(ScanPath.from_record(record).points, [[0, 0], [27, 27]])


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def test_kde_single_sample_peak():
    assert kde([0.0], 1.0, [0.0])[0] == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-5)


def test_kde_integrates_to_one_and_is_symmetric():
    grid = np.linspace(-20, 20, 8001)
    values = kde([-1.0, 1.0], 1.5, grid)
    assert values.sum() * (grid[1] - grid[0]) == pytest.approx(1.0, abs=1e-3)
    np.testing.assert_allclose(values, values[::-1], rtol=1e-9)


def test_kde_rejects_bad_input():
    with pytest.raises(ValueError):
        kde([], 1.0, [0.0])
    with pytest.raises(ValueError):
        kde([1.0], 0.0, [0.0])


def test_scott_bandwidth_rule_and_fallback():
    samples = np.arange(10.0)
    assert scott_bandwidth(samples) == pytest.approx(1.06 * np.std(samples, ddof=1) * 10 ** -0.2)
    assert scott_bandwidth([4.0, 4.0, 4.0]) == FALLBACK_BANDWIDTH
    assert scott_bandwidth([4.0]) == FALLBACK_BANDWIDTH


def test_density_curve_grid_spans_five_bandwidths():
    curve = density_curve([2.0, 4.0], 0.5, "duration")
    assert len(curve) == GRID_POINTS
    assert curve["grid"].iloc[0] == pytest.approx(-0.5)
    assert curve["grid"].iloc[-1] == pytest.approx(6.5)
    assert set(curve["series"]) == {"duration"}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def test_stationary_policy_report(tmp_path):
    log = write_log(tmp_path / "traces.jsonl", [([(13.5, 13.5)] * 10, 4)])
    report = analyze(log)
    assert report.fixation_durations.tolist() == [10]
    assert report.saccade_distances.tolist() == [0.0] * 9
    assert report.summary["duration_bandwidth"] == FALLBACK_BANDWIDTH
    assert report.summary["distance_bandwidth"] == FALLBACK_BANDWIDTH
    assert report.summary["mixed_fraction"] == 0.0
    assert report.summary["model_tags"] == ["MRAM, 4 glimpses"]


def test_report_tables_match_recomputation(tmp_path):
    rng = np.random.default_rng(5)
    paths = [(rng.uniform(0, 27, size=(7, 2)).tolist(), i % 3) for i in range(100)]
    report = analyze(write_log(tmp_path / "traces.jsonl", paths), threshold=6.0)

    expected_runs = []
    expected_jumps = []
    for points, _ in paths:
        expected_runs.extend(durations(points))
        expected_jumps.extend(saccade_distances(ScanPath(points)))
    assert report.fixation_durations.tolist() == expected_runs
    np.testing.assert_allclose(report.saccade_distances, expected_jumps)
    assert report.summary["num_saccades"] == 100 * 6
    assert report.durations.groupby("image_id")["duration"].sum().eq(7).all()


def test_by_label_series(tmp_path):
    paths = [ScanPath([(0, 0), (1, 0), (20, 20)], image_id=i, label=i % 2) for i in range(4)]
    report = analyze_paths(paths, by_label=True)
    series = set(report.density["series"])
    assert {"duration", "distance", "duration:label=0", "duration:label=1",
            "distance:label=0", "distance:label=1"} <= series
    assert report.summary["mixed_fraction"] == 1.0
    assert report.summary["bandwidth"] == "scott"


def test_paths_sharing_an_image_id_are_summarised_separately():
    still = ScanPath([(10, 10)] * 4, image_id=0, model_tag="RAM, 4 glimpses")
    jumpy = ScanPath([(0, 0), (20, 0), (0, 0), (20, 0)], image_id=0, model_tag="DRAM, 4 glimpses")
    for path in (still, jumpy):
        assert analyze_paths([path]).summary["mixed_fraction"] == 0.0

    report = analyze_paths([still, jumpy])
    assert report.summary["mixed_fraction"] == 0.0
    assert report.summary["num_paths"] == 2
    assert report.durations.groupby("path")["duration"].sum().tolist() == [4, 4]
    assert report.distances.groupby("model_tag").size().to_dict() == {"DRAM, 4 glimpses": 3, "RAM, 4 glimpses": 3}
    assert report.summary["model_tags"] == ["DRAM, 4 glimpses", "RAM, 4 glimpses"]


def test_analyze_missing_log(tmp_path):
    with pytest.raises(FileNotFoundError):
        analyze(tmp_path / "absent.jsonl")
