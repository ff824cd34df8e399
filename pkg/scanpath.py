"""Gaze-policy analysis: fixation runs, saccade distances and their densities."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.neighbors import KernelDensity

from glimpse import to_pixel
from training import read_traces

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 6.0
FALLBACK_BANDWIDTH = 1.0
GRID_POINTS = 200
PATH_KEYS = ["path", "image_id", "model_tag", "label"]


@dataclass
class ScanPath:
    """Ordered glimpse centres of one episode, in pixels."""

    points: np.ndarray
    image_id: int = 0
    model_tag: str = ""
    label: int = -1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_record(cls, record: Dict) -> "ScanPath":
        steps = sorted(record["steps"], key=lambda s: s["t"])
        if steps and "pixel_x" in steps[0]:
            points = [(s["pixel_x"], s["pixel_y"]) for s in steps]
        else:
            points = to_pixel(np.array([(s["loc_x"], s["loc_y"]) for s in steps]), record["image_size"])
        return cls(points, record.get("image_id", 0), record.get("model_tag", ""), record.get("label", -1))


@dataclass
class FixationReport:
    durations: pd.DataFrame    # path, image_id, model_tag, label, start, duration
    distances: pd.DataFrame    # path, image_id, model_tag, label, step, distance
    density: pd.DataFrame      # grid, value, series
    summary: Dict = field(default_factory=dict)

    @property
    def fixation_durations(self) -> np.ndarray:
        return self.durations["duration"].to_numpy()

    @property
    def saccade_distances(self) -> np.ndarray:
        return self.distances["distance"].to_numpy()


def _steps(points: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(points, axis=0), axis=1)


def saccade_distances(path: ScanPath) -> List[float]:
    """Euclidean pixel distances between consecutive glimpses (T - 1 values)."""
    if len(path) < 2:
        return []
    return _steps(path.points).tolist()


def segment_fixations(path: ScanPath, threshold: float = DEFAULT_THRESHOLD) -> List[Tuple[int, int]]:
    """Greedy fixation runs as (start index, length).

    A glimpse closer than ``threshold`` pixels to its predecessor extends the
    current run; anything at or beyond the threshold opens a new one.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if len(path) == 0:
        return []
    runs = []
    start = 0
    for i, distance in enumerate(_steps(path.points), start=1):
        if distance >= threshold:
            runs.append((start, i - start))
            start = i
    runs.append((start, len(path) - start))
    return runs


def threshold_sweep(paths: Iterable[ScanPath], thresholds: Sequence[float]) -> pd.DataFrame:
    """Total number of fixation runs per threshold."""
    paths = list(paths)
    rows = [
        {"threshold": float(th), "runs": sum(len(segment_fixations(p, th)) for p in paths)}
        for th in thresholds
    ]
    return pd.DataFrame(rows, columns=["threshold", "runs"])


def scott_bandwidth(samples: Sequence[float]) -> float:
    """1.06 * std * N^(-1/5); falls back to 1.0 for degenerate samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < 2:
        return FALLBACK_BANDWIDTH
    sigma = float(np.std(samples, ddof=1))
    if sigma == 0 or not np.isfinite(sigma):
        logger.warning(f"Degenerate sample (N={len(samples)}, std={sigma}); using bandwidth {FALLBACK_BANDWIDTH}")
        return FALLBACK_BANDWIDTH
    return 1.06 * sigma * len(samples) ** (-0.2)


def kde(samples: Sequence[float], bandwidth: float, grid: Sequence[float]) -> np.ndarray:
    """Gaussian kernel density of ``samples`` evaluated on ``grid``."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 1)
    if len(samples) == 0:
        raise ValueError("kde needs at least one sample")
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    estimator = KernelDensity(kernel="gaussian", bandwidth=float(bandwidth)).fit(samples)
    grid = np.asarray(grid, dtype=np.float64).reshape(-1, 1)
    return np.exp(estimator.score_samples(grid))


def density_curve(samples: Sequence[float], bandwidth: Optional[float], series: str,
                  points: int = GRID_POINTS) -> pd.DataFrame:
    """KDE over a grid spanning the samples +/- 5 bandwidths."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        return pd.DataFrame(columns=["grid", "value", "series"])
    h = bandwidth if bandwidth is not None else scott_bandwidth(samples)
    grid = np.linspace(samples.min() - 5 * h, samples.max() + 5 * h, points)
    return pd.DataFrame({"grid": grid, "value": kde(samples, h, grid), "series": series})


def load_scanpaths(trace_log_path: Path) -> List[ScanPath]:
    records = read_traces(trace_log_path)
    paths = [ScanPath.from_record(r) for r in records]
    logger.info(f"Loaded {len(paths)} scanpaths from {trace_log_path}")
    return paths


def _path_tables(index: int, path: ScanPath, threshold: float,
                 patch_size: float) -> Tuple[List[Dict], List[Dict], bool]:
    runs = segment_fixations(path, threshold)
    jumps = saccade_distances(path)
    if sum(length for _, length in runs) != len(path) or len(jumps) != len(path) - 1:
        raise ValueError(f"scanpath {path.image_id}: fixation runs or saccades do not cover {len(path)} glimpses")
    key = {"path": index, "image_id": path.image_id, "model_tag": path.model_tag, "label": path.label}
    durations = [{**key, "start": start, "duration": length} for start, length in runs]
    distances = [{**key, "step": t, "distance": d} for t, d in enumerate(jumps, start=1)]
    # fixation of two or more glimpses plus at least one jump beyond a patch width
    mixed = max((length for _, length in runs), default=0) >= 2 and any(d >= patch_size for d in jumps)
    return durations, distances, mixed


def summarize(durations: pd.DataFrame, distances: pd.DataFrame, mixed_flags: Sequence[bool]) -> Dict:
    """Aggregate statistics of one report; ``mixed_flags`` holds one entry per path."""
    num_paths = len(mixed_flags)
    return {
        "num_paths": num_paths,
        "num_fixations": int(len(durations)),
        "num_saccades": int(len(distances)),
        "mean_duration": float(durations["duration"].mean()) if len(durations) else 0.0,
        "median_duration": float(durations["duration"].median()) if len(durations) else 0.0,
        "mean_distance": float(distances["distance"].mean()) if len(distances) else 0.0,
        "median_distance": float(distances["distance"].median()) if len(distances) else 0.0,
        "mixed_fraction": sum(mixed_flags) / num_paths if num_paths else 0.0,
    }


def analyze_paths(paths: List[ScanPath], threshold: float = DEFAULT_THRESHOLD,
                  bandwidth: Optional[float] = None, by_label: bool = False,
                  patch_size: float = 8) -> FixationReport:
    """Fixation and saccade tables, density curves and summary for ``paths``.

    Args:
        paths: scanpaths in pixel coordinates
        threshold: fixation distance threshold in pixels
        bandwidth: KDE bandwidth; None picks Scott's rule per series
        by_label: also emit one density series per class label
        patch_size: jump length that counts as a long saccade in the summary
    """
    duration_rows, distance_rows, mixed_flags = [], [], []
    for index, path in enumerate(paths):
        d_rows, s_rows, mixed = _path_tables(index, path, threshold, patch_size)
        duration_rows.extend(d_rows)
        distance_rows.extend(s_rows)
        mixed_flags.append(mixed)
    durations = pd.DataFrame(duration_rows, columns=PATH_KEYS + ["start", "duration"])
    distances = pd.DataFrame(distance_rows, columns=PATH_KEYS + ["step", "distance"])

    curves = [
        density_curve(durations["duration"], bandwidth, "duration"),
        density_curve(distances["distance"], bandwidth, "distance"),
    ]
    if by_label:
        for label, group in durations.groupby("label"):
            curves.append(density_curve(group["duration"], bandwidth, f"duration:label={label}"))
        for label, group in distances.groupby("label"):
            curves.append(density_curve(group["distance"], bandwidth, f"distance:label={label}"))
    density = pd.concat([c for c in curves if len(c)], ignore_index=True) if any(len(c) for c in curves) \
        else pd.DataFrame(columns=["grid", "value", "series"])

    summary = summarize(durations, distances, mixed_flags)
    summary.update({
        "threshold": threshold,
        "bandwidth": bandwidth if bandwidth is not None else "scott",
        "duration_bandwidth": bandwidth or scott_bandwidth(durations["duration"]),
        "distance_bandwidth": bandwidth or scott_bandwidth(distances["distance"]),
        "by_label": by_label,
        "model_tags": sorted({p.model_tag for p in paths if p.model_tag}),
    })
    return FixationReport(durations, distances, density, summary)


def analyze(trace_log_path: Path, threshold: float = DEFAULT_THRESHOLD, bandwidth: Optional[float] = None,
            by_label: bool = False, patch_size: float = 8) -> FixationReport:
    """Parse a trace log and build its fixation report."""
    paths = load_scanpaths(trace_log_path)
    report = analyze_paths(paths, threshold, bandwidth, by_label, patch_size)
    logger.info(
        f"Analyzed {len(paths)} paths: {report.summary['num_fixations']} fixations, "
        f"mixed fraction {report.summary['mixed_fraction']:.3f}"
    )
    return report
