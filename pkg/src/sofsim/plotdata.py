"""Tab-separated point series for plotting predictions over observed tracks.

One row per series: ``window  ped_id  series  sample  points`` where ``series``
is ``observed``, ``ground_truth`` or ``sample``, ``sample`` is the sample index
(empty for the first two) and ``points`` is ``x,y x,y ...`` written with
``repr`` so that re-parsing recovers the exact floats.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataError, FeatureArrays
from .prediction import PredictionSet

HEADER = ("window", "ped_id", "series", "sample", "points")


@dataclass(frozen=True)
class Series:
    window: int
    ped_id: int
    series: str
    sample: int | None
    points: np.ndarray


def _format_points(points: np.ndarray) -> str:
    return " ".join(f"{float(x)!r},{float(y)!r}" for x, y in points)


def _parse_points(text: str) -> np.ndarray:
    if not text:
        return np.zeros((0, 2))
    return np.array([[float(v) for v in pair.split(",")] for pair in text.split(" ")])


def plot_series(pred: PredictionSet, feats: FeatureArrays | None) -> list[Series]:
    if len(pred) == 0:
        return []
    if feats is None or len(feats) != len(pred) or not np.array_equal(feats.ped_id, pred.ped_ids):
        raise DataError("predictions do not align with the windows of the given scene")
    samples = pred.absolute()
    out = []
    for i, (window, ped) in enumerate(zip(pred.scene.tolist(), pred.ped_ids.tolist())):
        out.append(Series(window, ped, "observed", None, feats.x_obs[i]))
        out.append(Series(window, ped, "ground_truth", None, feats.x_pred[i]))
        out.extend(Series(window, ped, "sample", j, samples[i, j]) for j in range(pred.k))
    return out


def export_plot_data(path, pred: PredictionSet, feats: FeatureArrays | None) -> int:
    """Write the series file and return the number of data rows."""
    rows = plot_series(pred, feats)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\t".join(HEADER) + "\n")
        for s in rows:
            sample = "" if s.sample is None else str(s.sample)
            fh.write(f"{s.window}\t{s.ped_id}\t{s.series}\t{sample}\t{_format_points(s.points)}\n")
    return len(rows)


def read_plot_data(path) -> list[Series]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != HEADER:
            raise DataError(f"{path}: unexpected header {header}")
        out = []
        for lineno, line in enumerate(fh, start=2):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != len(HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(HEADER)} fields")
            window, ped, series, sample, points = fields
            out.append(Series(int(window), int(ped), series, int(sample) if sample else None, _parse_points(points)))
    return out
