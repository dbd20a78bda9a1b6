"""Best-of-k displacement errors, per-frame collision percentage and report tables."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .prediction import PredictionSet

COLLISION_THRESHOLD = 0.1
MIN_SCOPES = ("pedestrian", "scene")


def displacement_errors(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ADE and FDE, each (P, k), for absolute ``pred`` (P, k, T, 2) and ``gt`` (P, T, 2)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.ndim != 4 or gt.ndim != 3 or pred.shape[0] != gt.shape[0] or pred.shape[2:] != gt.shape[1:]:
        raise ValueError(f"prediction {pred.shape} does not align with ground truth {gt.shape}")
    dist = np.linalg.norm(pred - gt[:, None], axis=-1)
    return dist.mean(axis=2), dist[:, :, -1]


def made_mfde(pred, gt: np.ndarray, scope: str = "pedestrian", scene: np.ndarray | None = None) -> tuple[float, float]:
    """Minimum-over-samples ADE and FDE, each minimised separately.

    ``pred`` is a :class:`PredictionSet` or absolute positions (P, k, T, 2).
    With ``scope="scene"`` one sample index is chosen per scene (the one with
    the lowest scene-mean error) and the result is averaged over pedestrians.
    """
    if isinstance(pred, PredictionSet):
        scene = pred.scene if scene is None else scene
        pred = pred.absolute()
    ade, fde = displacement_errors(pred, gt)
    if len(ade) == 0:
        raise ValueError("no pedestrians to evaluate")
    if scope == "pedestrian":
        return float(ade.min(axis=1).mean()), float(fde.min(axis=1).mean())
    if scope != "scene":
        raise ValueError(f"scope must be one of {MIN_SCOPES}")
    if scene is None:
        raise ValueError("scene scope needs scene ids")
    total_a = total_f = 0.0
    for s in np.unique(scene):
        rows = scene == s
        total_a += ade[rows].mean(axis=0).min() * rows.sum()
        total_f += fde[rows].mean(axis=0).min() * rows.sum()
    return total_a / len(ade), total_f / len(ade)


@dataclass(frozen=True)
class CollisionStats:
    percent: float
    n_frames: int        # predicted frames with at least one pedestrian
    ped_frames: int      # sum of pedestrians over those frames and samples
    colliding: int       # sum of colliding pedestrians over those frames and samples


def collision_percentage(positions: np.ndarray, scene: np.ndarray, threshold: float = COLLISION_THRESHOLD) -> CollisionStats:
    """Average over samples and predicted frames of the percentage of colliding pedestrians.

    ``positions`` is (P, k, T, 2); pedestrians sharing a ``scene`` id share
    frames and sample index j forms one joint scene sample. Only same-frame
    proximity counts; a pedestrian is counted once however many partners it has.
    """
    positions = np.asarray(positions, dtype=float)
    scene = np.asarray(scene)
    if positions.ndim != 4 or len(scene) != len(positions):
        raise ValueError(f"positions {positions.shape} vs scene ids {scene.shape}")
    k, steps = positions.shape[1], positions.shape[2]
    per_sample = np.zeros(k)
    n_frames = ped_frames = colliding = 0
    for s in np.unique(scene):
        group = positions[scene == s]
        n = len(group)
        n_frames += steps
        ped_frames += n * steps * k
        if n < 2:
            continue
        # (k, T, n, n) distances within each frame of each sample
        pts = group.transpose(1, 2, 0, 3)
        d = np.linalg.norm(pts[:, :, :, None] - pts[:, :, None], axis=-1)
        d[..., np.arange(n), np.arange(n)] = np.inf
        counts = (d < threshold).any(axis=3).sum(axis=2)  # (k, T)
        colliding += int(counts.sum())
        per_sample += 100.0 * counts.sum(axis=1) / n
    percent = float(per_sample.mean() / n_frames) if n_frames else 0.0
    return CollisionStats(percent, n_frames, ped_frames, colliding)


# --- reports -------------------------------------------------------------------


@dataclass
class DatasetResult:
    name: str
    made: float
    mfde: float
    collision: float
    n_peds: int
    n_frames: int
    ped_frames: int
    colliding: int


@dataclass
class EvalReport:
    predictor: str
    k: int
    seed: int
    min_scope: str = "pedestrian"
    results: list = field(default_factory=list)

    def average(self) -> dict:
        if not self.results:
            raise ValueError("empty report")
        return {m: float(np.mean([getattr(r, m) for r in self.results])) for m in ("made", "mfde", "collision")}

    def to_dict(self) -> dict:
        return {
            "predictor": self.predictor,
            "k": self.k,
            "seed": self.seed,
            "min_scope": self.min_scope,
            "datasets": [asdict(r) for r in self.results],
            "average": self.average(),
        }

    def to_text(self) -> str:
        names = [r.name for r in self.results] + ["AVG"]
        avg = self.average()
        width = max(8, *(len(n) for n in names)) + 2
        lines = [f"predictor={self.predictor} k={self.k} seed={self.seed} min_scope={self.min_scope}",
                 "metric".ljust(10) + "".join(n.rjust(width) for n in names)]
        for label, key, fmt in (("mADE", "made", "{:.3f}"), ("mFDE", "mfde", "{:.3f}"), ("%c", "collision", "{:.3f}")):
            cells = [fmt.format(getattr(r, key)) for r in self.results] + [fmt.format(avg[key])]
            lines.append(label.ljust(10) + "".join(c.rjust(width) for c in cells))
        return "\n".join(lines) + "\n"

    def write(self, directory) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        text, record = directory / "report.txt", directory / "report.json"
        text.write_text(self.to_text())
        record.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return text, record


def evaluate_predictions(name: str, pred: PredictionSet, gt: np.ndarray, scope: str = "pedestrian",
                         threshold: float = COLLISION_THRESHOLD) -> DatasetResult:
    made, mfde = made_mfde(pred, gt, scope)
    stats = collision_percentage(pred.absolute(), pred.scene, threshold)
    return DatasetResult(name, made, mfde, stats.percent, len(pred), stats.n_frames, stats.ped_frames, stats.colliding)
