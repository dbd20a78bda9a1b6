"""Container for k sampled futures per pedestrian."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PRED_LEN, FeatureArrays


@dataclass(frozen=True)
class PredictionSet:
    """k sampled 12-step futures per pedestrian.

    ``y_rel`` holds per-step displacements (P, k, 12, 2); the first one starts
    at ``last_obs``. ``forces`` (same shape) and ``goals`` (P, k, 2, relative to
    the first observed position) are only present for the learned model.
    ``scene`` groups pedestrians that share predicted frames.
    """

    ped_ids: np.ndarray
    scene: np.ndarray
    last_obs: np.ndarray
    last_rel: np.ndarray
    y_rel: np.ndarray
    forces: np.ndarray | None = None
    goals: np.ndarray | None = None

    def __post_init__(self):
        p = len(self.ped_ids)
        if self.y_rel.ndim != 4 or self.y_rel.shape[0] != p or self.y_rel.shape[2:] != (PRED_LEN, 2):
            raise ValueError(f"y_rel must be ({p}, k, {PRED_LEN}, 2), got {self.y_rel.shape}")
        for name in ("scene", "last_obs", "last_rel"):
            if len(getattr(self, name)) != p:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows for {p} pedestrians")
        if self.forces is not None and self.forces.shape != self.y_rel.shape:
            raise ValueError(f"forces {self.forces.shape} vs y_rel {self.y_rel.shape}")
        if self.goals is not None and self.goals.shape != self.y_rel.shape[:2] + (2,):
            raise ValueError(f"goals {self.goals.shape} vs y_rel {self.y_rel.shape}")

    def __len__(self) -> int:
        return len(self.ped_ids)

    @property
    def k(self) -> int:
        return self.y_rel.shape[1]

    def absolute(self) -> np.ndarray:
        """Absolute positions (P, k, 12, 2) by cumulative sum from the last observation."""
        return self.last_obs[:, None, None, :] + np.cumsum(self.y_rel, axis=2)

    def force_positions(self) -> np.ndarray:
        """Positions from the force stream: ``v_t = v_{t-1} + F_t`` seeded by the last observed step."""
        if self.forces is None:
            raise ValueError("this prediction set carries no forces")
        steps = self.last_rel[:, None, None, :] + np.cumsum(self.forces, axis=2)
        return self.last_obs[:, None, None, :] + np.cumsum(steps, axis=2)

    @classmethod
    def from_features(cls, feats: FeatureArrays, y_rel, forces=None, goals=None) -> "PredictionSet":
        return cls(feats.ped_id.copy(), feats.scene.copy(), feats.x_obs[:, -1].copy(), feats.x_rel_obs[:, -1].copy(),
                   np.asarray(y_rel, dtype=float), None if forces is None else np.asarray(forces, dtype=float),
                   None if goals is None else np.asarray(goals, dtype=float))

    def to_dict(self) -> dict:
        out = {
            "ped_ids": self.ped_ids.tolist(),
            "scene": self.scene.tolist(),
            "last_obs": self.last_obs.tolist(),
            "last_rel": self.last_rel.tolist(),
            "y_rel": self.y_rel.tolist(),
        }
        if self.forces is not None:
            out["forces"] = self.forces.tolist()
        if self.goals is not None:
            out["goals"] = self.goals.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionSet":
        y_rel = np.asarray(d["y_rel"], dtype=float)
        if y_rel.size == 0:
            y_rel = y_rel.reshape(0, 0, PRED_LEN, 2)
        return cls(
            np.asarray(d["ped_ids"], dtype=np.int64),
            np.asarray(d["scene"], dtype=np.int64),
            np.asarray(d["last_obs"], dtype=float).reshape(-1, 2),
            np.asarray(d["last_rel"], dtype=float).reshape(-1, 2),
            y_rel,
            np.asarray(d["forces"], dtype=float) if "forces" in d else None,
            np.asarray(d["goals"], dtype=float) if "goals" in d else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PredictionSet":
        return cls.from_dict(json.loads(Path(path).read_text()))
