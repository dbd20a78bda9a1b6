"""Reference predictors: constant velocity (single and multi-sample) and a social force rollout."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import FRAME_DT, PRED_LEN, DataError, FeatureArrays, SceneBatch, _context_velocities
from .prediction import PredictionSet
from .sfm import SfmParams, total_forces


@dataclass(frozen=True)
class CvmConfig:
    samples: int = 1
    angle_std: float = 25.0  # degrees

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("CvmConfig.samples must be at least 1")
        if not self.angle_std >= 0:
            raise ValueError("CvmConfig.angle_std must be non-negative")


CVM = CvmConfig(1)
CVM20 = CvmConfig(20)


def constant_velocity(x_obs: np.ndarray, config: CvmConfig = CVM, rng: np.random.Generator | None = None) -> np.ndarray:
    """Repeat the last observed displacement for 12 steps; (P, T, 2) -> (P, S, 12, 2).

    Sample 0 is noise free; the others rotate the displacement by an angle
    drawn from N(0, angle_std^2).
    """
    x_obs = np.asarray(x_obs, dtype=float)
    if x_obs.ndim != 3 or x_obs.shape[1] < 2:
        raise DataError(f"constant velocity needs at least 2 observed positions, got shape {x_obs.shape}")
    step = x_obs[:, -1] - x_obs[:, -2]
    p, s = len(x_obs), config.samples
    angles = np.zeros((p, s))
    if s > 1:
        rng = rng if rng is not None else np.random.default_rng(0)
        angles[:, 1:] = rng.normal(0.0, math.radians(config.angle_std), size=(p, s - 1))
    cos, sin = np.cos(angles), np.sin(angles)
    turned = np.stack([cos * step[:, None, 0] - sin * step[:, None, 1],
                       sin * step[:, None, 0] + cos * step[:, None, 1]], axis=-1)
    return np.repeat(turned[:, :, None, :], PRED_LEN, axis=2)


def cvm_predict(feats: FeatureArrays, config: CvmConfig = CVM, seed: int = 0) -> PredictionSet:
    y_rel = constant_velocity(feats.x_obs, config, np.random.default_rng(seed))
    return PredictionSet.from_features(feats, y_rel)


# --- social force rollout ------------------------------------------------------------


def default_goals(pos: np.ndarray, vel: np.ndarray, distance: float = 10.0) -> np.ndarray:
    """Point ``distance`` meters ahead along the current heading (the position itself when still)."""
    speed = np.hypot(vel[:, 0], vel[:, 1])
    heading = np.divide(vel, speed[:, None], out=np.zeros_like(vel), where=speed[:, None] > 0)
    return pos + distance * heading


def desired_velocity(pos: np.ndarray, vel: np.ndarray, goals: np.ndarray, speed: np.ndarray) -> np.ndarray:
    """Velocity of magnitude ``speed`` toward the goal; zero once the goal is reached."""
    to_goal = goals - pos
    dist = np.hypot(to_goal[:, 0], to_goal[:, 1])
    return np.divide(to_goal * speed[:, None], dist[:, None], out=np.zeros_like(to_goal), where=dist[:, None] > 1e-9)


def sfm_simulate(pos, vel, goals, params: SfmParams, obstacles=(), steps: int = PRED_LEN, dt: float = FRAME_DT,
                 desired_speed=None):
    """Explicit Euler rollout with unit mass: ``v += F dt``, ``x += v dt``.

    Returns positions, velocities and the forces applied, each (steps, N, 2).
    Desired speeds default to the initial speeds.
    """
    pos = np.array(pos, dtype=float).reshape(-1, 2)
    vel = np.array(vel, dtype=float).reshape(-1, 2)
    goals = np.asarray(goals, dtype=float).reshape(-1, 2)
    speed = np.hypot(vel[:, 0], vel[:, 1]) if desired_speed is None else np.asarray(desired_speed, dtype=float)
    out_pos = np.empty((steps,) + pos.shape)
    out_vel = np.empty_like(out_pos)
    out_force = np.empty_like(out_pos)
    for t in range(steps):
        force = total_forces(params, pos, vel, desired_velocity(pos, vel, goals, speed), obstacles)
        vel = vel + force * dt
        pos = pos + vel * dt
        out_pos[t], out_vel[t], out_force[t] = pos, vel, force
    if not np.all(np.isfinite(out_pos)):
        raise FloatingPointError("social force rollout produced non-finite positions")
    return out_pos, out_vel, out_force


def sfm_rollout(scene: SceneBatch, params: SfmParams | None = None, goals: np.ndarray | None = None,
                dt: float = FRAME_DT) -> PredictionSet:
    """Roll every agent of the last observed frame forward; report the scene's targets.

    ``goals`` (one per target) default to 10 m ahead along the observed heading.
    """
    params = params or scene.params
    ids = scene.context_ids[-1]
    pos = scene.context_pos[-1]
    vel = _context_velocities(scene.context_ids, scene.context_pos, dt)[-1]
    all_goals = default_goals(pos, vel)
    row = {agent: r for r, agent in enumerate(ids.tolist())}
    targets = [row[w.ped_id] for w in scene.windows]
    if goals is not None:
        all_goals[targets] = np.asarray(goals, dtype=float).reshape(-1, 2)
    traj, _, _ = sfm_simulate(pos, vel, all_goals, params, scene.obstacles, PRED_LEN, dt)
    ours = traj[:, targets].transpose(1, 0, 2)
    last = pos[targets]
    y_rel = np.diff(np.concatenate([last[:, None], ours], axis=1), axis=1)
    feats = FeatureArrays.from_batches([scene])
    return PredictionSet.from_features(feats, y_rel[:, None])


def concat_predictions(parts: list[PredictionSet]) -> PredictionSet:
    """Join per-scene prediction sets, renumbering scenes by position in ``parts``."""
    if not parts:
        raise ValueError("nothing to concatenate")
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    scene = np.concatenate([np.full(len(p), i, dtype=np.int64) for i, p in enumerate(parts)])
    optional = {name: (cat(name) if all(getattr(p, name) is not None for p in parts) else None)
                for name in ("forces", "goals")}
    return PredictionSet(cat("ped_ids"), scene, cat("last_obs"), cat("last_rel"), cat("y_rel"), **optional)


def sfm_predict(scenes: list[SceneBatch], params: SfmParams | None = None) -> PredictionSet:
    return concat_predictions([sfm_rollout(s, params) for s in scenes])
