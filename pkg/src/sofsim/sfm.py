"""Social Force Model forces and the angle-binned social force representation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

import numpy as np

from .geometry import AngleBinPartition, ObstaclePolygon, nearest_point_on_polygon

MAX_SPEED = 15.0
MIN_COLLISION_TIME = 1e-6
COS_CUTOFF = math.cos(math.pi / 4)


class CoincidentPointError(ValueError):
    """Two points that must be distinct coincide (distance < 1e-9 m)."""


@dataclass(frozen=True)
class SfmParams:
    """SFM gains. ``k`` is 1/s; ``a_ped``/``b_ped`` drive the collision-prediction
    term; ``a_obs`` (N), ``b_obs`` (m), ``d_obs`` (m) drive obstacle repulsion."""

    k: float = 2.0
    a_ped: float = 1.0
    b_ped: float = 0.71
    a_obs: float = 5.0
    b_obs: float = 0.3
    d_obs: float = 0.4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"SfmParams.{name} must be strictly positive, got {value}")

    def scaled_amplitudes(self, c: float) -> "SfmParams":
        return SfmParams(self.k, self.a_ped * c, self.b_ped, self.a_obs * c, self.b_obs, self.d_obs)


@dataclass(frozen=True)
class AgentState:
    id: Hashable
    pos: np.ndarray
    vel: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.pos, dtype=float).reshape(2)
        vel = np.asarray(self.vel, dtype=float).reshape(2)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError(f"agent {self.id!r} has non-finite state")
        if np.hypot(*vel) >= MAX_SPEED:
            raise ValueError(f"agent {self.id!r} speed exceeds {MAX_SPEED} m/s")
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "vel", vel)


@dataclass(frozen=True)
class SocialForceRepresentation:
    f_ped_bins: np.ndarray
    f_obs_bins: np.ndarray

    def __post_init__(self):
        ped = np.asarray(self.f_ped_bins, dtype=float)
        obs = np.asarray(self.f_obs_bins, dtype=float)
        if ped.shape != obs.shape or ped.ndim != 2 or ped.shape[1] != 2:
            raise ValueError(f"bin arrays must both be (m, 2), got {ped.shape} and {obs.shape}")
        if not (np.all(np.isfinite(ped)) and np.all(np.isfinite(obs))):
            raise ValueError("non-finite force in representation")
        object.__setattr__(self, "f_ped_bins", ped)
        object.__setattr__(self, "f_obs_bins", obs)

    @property
    def m(self) -> int:
        return len(self.f_ped_bins)

    def as_vector(self) -> np.ndarray:
        """Flat feature layout: pedestrian bins then obstacle bins, (x, y) per bin."""
        return np.concatenate([self.f_ped_bins.ravel(), self.f_obs_bins.ravel()])


def goal_force(params: SfmParams, v0, v) -> np.ndarray:
    return params.k * (np.asarray(v0, dtype=float) - np.asarray(v, dtype=float))


def obstacle_force(params: SfmParams, obstacle_point, ped: AgentState) -> np.ndarray:
    """Exponential repulsion from a single obstacle point, pointing at the pedestrian."""
    diff = ped.pos - np.asarray(obstacle_point, dtype=float)
    d = math.hypot(diff[0], diff[1])
    if d < 1e-9:
        raise CoincidentPointError(f"pedestrian {ped.id!r} sits on an obstacle point")
    return params.a_obs * math.exp((params.d_obs - d) / params.b_obs) * diff / d


def _collision_forces(params, pos_p, vel_p, pos_q, vel_q) -> np.ndarray:
    d = pos_p[None, :] - pos_q
    dist = np.hypot(d[:, 0], d[:, 1])
    if np.any(dist < 1e-9):
        raise CoincidentPointError("two pedestrians share a position")
    forces = np.zeros_like(d)
    if len(d) == 0:
        return forces
    v_rel = vel_p[None, :] - vel_q  # velocity of p relative to q
    speed_rel = np.hypot(v_rel[:, 0], v_rel[:, 1])
    moving = speed_rel > 0.0
    cos_theta = np.zeros(len(d))
    # theta is measured between the approach velocity of q (-v_rel) and d (pointing to p)
    cos_theta[moving] = -np.einsum("ij,ij->i", v_rel[moving], d[moving]) / (
        speed_rel[moving] * dist[moving]
    )
    on_course = moving & (cos_theta >= COS_CUTOFF)
    if not np.any(on_course):
        return forces
    t_q = np.full(len(d), np.inf)
    t_q[on_course] = np.maximum(
        0.0,
        -np.einsum("ij,ij->i", d[on_course], v_rel[on_course]) / speed_rel[on_course] ** 2,
    )
    t_p = max(float(np.min(t_q)), MIN_COLLISION_TIME)
    d_future = d[on_course] + v_rel[on_course] * t_p
    norm_future = np.hypot(d_future[:, 0], d_future[:, 1])
    # exact head-on encounters meet at t_p; fall back to the current bearing
    degenerate = norm_future < 1e-9
    d_future[degenerate] = d[on_course][degenerate]
    norm_future[degenerate] = dist[on_course][degenerate]
    magnitude = params.a_ped * (math.hypot(*vel_p) / t_p) * np.exp(-dist[on_course] / params.b_ped)
    forces[on_course] = (magnitude / norm_future)[:, None] * d_future
    return forces


def collision_time(p: AgentState, q: AgentState) -> float:
    """Time to closest approach of p and q, ``inf`` outside the pi/4 approach cone."""
    d = p.pos - q.pos
    v_rel = p.vel - q.vel
    speed2 = float(v_rel @ v_rel)
    if speed2 == 0.0:
        return math.inf
    cos_theta = -float(v_rel @ d) / (math.sqrt(speed2) * math.hypot(*d))
    if cos_theta < COS_CUTOFF:
        return math.inf
    return max(0.0, -float(d @ v_rel) / speed2)


def collision_prediction_force(
    params: SfmParams, p: AgentState, others: Sequence[AgentState]
) -> np.ndarray:
    """Per-neighbour collision-prediction repulsion on ``p``, shape (len(others), 2)."""
    if not others:
        return np.zeros((0, 2))
    pos_q = np.array([q.pos for q in others])
    vel_q = np.array([q.vel for q in others])
    return _collision_forces(params, p.pos, p.vel, pos_q, vel_q)


def resultant_force(goal, ped_forces, obs_forces) -> np.ndarray:
    total = np.array(goal, dtype=float).reshape(2)
    for f in ped_forces:
        total = total + np.asarray(f, dtype=float)
    for f in obs_forces:
        total = total + np.asarray(f, dtype=float)
    return total


def _bin_sum(forces: np.ndarray, partition: AngleBinPartition) -> np.ndarray:
    bins = np.zeros((partition.m, 2))
    if len(forces):
        nonzero = np.hypot(forces[:, 0], forces[:, 1]) > 0.0
        if np.any(nonzero):
            np.add.at(bins, partition.bin_indices(forces[nonzero]), forces[nonzero])
    return bins


def obstacle_forces(params: SfmParams, pos, obstacles: Sequence[ObstaclePolygon]) -> np.ndarray:
    """One repulsion per polygon, from its nearest boundary point; shape (len(obstacles), 2)."""
    pos = np.asarray(pos, dtype=float)
    out = np.zeros((len(obstacles), 2))
    for i, poly in enumerate(obstacles):
        diff = pos - nearest_point_on_polygon(poly, pos)
        d = math.hypot(diff[0], diff[1])
        if d < 1e-9:
            raise CoincidentPointError("pedestrian sits on an obstacle boundary")
        out[i] = params.a_obs * math.exp((params.d_obs - d) / params.b_obs) * diff / d
    return out


def social_force_representation(
    params: SfmParams,
    p: AgentState,
    others: Sequence[AgentState],
    obstacles: Sequence[ObstaclePolygon],
    partition: AngleBinPartition,
) -> SocialForceRepresentation:
    ped = collision_prediction_force(params, p, others)
    obs = obstacle_forces(params, p.pos, obstacles)
    return SocialForceRepresentation(_bin_sum(ped, partition), _bin_sum(obs, partition))


def frame_representations(
    params: SfmParams,
    pos: np.ndarray,
    vel: np.ndarray,
    obstacles: Sequence[ObstaclePolygon],
    partition: AngleBinPartition,
    targets: Sequence[int] | None = None,
) -> np.ndarray:
    """Representations for agents in one frame.

    ``pos`` and ``vel`` hold every agent present (N, 2). Returns an array of
    shape (len(targets), 2, m, 2): axis 1 is (pedestrian bins, obstacle bins).
    """
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    vel = np.asarray(vel, dtype=float).reshape(-1, 2)
    targets = range(len(pos)) if targets is None else targets
    out = np.zeros((len(targets), 2, partition.m, 2))
    for row, i in enumerate(targets):
        mask = np.arange(len(pos)) != i
        ped = _collision_forces(params, pos[i], vel[i], pos[mask], vel[mask])
        out[row, 0] = _bin_sum(ped, partition)
        if obstacles:
            out[row, 1] = _bin_sum(obstacle_forces(params, pos[i], obstacles), partition)
    return out


def total_forces(
    params: SfmParams,
    pos: np.ndarray,
    vel: np.ndarray,
    desired_vel: np.ndarray,
    obstacles: Sequence[ObstaclePolygon],
) -> np.ndarray:
    """Resultant force on every agent of a frame, shape (N, 2)."""
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    vel = np.asarray(vel, dtype=float).reshape(-1, 2)
    out = np.zeros_like(pos)
    for i in range(len(pos)):
        mask = np.arange(len(pos)) != i
        ped = _collision_forces(params, pos[i], vel[i], pos[mask], vel[mask])
        obs = obstacle_forces(params, pos[i], obstacles)
        out[i] = resultant_force(goal_force(params, desired_vel[i], vel[i]), ped, obs)
    return out
