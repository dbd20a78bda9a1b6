"""Annotation parsing, 8+12 windowing and derived per-window features."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .geometry import (
    AngleBinPartition,
    Homography,
    ObstaclePolygon,
    apply_homography,
    load_homography,
    load_obstacles,
    rotation_matrix,
)
from .sfm import SfmParams, SocialForceRepresentation, frame_representations

log = logging.getLogger(__name__)

OBS_LEN = 8
PRED_LEN = 12
SEQ_LEN = OBS_LEN + PRED_LEN
FRAME_DT = 0.4


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass(frozen=True, slots=True)
class AnnotationRecord:
    frame: int
    ped_id: int
    pos: tuple[float, float]


def _as_int(token: str) -> int:
    value = float(token)
    if not value.is_integer():
        raise ValueError(f"{token!r} is not an integer id")
    return int(value)


def parse_annotations(stream: Iterable[str], homography: Homography | None = None) -> list[AnnotationRecord]:
    """Parse ``frame ped_id x y`` lines.

    With ``homography`` the coordinates are treated as pixels and mapped to
    world meters. Blank lines and ``#`` comments are ignored.
    """
    records = []
    seen = {}
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.replace(",", " ").split()
        if len(parts) != 4:
            raise DataError(f"line {lineno}: expected 4 fields (frame ped_id x y), got {len(parts)}")
        try:
            frame, ped = _as_int(parts[0]), _as_int(parts[1])
            x, y = float(parts[2]), float(parts[3])
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DataError(f"line {lineno}: non-finite coordinate")
        key = (frame, ped)
        if key in seen:
            raise DataError(f"line {lineno}: duplicate (frame={frame}, ped_id={ped}), first seen on line {seen[key]}")
        seen[key] = lineno
        records.append(AnnotationRecord(frame, ped, (x, y)))
    if homography is not None and records:
        world = apply_homography(homography, np.array([r.pos for r in records]))
        records = [AnnotationRecord(r.frame, r.ped_id, (float(p[0]), float(p[1]))) for r, p in zip(records, world)]
    records.sort(key=lambda r: (r.frame, r.ped_id))
    return records


def write_annotations(records: Iterable[AnnotationRecord], stream: TextIO) -> None:
    for r in records:
        stream.write(f"{r.frame}\t{r.ped_id}\t{float(r.pos[0])!r}\t{float(r.pos[1])!r}\n")


def frame_step(frames: Sequence[int]) -> int:
    """Spacing between consecutive annotated frames (gcd of the gaps)."""
    gaps = np.diff(np.unique(np.asarray(frames, dtype=np.int64)))
    gaps = gaps[gaps > 0]
    return int(reduce(math.gcd, gaps.tolist())) if len(gaps) else 1


# --- per-trajectory derived quantities -------------------------------------


def relative_steps(positions: np.ndarray) -> np.ndarray:
    """Per-step displacements with the first entry fixed at (0, 0)."""
    positions = np.asarray(positions, dtype=float)
    rel = np.zeros_like(positions)
    rel[1:] = positions[1:] - positions[:-1]
    return rel


def derive_forces(positions: np.ndarray) -> np.ndarray:
    """Unit-mass, unit-timestep force at each interior point (second difference)."""
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 3:
        raise DataError(f"need at least 3 positions to derive forces, got {len(positions)}")
    return positions[2:] - 2.0 * positions[1:-1] + positions[:-2]


def generating_forces(positions: np.ndarray) -> np.ndarray:
    """Forces that replay ``positions`` from rest at the first point.

    Entry t is ``rel[t] - rel[t-1]`` with ``rel[-1] = 0``, so forward
    integration ``v += f; x += v`` reproduces the input. Entries 2.. equal
    :func:`derive_forces`.
    """
    rel = relative_steps(positions)
    f = np.zeros_like(rel)
    f[1:] = rel[1:] - rel[:-1]
    return f


def integrate_forces(start: np.ndarray, forces: np.ndarray, v0=(0.0, 0.0)) -> np.ndarray:
    """Unit-mass, unit-step forward integration; inverse of :func:`generating_forces`."""
    out = np.empty((len(forces), 2))
    x = np.asarray(start, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    for t, f in enumerate(forces):
        v = v + f
        x = x + v
        out[t] = x
    return out


def finite_difference_velocity(positions: np.ndarray, dt: float = FRAME_DT) -> np.ndarray:
    """Backward differences; the first entry copies the first forward difference."""
    positions = np.asarray(positions, dtype=float)
    vel = np.zeros_like(positions)
    if len(positions) > 1:
        vel[1:] = (positions[1:] - positions[:-1]) / dt
        vel[0] = vel[1]
    return vel


def derive_goal_force(params: SfmParams, positions: np.ndarray, dt: float = FRAME_DT) -> np.ndarray:
    """Attractive force at each observed step toward the last observed position.

    The desired speed is the current speed; once the goal is reached the
    desired velocity equals the current one.
    """
    positions = np.asarray(positions, dtype=float)
    vel = finite_difference_velocity(positions, dt)
    to_goal = positions[-1] - positions
    dist = np.hypot(to_goal[:, 0], to_goal[:, 1])
    speed = np.hypot(vel[:, 0], vel[:, 1])
    desired = vel.copy()
    away = dist > 1e-9
    desired[away] = (speed[away] / dist[away])[:, None] * to_goal[away]
    return params.k * (desired - vel)


# --- windows ----------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryWindow:
    ped_id: int
    x_obs: np.ndarray
    x_pred_gt: np.ndarray
    x_rel_obs: np.ndarray
    x_r_obs: np.ndarray
    f_total_obs: np.ndarray
    f_goal: np.ndarray
    g_r_gt: np.ndarray

    @classmethod
    def from_track(cls, ped_id: int, track: np.ndarray, params: SfmParams, dt: float = FRAME_DT):
        track = np.asarray(track, dtype=float)
        if track.shape != (SEQ_LEN, 2):
            raise DataError(f"track must be ({SEQ_LEN}, 2), got {track.shape}")
        x_obs, x_pred = track[:OBS_LEN], track[OBS_LEN:]
        return cls(
            ped_id=ped_id,
            x_obs=x_obs,
            x_pred_gt=x_pred,
            x_rel_obs=relative_steps(x_obs),
            x_r_obs=x_obs - x_obs[0],
            f_total_obs=generating_forces(x_obs),
            f_goal=derive_goal_force(params, x_obs, dt),
            g_r_gt=x_pred[-1] - x_obs[0],
        )

    @property
    def x_rel_pred(self) -> np.ndarray:
        """Ground-truth future steps; the first is taken from the last observation."""
        return np.diff(np.vstack([self.x_obs[-1:], self.x_pred_gt]), axis=0)

    @property
    def track(self) -> np.ndarray:
        return np.vstack([self.x_obs, self.x_pred_gt])


def _context_velocities(context_ids, context_pos, dt):
    """Velocity of every agent in each observed frame, using only observed frames."""
    vels = []
    index = [dict(zip(ids.tolist(), range(len(ids)))) for ids in context_ids]
    for t, (ids, pos) in enumerate(zip(context_ids, context_pos)):
        vel = np.zeros_like(pos)
        for row, agent in enumerate(ids.tolist()):
            if t > 0 and agent in index[t - 1]:
                vel[row] = (pos[row] - context_pos[t - 1][index[t - 1][agent]]) / dt
            elif t + 1 < len(context_ids) and agent in index[t + 1]:
                vel[row] = (context_pos[t + 1][index[t + 1][agent]] - pos[row]) / dt
        vels.append(vel)
    return vels


def sequence_representations(
    target_ids: Sequence[int],
    context_ids: Sequence[np.ndarray],
    context_pos: Sequence[np.ndarray],
    obstacles: Sequence[ObstaclePolygon],
    params: SfmParams,
    partition: AngleBinPartition,
    dt: float = FRAME_DT,
) -> np.ndarray:
    """Representation of each target at each observed frame: (n, T, 2, m, 2)."""
    vels = _context_velocities(context_ids, context_pos, dt)
    out = np.zeros((len(target_ids), len(context_ids), 2, partition.m, 2))
    for t, (ids, pos, vel) in enumerate(zip(context_ids, context_pos, vels)):
        where = {agent: row for row, agent in enumerate(ids.tolist())}
        rows = [where[agent] for agent in target_ids]
        out[:, t] = frame_representations(params, pos, vel, obstacles, partition, targets=rows)
    return out


@dataclass(frozen=True)
class SceneBatch:
    """Pedestrians fully present over one 20-frame range, plus their surroundings.

    ``context_ids``/``context_pos`` list every agent seen in each observed
    frame, including partially present ones (they still exert forces).
    ``rep`` has shape (n, 8, 2, m, 2).
    """

    frames: tuple
    windows: list
    obstacles: tuple
    context_ids: tuple
    context_pos: tuple
    rep: np.ndarray
    params: SfmParams = field(default_factory=SfmParams)
    partition: AngleBinPartition = field(default_factory=lambda: AngleBinPartition(4))
    dt: float = FRAME_DT

    @classmethod
    def build(cls, frames, ped_ids, tracks, context_ids, context_pos, obstacles=(),
              params: SfmParams | None = None, partition: AngleBinPartition | None = None,
              dt: float = FRAME_DT) -> "SceneBatch":
        params = params or SfmParams()
        partition = partition or AngleBinPartition(4)
        windows = [TrajectoryWindow.from_track(pid, tr, params, dt) for pid, tr in zip(ped_ids, tracks)]
        context_ids = tuple(np.asarray(ids, dtype=np.int64) for ids in context_ids)
        context_pos = tuple(np.asarray(pos, dtype=float).reshape(-1, 2) for pos in context_pos)
        rep = sequence_representations(
            [w.ped_id for w in windows], context_ids, context_pos, obstacles, params, partition, dt
        )
        return cls(tuple(frames), windows, tuple(obstacles), context_ids, context_pos, rep, params, partition, dt)

    def __len__(self) -> int:
        return len(self.windows)

    def representation(self, i: int, t: int) -> SocialForceRepresentation:
        return SocialForceRepresentation(self.rep[i, t, 0], self.rep[i, t, 1])

    @property
    def tracks(self) -> np.ndarray:
        return np.stack([w.track for w in self.windows])

    def centroid(self) -> np.ndarray:
        return self.tracks.reshape(-1, 2).mean(axis=0)


def build_windows(
    records: Sequence[AnnotationRecord],
    obstacles: Sequence[ObstaclePolygon] = (),
    homography: Homography | None = None,
    params: SfmParams | None = None,
    partition: AngleBinPartition | None = None,
    dt: float = FRAME_DT,
) -> list[SceneBatch]:
    """Slide a 20-frame window (stride one frame) over the annotations.

    Only pedestrians present in all 20 frames become targets. ``homography``
    maps pixel coordinates to meters when the records are not yet in world
    units.
    """
    if not records:
        return []
    if homography is not None:
        world = apply_homography(homography, np.array([r.pos for r in records]))
        records = [AnnotationRecord(r.frame, r.ped_id, (float(p[0]), float(p[1]))) for r, p in zip(records, world)]
    by_frame: dict[int, dict[int, tuple]] = {}
    for r in records:
        by_frame.setdefault(r.frame, {})[r.ped_id] = r.pos
    step = frame_step(list(by_frame))
    batches = []
    used = set()
    first, last = min(by_frame), max(by_frame)
    for start in range(first, last - (SEQ_LEN - 1) * step + 1, step):
        frames = [start + i * step for i in range(SEQ_LEN)]
        if any(f not in by_frame for f in frames):
            continue
        present = set(by_frame[frames[0]])
        for f in frames[1:]:
            present &= by_frame[f].keys()
        if not present:
            continue
        ped_ids = sorted(present)
        used.update(ped_ids)
        tracks = np.array([[by_frame[f][p] for f in frames] for p in ped_ids])
        context_ids = [sorted(by_frame[f]) for f in frames[:OBS_LEN]]
        context_pos = [[by_frame[f][a] for a in ids] for f, ids in zip(frames[:OBS_LEN], context_ids)]
        batches.append(SceneBatch.build(frames, ped_ids, tracks, context_ids, context_pos,
                                        obstacles, params, partition, dt))
    all_peds = {r.ped_id for r in records}
    log.info("windowing: %d scenes, %d windows, %d of %d tracks never fully covered a window",
             len(batches), sum(len(b) for b in batches), len(all_peds - used), len(all_peds))
    return batches


def augment_rotation(batch: SceneBatch, angle: float) -> SceneBatch:
    """Rigidly rotate a scene about its centroid and re-derive every feature."""
    if angle == 0.0:
        return batch
    rot = rotation_matrix(angle)
    c = batch.centroid()
    turn = lambda pts: (np.asarray(pts) - c) @ rot.T + c  # noqa: E731
    tracks = [turn(w.track) for w in batch.windows]
    return SceneBatch.build(
        batch.frames,
        [w.ped_id for w in batch.windows],
        tracks,
        batch.context_ids,
        [turn(pos) for pos in batch.context_pos],
        [poly.transformed(rot, c) for poly in batch.obstacles],
        batch.params,
        batch.partition,
        batch.dt,
    )


def leave_one_out_splits(names: Sequence[str]) -> list[tuple[list[str], str]]:
    names = list(names)
    if len(names) < 2:
        raise DataError("leave-one-out needs at least two datasets")
    if len(set(names)) != len(names):
        raise DataError("dataset names must be unique")
    return [([n for n in names if n != held_out], held_out) for held_out in names]


# --- stacked arrays for the model -------------------------------------------


@dataclass
class FeatureArrays:
    """Window features stacked along a leading pedestrian axis."""

    x_obs: np.ndarray
    x_pred: np.ndarray
    x_rel_obs: np.ndarray
    x_rel_pred: np.ndarray
    x_r_obs: np.ndarray
    f_total: np.ndarray
    f_goal: np.ndarray
    rep: np.ndarray
    g_r: np.ndarray
    scene: np.ndarray
    ped_id: np.ndarray

    @classmethod
    def from_batches(cls, batches: Sequence[SceneBatch]) -> "FeatureArrays":
        windows = [(i, w, b.rep[j]) for i, b in enumerate(batches) for j, w in enumerate(b.windows)]
        if not windows:
            raise DataError("no windows to stack")
        n = len(windows)
        stack = lambda get: np.stack([get(w) for _, w, _ in windows])  # noqa: E731
        return cls(
            x_obs=stack(lambda w: w.x_obs),
            x_pred=stack(lambda w: w.x_pred_gt),
            x_rel_obs=stack(lambda w: w.x_rel_obs),
            x_rel_pred=stack(lambda w: w.x_rel_pred),
            x_r_obs=stack(lambda w: w.x_r_obs),
            f_total=stack(lambda w: w.f_total_obs),
            f_goal=stack(lambda w: w.f_goal),
            rep=np.stack([r.reshape(OBS_LEN, -1) for _, _, r in windows]),
            g_r=stack(lambda w: w.g_r_gt),
            scene=np.array([i for i, _, _ in windows], dtype=np.int64).reshape(n),
            ped_id=np.array([w.ped_id for _, w, _ in windows], dtype=np.int64).reshape(n),
        )

    def __len__(self) -> int:
        return len(self.x_obs)

    def subset(self, idx) -> "FeatureArrays":
        return FeatureArrays(**{k: v[idx] for k, v in self.__dict__.items()})


# --- datasets on disk -------------------------------------------------------


@dataclass(frozen=True)
class DatasetSource:
    name: str
    annotations: Path
    obstacles: Path | None = None
    homography: Path | None = None
    pixel_coordinates: bool = False

    def load(self, params: SfmParams | None = None, partition: AngleBinPartition | None = None) -> list[SceneBatch]:
        if not self.annotations.is_file():
            raise DataError(f"{self.name}: annotation file not found: {self.annotations}")
        homography = None
        if self.pixel_coordinates:
            if self.homography is None:
                raise DataError(f"{self.name}: pixel coordinates need a homography")
            homography = load_homography(self.homography)
        obstacles = []
        if self.obstacles is not None:
            if not self.obstacles.is_file():
                raise DataError(f"{self.name}: obstacle file not found: {self.obstacles}")
            obstacles = load_obstacles(self.obstacles)
            if homography is not None:
                obstacles = [ObstaclePolygon(apply_homography(homography, p.vertices)) for p in obstacles]
        with open(self.annotations) as fh:
            try:
                records = parse_annotations(fh)
            except DataError as exc:
                raise DataError(f"{self.annotations}: {exc}") from None
        return build_windows(records, obstacles, homography, params, partition)


def load_manifest(path) -> dict[str, DatasetSource]:
    """Read a JSON manifest ``{"datasets": {name: {"annotations": ..., ...}}}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    root = path.parent
    resolve = lambda p: None if p is None else (root / p).resolve()  # noqa: E731
    out = {}
    for name, entry in spec.get("datasets", {}).items():
        if "annotations" not in entry:
            raise DataError(f"manifest entry {name!r} lacks 'annotations'")
        out[name] = DatasetSource(
            name=name,
            annotations=resolve(entry["annotations"]),
            obstacles=resolve(entry.get("obstacles")),
            homography=resolve(entry.get("homography")),
            pixel_coordinates=bool(entry.get("pixel_coordinates", False)),
        )
    if not out:
        raise DataError(f"manifest {path} lists no datasets")
    return out


def observation_features(
    ped_ids: Sequence[int],
    x_obs: np.ndarray,
    context_ids: Sequence[np.ndarray],
    context_pos: Sequence[np.ndarray],
    obstacles: Sequence[ObstaclePolygon] = (),
    params: SfmParams | None = None,
    partition: AngleBinPartition | None = None,
    dt: float = FRAME_DT,
) -> FeatureArrays:
    """Features for pedestrians whose future is unknown (the future fields are NaN).

    ``x_obs`` is (n, 8, 2); the context lists every agent of each observed frame.
    All pedestrians share scene 0.
    """
    params = params or SfmParams()
    partition = partition or AngleBinPartition(4)
    x_obs = np.asarray(x_obs, dtype=float)
    n = len(x_obs)
    if x_obs.shape != (n, OBS_LEN, 2) or len(ped_ids) != n:
        raise DataError(f"expected {len(ped_ids)} observations of shape ({OBS_LEN}, 2), got {x_obs.shape}")
    context_ids = [np.asarray(ids, dtype=np.int64) for ids in context_ids]
    context_pos = [np.asarray(pos, dtype=float).reshape(-1, 2) for pos in context_pos]
    rep = sequence_representations(list(ped_ids), context_ids, context_pos, obstacles, params, partition, dt)
    unknown = np.full((n, PRED_LEN, 2), np.nan)
    return FeatureArrays(
        x_obs=x_obs,
        x_pred=unknown,
        x_rel_obs=np.stack([relative_steps(x) for x in x_obs]) if n else np.zeros((0, OBS_LEN, 2)),
        x_rel_pred=unknown.copy(),
        x_r_obs=x_obs - x_obs[:, :1],
        f_total=np.stack([generating_forces(x) for x in x_obs]) if n else np.zeros((0, OBS_LEN, 2)),
        f_goal=np.stack([derive_goal_force(params, x, dt) for x in x_obs]) if n else np.zeros((0, OBS_LEN, 2)),
        rep=rep.reshape(n, OBS_LEN, -1),
        g_r=np.full((n, 2), np.nan),
        scene=np.zeros(n, dtype=np.int64),
        ped_id=np.asarray(ped_ids, dtype=np.int64).reshape(n),
    )
