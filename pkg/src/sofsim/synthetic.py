"""Synthetic scenes: straight/turning walkers and crossing pairs with known collisions."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FRAME_DT, SEQ_LEN, AnnotationRecord, write_annotations
from .geometry import rotation_matrix

KINDS = ("straight", "left", "right")
FRAME_STRIDE = 10
MEET_GAP = 0.05


def toy_tracks(n: int, rng: np.random.Generator, heading_range: float = math.pi,
               turn_steps: tuple[int, int] = (6, 14)) -> tuple[np.ndarray, np.ndarray]:
    """``n`` 20-step tracks that walk straight or make a 90 degree turn.

    The turn spreads over three steps and starts at a uniformly drawn step
    within ``turn_steps``. Headings are uniform in ``[-heading_range, heading_range]``;
    speeds in [0.8, 1.6] m/s. Returns tracks (n, 20, 2) and kind indices into KINDS.
    """
    kinds = rng.integers(len(KINDS), size=n)
    headings = rng.uniform(-heading_range, heading_range, size=n)
    speeds = rng.uniform(0.8, 1.6, size=n) * FRAME_DT
    turn_at = rng.integers(turn_steps[0], turn_steps[1] + 1, size=n)
    tracks = np.zeros((n, SEQ_LEN, 2))
    for i in range(n):
        sign = (0.0, 1.0, -1.0)[kinds[i]]
        angle = np.full(SEQ_LEN - 1, headings[i])
        for step in range(SEQ_LEN - 1):
            progress = np.clip((step - turn_at[i] + 1) / 3.0, 0.0, 1.0)
            angle[step] += sign * progress * math.pi / 2
        steps = speeds[i] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        tracks[i, 1:] = np.cumsum(steps, axis=0)
    return tracks, kinds


def tracks_to_records(tracks: np.ndarray, spacing: int = 30, origin_spread: float = 0.0,
                      rng: np.random.Generator | None = None) -> list[AnnotationRecord]:
    """Give each track its own frame range (``spacing`` steps apart) so every
    track forms one isolated window."""
    records = []
    for i, track in enumerate(tracks):
        offset = np.zeros(2) if rng is None else rng.uniform(-origin_spread, origin_spread, size=2)
        for t, (x, y) in enumerate(track + offset):
            records.append(AnnotationRecord((i * spacing + t) * FRAME_STRIDE, i + 1, (float(x), float(y))))
    return records


@dataclass(frozen=True)
class CollisionScene:
    """Walkers present in every frame; each crossing pair meets in exactly one frame."""

    records: list
    n_frames: int
    n_peds: int
    collision_frames: tuple  # frame index (0-based step) of each pair's meeting


def collision_scene(collision_steps=(10, 25, 33), n_frames: int = 45, n_solo: int = 4,
                    step_len: float = 0.5) -> CollisionScene:
    """Crossing pairs 100 m apart plus solitary walkers far from everyone.

    Pair g meets at step ``collision_steps[g]``: one walker moves along +x, the
    other along +y on a line ``MEET_GAP`` to the side, so at that step they are
    ``MEET_GAP`` apart (a collision, but never coincident). At any other step
    they are more than half a meter apart for the default ``step_len``.
    """
    records = []
    pid = 1
    for g, meet in enumerate(collision_steps):
        base = np.array([100.0 * g, 0.0])
        for axis in (0, 1):
            for t in range(n_frames):
                pos = base + (MEET_GAP * axis, 0.0)
                pos[axis] += (t - meet) * step_len
                records.append(AnnotationRecord(t * FRAME_STRIDE, pid, (float(pos[0]), float(pos[1]))))
            pid += 1
    for s in range(n_solo):
        base = np.array([100.0 * (len(collision_steps) + s), 50.0])
        for t in range(n_frames):
            records.append(AnnotationRecord(t * FRAME_STRIDE, pid, (float(base[0] + t * step_len), float(base[1]))))
        pid += 1
    records.sort(key=lambda r: (r.frame, r.ped_id))
    return CollisionScene(records, n_frames, pid - 1, tuple(collision_steps))


def rotate_tracks(tracks: np.ndarray, angle: float) -> np.ndarray:
    return tracks @ rotation_matrix(angle).T


def write_dataset(directory, name: str, records) -> Path:
    """Write ``<name>.txt`` annotations into ``directory`` and return its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.txt"
    with open(path, "w") as fh:
        write_annotations(records, fh)
    return path


def write_toy_suite(directory, n_per_set: int = 100, seed: int = 0, n_sets: int = 3) -> Path:
    """Several toy datasets plus a manifest, for exercising leave-one-out runs."""
    directory = Path(directory)
    rng = np.random.default_rng(seed)
    entries = {}
    for s in range(n_sets):
        tracks, _ = toy_tracks(n_per_set, rng)
        name = f"toy{s + 1}"
        write_dataset(directory, name, tracks_to_records(tracks))
        entries[name] = {"annotations": f"{name}.txt"}
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"datasets": entries}, indent=2, sort_keys=True) + "\n")
    return manifest
