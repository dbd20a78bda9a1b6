"""Planar geometry: homographies, obstacle polygons and angle bins."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Raised for degenerate geometric input."""


@dataclass(frozen=True)
class Homography:
    """3x3 projective map from pixel coordinates to world meters."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        if h.shape != (3, 3):
            raise GeometryError(f"homography must be 3x3, got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise GeometryError("homography has non-finite entries")
        if abs(np.linalg.det(h)) <= 1e-12:
            raise GeometryError("homography is singular")
        object.__setattr__(self, "h", h)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def apply(self, points) -> np.ndarray:
        return apply_homography(self, points)


def apply_homography(h: Homography, p) -> np.ndarray:
    """Map pixel point(s) ``p`` of shape (2,) or (N, 2) to world coordinates."""
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    homog = np.hstack([pts, np.ones((len(pts), 1))]) @ h.h.T
    w = homog[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise GeometryError("degenerate projection (|w| < 1e-12)")
    out = homog[:, :2] / w[:, None]
    return out[0] if single else out


def load_homography(path) -> Homography:
    """Read a whitespace-separated, row-major 3x3 matrix."""
    try:
        values = [float(tok) for tok in Path(path).read_text().split()]
    except ValueError as exc:
        raise GeometryError(f"{path}: non-numeric homography entry ({exc})") from None
    if len(values) != 9:
        raise GeometryError(f"{path}: expected 9 values, found {len(values)}")
    return Homography(np.array(values).reshape(3, 3))


def save_homography(h: Homography, path) -> None:
    rows = [" ".join(repr(float(v)) for v in row) for row in h.h]
    Path(path).write_text("\n".join(rows) + "\n")


@dataclass(frozen=True)
class ObstaclePolygon:
    """Closed polygon ring in world coordinates (last vertex joins the first)."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise GeometryError(f"polygon vertices must be (N, 2), got {v.shape}")
        if len(v) < 3:
            raise GeometryError("polygon needs at least 3 vertices")
        gaps = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
        if np.any(gaps <= 1e-9):
            raise GeometryError("polygon has repeated consecutive vertices")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices, np.roll(self.vertices, -1, axis=0)

    def transformed(self, rotation: np.ndarray, center=(0.0, 0.0)) -> "ObstaclePolygon":
        c = np.asarray(center, dtype=float)
        return ObstaclePolygon((self.vertices - c) @ rotation.T + c)


def nearest_point_on_polygon(poly: ObstaclePolygon, p) -> np.ndarray:
    """Closest boundary point of ``poly`` to ``p``; ties go to the lowest edge index."""
    p = np.asarray(p, dtype=float)
    a, b = poly.edges
    ab = b - a
    t = np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab)
    t = np.clip(t, 0.0, 1.0)
    candidates = a + t[:, None] * ab
    dist2 = np.sum((candidates - p) ** 2, axis=1)
    return candidates[int(np.argmin(dist2))]


def nearest_points(poly: ObstaclePolygon, points: np.ndarray) -> np.ndarray:
    """Vectorised :func:`nearest_point_on_polygon` for points of shape (N, 2)."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    a, b = poly.edges
    ab = b - a
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("nej,ej->ne", rel, ab) / np.einsum("ej,ej->e", ab, ab), 0.0, 1.0)
    candidates = a[None] + t[..., None] * ab[None]
    dist2 = np.sum((candidates - points[:, None, :]) ** 2, axis=2)
    idx = np.argmin(dist2, axis=1)
    return candidates[np.arange(len(points)), idx]


def load_obstacles(path) -> list[ObstaclePolygon]:
    """One polygon per line as ``x1,y1,x2,y2,...``; blank and ``#`` lines skipped."""
    polygons = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = [tok for tok in line.replace(";", ",").replace(" ", ",").split(",") if tok]
        try:
            values = [float(tok) for tok in tokens]
        except ValueError:
            raise GeometryError(f"{path}:{lineno}: non-numeric coordinate") from None
        if len(values) % 2:
            raise GeometryError(f"{path}:{lineno}: odd number of coordinates")
        try:
            polygons.append(ObstaclePolygon(np.array(values).reshape(-1, 2)))
        except GeometryError as exc:
            raise GeometryError(f"{path}:{lineno}: {exc}") from None
    return polygons


def save_obstacles(polygons, path) -> None:
    lines = [",".join(repr(float(c)) for c in poly.vertices.ravel()) for poly in polygons]
    Path(path).write_text("".join(line + "\n" for line in lines))


@dataclass(frozen=True)
class AngleBinPartition:
    """``m`` equal half-open arcs starting at ``origin_angle``.

    The default origin ``-pi/m`` centres bin 0 on the +x axis.
    """

    m: int
    origin_angle: float = field(default=None)

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise GeometryError(f"bin count must be a positive integer, got {self.m}")
        if self.origin_angle is None:
            object.__setattr__(self, "origin_angle", -math.pi / self.m)

    @property
    def width(self) -> float:
        return TWO_PI / self.m

    def bin_indices(self, vectors) -> np.ndarray:
        """Bin id for each row of ``vectors`` (N, 2). Zero rows raise."""
        v = np.asarray(vectors, dtype=float).reshape(-1, 2)
        if np.any(np.hypot(v[:, 0], v[:, 1]) == 0.0):
            raise GeometryError("zero vector has no direction")
        rel = np.mod(np.arctan2(v[:, 1], v[:, 0]) - self.origin_angle, TWO_PI)
        idx = np.floor(rel / self.width).astype(int)
        return np.clip(idx, 0, self.m - 1)


def bin_index(partition: AngleBinPartition, v) -> int:
    return int(partition.bin_indices(v)[0])


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])
