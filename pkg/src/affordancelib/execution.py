"""
Turning predicted image-plane waypoints into an executable SE(3) trajectory.

Waypoints are lifted to the camera frame through the pinhole model, optionally moved to the world
frame by a camera-to-world transform, matched to the nearest grasp candidate and given a height
category each. The height-adjusted waypoints are then densified so that no step of the final pose
sequence exceeds a fixed length. Orientation stays at the grasp orientation throughout.

File formats read here::

    intrinsics JSON   {"fx": .., "fy": .., "cx": .., "cy": ..}
    depth map         16-bit binary PGM, plus a JSON sidecar {"scale": metres per unit}
    grasps JSON       [{"position": [x, y, z], "quaternion": [w, x, y, z]}, ...]
    waypoints JSON    {"waypoints": [[u, v], ...], "resolution": [w, h], "heights": [...]?}
    extrinsics JSON   {"camera_to_world": 4x4 nested list}

Depth value 0 marks a hole.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Protocol

import attrs
import numpy as np
from numpy.typing import ArrayLike, NDArray
from PIL import Image

from .exceptions import DepthError, ExecutionError, HeightSelectionError

_LOGGER = logging.getLogger(__name__)

DEPTH_FALLBACK_RADIUS = 5
DEFAULT_CLEARANCE = 0.10
DEFAULT_MAX_STEP = 0.01
QUATERNION_TOLERANCE = 1e-6

Vector3 = tuple[float, float, float]


class HeightCategory(enum.StrEnum):
    AT_TARGET_LEVEL = "at-target-level"
    ABOVE_TARGET = "above-target"


def _positive_focal(_instance: Any, attribute: attrs.Attribute[float], value: float) -> None:
    if not value > 0:
        raise ValueError(f"{attribute.name} must be > 0, got {value}")


@attrs.frozen
class CameraIntrinsics:
    fx: float = attrs.field(converter=float, validator=_positive_focal)
    fy: float = attrs.field(converter=float, validator=_positive_focal)
    cx: float = attrs.field(converter=float)
    cy: float = attrs.field(converter=float)

    @property
    def matrix(self) -> NDArray[np.float64]:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict[str, float]:
        return attrs.asdict(self)


def _vector3(value: Any) -> Vector3:
    x, y, z = (float(v) for v in value)
    return x, y, z


def _quaternion(value: Any) -> tuple[float, float, float, float]:
    w, x, y, z = (float(v) for v in value)
    return w, x, y, z


@attrs.frozen
class SE3Pose:
    position: Vector3 = attrs.field(converter=_vector3)
    quaternion: tuple[float, float, float, float] = attrs.field(
        default=(1.0, 0.0, 0.0, 0.0), converter=_quaternion
    )

    @quaternion.validator
    def _check_unit(self, _attribute: attrs.Attribute[Any], value: tuple[float, ...]) -> None:
        norm = math.sqrt(sum(c * c for c in value))
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise ValueError(f"quaternion {value} is not unit length (norm {norm:.8f})")

    @property
    def translation(self) -> NDArray[np.float64]:
        return np.array(self.position)

    def moved_to(self, position: ArrayLike) -> SE3Pose:
        return SE3Pose(tuple(np.asarray(position, dtype=np.float64).tolist()), self.quaternion)

    def to_dict(self) -> dict[str, list[float]]:
        return {"position": list(self.position), "quaternion": list(self.quaternion)}

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> SE3Pose:
        return cls(raw["position"], raw.get("quaternion", (1.0, 0.0, 0.0, 0.0)))


@attrs.frozen(eq=False)
class DepthMap:
    """Per-pixel depth in metres, ``(height, width)``; zero or non-finite entries are holes."""

    values: NDArray[np.float64] = attrs.field(converter=lambda v: np.asarray(v, dtype=np.float64))

    @values.validator
    def _check_values(self, _attribute: attrs.Attribute[Any], value: NDArray[np.float64]) -> None:
        if value.ndim != 2 or value.size == 0:
            raise ValueError(f"depth map must be a non-empty 2-D array, got shape {value.shape}")
        if np.any(value[np.isfinite(value)] < 0):
            raise ValueError("depth values must be nonnegative")

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def valid(self) -> NDArray[np.bool_]:
        return np.isfinite(self.values) & (self.values > 0)

    def at(self, u: float, v: float, radius: int = DEPTH_FALLBACK_RADIUS) -> float:
        """
        Depth at pixel ``(u, v)``, falling back to the nearest valid pixel within ``radius``.

        Ties between equally near fallback pixels go to the first in row-major order.
        """
        if not (0 <= u <= self.width and 0 <= v <= self.height):
            raise DepthError(f"pixel ({u:.2f}, {v:.2f}) lies outside the {self.width}x{self.height} depth map")
        col = min(int(round(u)), self.width - 1)
        row = min(int(round(v)), self.height - 1)
        valid = self.valid
        if valid[row, col]:
            return float(self.values[row, col])

        top, bottom = max(row - radius, 0), min(row + radius + 1, self.height)
        left, right = max(col - radius, 0), min(col + radius + 1, self.width)
        rows, cols = np.nonzero(valid[top:bottom, left:right])
        if rows.size:
            rows, cols = rows + top, cols + left
            dist2 = (rows - row) ** 2 + (cols - col) ** 2
            best = int(np.argmin(dist2))
            if dist2[best] <= radius * radius:
                _LOGGER.warning(
                    "No depth at pixel (%d, %d); using (%d, %d)", col, row, cols[best], rows[best]
                )
                return float(self.values[rows[best], cols[best]])
        raise DepthError(f"no valid depth within {radius} px of pixel ({col}, {row})")

    def save(self, path: Path, scale: float = 0.001) -> None:
        """Write a 16-bit PGM plus its ``{"scale": ...}`` sidecar; holes are stored as 0."""
        units = np.where(self.valid, np.round(self.values / scale), 0)
        if units.max() > np.iinfo(np.uint16).max:
            raise DepthError(f"depth {self.values.max():.3f} m does not fit 16 bits at scale {scale}")
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(units.astype(np.int32)).save(path, format="PPM")
        _sidecar(path).write_text(json.dumps({"scale": scale}), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> DepthMap:
        sidecar = _sidecar(path)
        try:
            scale = float(json.loads(sidecar.read_text(encoding="utf-8"))["scale"])
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DepthError(f"cannot read depth scale from {sidecar}: {exc}") from exc
        if not scale > 0:
            raise DepthError(f"depth scale must be positive, got {scale}")
        try:
            with Image.open(path) as image:
                units = np.asarray(image, dtype=np.float64)
        except OSError as exc:
            raise DepthError(f"cannot read depth map {path}: {exc}") from exc
        return cls(units * scale)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def deproject(pixel: ArrayLike, depth: DepthMap | float, intrinsics: CameraIntrinsics) -> Vector3:
    """
    Lift pixel ``(u, v)`` to the camera frame: ``X = D·K⁻¹·(u, v, 1)``.

    ``depth`` is either a depth map (looked up with the nearest-valid fallback) or a known depth.
    """
    u, v = (float(c) for c in np.asarray(pixel, dtype=np.float64).reshape(2))
    d = depth.at(u, v) if isinstance(depth, DepthMap) else float(depth)
    if not d > 0:
        raise DepthError(f"depth at pixel ({u:.2f}, {v:.2f}) must be positive, got {d}")
    return (u - intrinsics.cx) * d / intrinsics.fx, (v - intrinsics.cy) * d / intrinsics.fy, d


def project(point: ArrayLike, intrinsics: CameraIntrinsics) -> tuple[float, float]:
    x, y, z = (float(c) for c in np.asarray(point, dtype=np.float64).reshape(3))
    if not z > 0:
        raise DepthError(f"point ({x}, {y}, {z}) is not in front of the camera")
    return intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy


def to_pixels(points: ArrayLike, depth: DepthMap) -> NDArray[np.float64]:
    """Normalised ``[0, 1]²`` waypoints to pixel coordinates of ``depth``."""
    return np.asarray(points, dtype=np.float64) * np.array([depth.width, depth.height])


def transform_points(points: ArrayLike, camera_to_world: ArrayLike | None) -> NDArray[np.float64]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if camera_to_world is None:
        return pts
    transform = np.asarray(camera_to_world, dtype=np.float64)
    if transform.shape != (4, 4):
        raise ExecutionError(f"camera-to-world transform must be 4x4, got {transform.shape}")
    return pts @ transform[:3, :3].T + transform[:3, 3]


def select_grasp(candidates: Sequence[SE3Pose], target: ArrayLike) -> SE3Pose:
    """The candidate nearest to ``target``; the lowest index wins a tie."""
    if not candidates:
        raise ExecutionError("no grasp candidates to choose from")
    positions = np.array([c.position for c in candidates])
    distances = np.linalg.norm(positions - np.asarray(target, dtype=np.float64), axis=1)
    return candidates[int(np.argmin(distances))]


class HeightSelector(Protocol):
    def select(self, index: int, waypoints: NDArray[np.float64]) -> HeightCategory: ...


@attrs.frozen
class RuleHeightSelector:
    """Contact stays on the surface; every later waypoint travels above the target."""

    def select(self, index: int, waypoints: NDArray[np.float64]) -> HeightCategory:
        return HeightCategory.AT_TARGET_LEVEL if index == 0 else HeightCategory.ABOVE_TARGET


@attrs.frozen
class ConstantHeightSelector:
    category: HeightCategory = attrs.field(converter=HeightCategory)

    def select(self, index: int, waypoints: NDArray[np.float64]) -> HeightCategory:
        return self.category


@attrs.frozen
class ExplicitHeightSelector:
    """Per-waypoint categories decided elsewhere, e.g. read from the waypoints file."""

    categories: tuple[HeightCategory, ...] = attrs.field(
        converter=lambda values: tuple(HeightCategory(v) for v in values)
    )

    def select(self, index: int, waypoints: NDArray[np.float64]) -> HeightCategory:
        if index >= len(self.categories):
            raise IndexError(f"no height category given for waypoint {index}")
        return self.categories[index]


def assign_heights(waypoints3d: ArrayLike, selector: HeightSelector) -> tuple[HeightCategory, ...]:
    points = np.asarray(waypoints3d, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ExecutionError("cannot assign heights to an empty waypoint list")
    categories = []
    for index in range(len(points)):
        try:
            categories.append(HeightCategory(selector.select(index, points)))
        except Exception as exc:
            raise HeightSelectionError(f"height selection failed at waypoint {index}: {exc}") from exc
    return tuple(categories)


def apply_heights(
    waypoints3d: ArrayLike,
    categories: Sequence[HeightCategory],
    clearance: float = DEFAULT_CLEARANCE,
) -> NDArray[np.float64]:
    """Raise above-target waypoints by ``clearance`` along z; at-target waypoints are unchanged."""
    points = np.array(waypoints3d, dtype=np.float64).reshape(-1, 3)
    if len(categories) != len(points):
        raise ExecutionError(f"{len(points)} waypoints but {len(categories)} height categories")
    lift = np.array([c is HeightCategory.ABOVE_TARGET for c in categories])
    points[lift, 2] += clearance
    return points


@attrs.frozen(eq=False)
class ExecutionPlan:
    grasp: SE3Pose
    waypoints3d: NDArray[np.float64]
    heights: tuple[HeightCategory, ...]
    poses: tuple[SE3Pose, ...]
    max_step: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "grasp": self.grasp.to_dict(),
            "waypoints3d": self.waypoints3d.tolist(),
            "heights": [h.value for h in self.heights],
            "max_step": self.max_step,
            "poses": [p.to_dict() for p in self.poses],
        }

    def write_json(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def segment_count(distance: float, max_step: float) -> int:
    return math.ceil(distance / max_step - 1e-9) if distance > 0 else 0


def build_trajectory(
    grasp: SE3Pose,
    waypoints3d: ArrayLike,
    heights: Sequence[HeightCategory],
    max_step: float = DEFAULT_MAX_STEP,
    *,
    start_at_grasp: bool = False,
) -> ExecutionPlan:
    """
    Densify waypoint₀ → … → waypoint_{T-1} into poses no more than ``max_step`` apart, all held at
    the grasp orientation.

    ``waypoints3d`` are already height-adjusted. Every waypoint appears exactly in the pose list;
    zero-length segments add nothing, so a single waypoint gives a one-pose plan. With
    ``start_at_grasp`` the plan first approaches waypoint₀ from the grasp position.
    """
    if not max_step > 0:
        raise ExecutionError(f"max step must be > 0, got {max_step}")
    points = np.asarray(waypoints3d, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ExecutionError("cannot build a trajectory without waypoints")
    if len(heights) != len(points):
        raise ExecutionError(f"{len(points)} waypoints but {len(heights)} height categories")

    path = [grasp.translation if start_at_grasp else points[0].copy()]
    targets = points if start_at_grasp else points[1:]
    for target in targets:
        start = path[-1]
        n = segment_count(float(np.linalg.norm(target - start)), max_step)
        for j in range(1, n):
            path.append(start + (target - start) * (j / n))
        if n:
            path.append(target.copy())
    poses = tuple(grasp.moved_to(p) for p in path)
    return ExecutionPlan(grasp, points, tuple(heights), poses, max_step)


def plan_execution(
    waypoints: ArrayLike,
    depth: DepthMap,
    intrinsics: CameraIntrinsics,
    candidates: Sequence[SE3Pose],
    *,
    selector: HeightSelector | None = None,
    clearance: float = DEFAULT_CLEARANCE,
    max_step: float = DEFAULT_MAX_STEP,
    camera_to_world: ArrayLike | None = None,
    start_at_grasp: bool = False,
) -> ExecutionPlan:
    """Full execution stage for one normalised waypoint chunk (index 0 is the contact point)."""
    pixels = to_pixels(waypoints, depth).reshape(-1, 2)
    camera_points = np.array([deproject(p, depth, intrinsics) for p in pixels])
    world = transform_points(camera_points, camera_to_world)
    grasp = select_grasp(candidates, world[0])
    heights = assign_heights(world, selector or RuleHeightSelector())
    adjusted = apply_heights(world, heights, clearance)
    plan = build_trajectory(grasp, adjusted, heights, max_step, start_at_grasp=start_at_grasp)
    _LOGGER.info("Planned %d poses through %d waypoints", len(plan.poses), len(adjusted))
    return plan


def _read_json(path: Path, what: str) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ExecutionError(f"cannot read {what} {path}: {exc}") from exc


def load_intrinsics(path: Path) -> CameraIntrinsics:
    raw = _read_json(path, "intrinsics")
    try:
        return CameraIntrinsics(raw["fx"], raw["fy"], raw["cx"], raw["cy"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ExecutionError(f"invalid intrinsics in {path}: {exc}") from exc


def load_grasps(path: Path) -> list[SE3Pose]:
    raw = _read_json(path, "grasp candidates")
    if not isinstance(raw, list):
        raise ExecutionError(f"{path} must hold a list of grasp candidates")
    grasps = []
    for index, item in enumerate(raw):
        try:
            grasps.append(SE3Pose.from_dict(item))
        except (KeyError, TypeError, ValueError) as exc:
            raise ExecutionError(f"invalid grasp candidate {index} in {path}: {exc}") from exc
    return grasps


def load_waypoints(path: Path) -> tuple[NDArray[np.float64], tuple[int, int], tuple[HeightCategory, ...] | None]:
    """Normalised waypoints, their image resolution and optional per-waypoint height categories."""
    raw = _read_json(path, "waypoints")
    try:
        points = np.asarray(raw["waypoints"], dtype=np.float64)
        width, height = (int(v) for v in raw["resolution"])
        heights = None
        if raw.get("heights") is not None:
            heights = tuple(HeightCategory(h) for h in raw["heights"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ExecutionError(f"invalid waypoints file {path}: {exc}") from exc
    if points.ndim != 2 or points.shape[1] != 2 or len(points) == 0:
        raise ExecutionError(f"waypoints in {path} must be a non-empty list of [u, v] pairs")
    if np.any((points < 0) | (points > 1)):
        raise ExecutionError(f"waypoints in {path} must be normalised to [0, 1]")
    if heights is not None and len(heights) != len(points):
        raise ExecutionError(f"{path} gives {len(heights)} heights for {len(points)} waypoints")
    return points, (width, height), heights


def load_extrinsics(path: Path) -> NDArray[np.float64]:
    raw = _read_json(path, "extrinsics")
    matrix = np.asarray(raw.get("camera_to_world") if isinstance(raw, dict) else raw, dtype=np.float64)
    if matrix.shape != (4, 4):
        raise ExecutionError(f"extrinsics in {path} must be a 4x4 matrix, got shape {matrix.shape}")
    return matrix
