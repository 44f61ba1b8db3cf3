"""
Affordance records, dataset manifests and the synthetic scene generator.

A record pairs an image (and optionally the previous frame) plus an instruction with a chunk of
``T`` normalised waypoints: index 0 is the contact point, the rest trace the motion that follows.
Corpora live on disk as one ``manifest.json`` with the frames stored next to it as binary
portable pixmaps.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from collections.abc import Iterable, Iterator, Sequence
from pathlib import Path
from typing import Any

import anyio
import attrs
import numpy as np
from numpy.typing import NDArray
from PIL import Image, ImageDraw
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt

from .encoders import Vocabulary
from .exceptions import AffordanceError, DatasetError, GenerationError, ManifestError

_LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
IMAGE_DIR = "images"
MAX_PLACEMENT_ATTEMPTS = 100
SHAPE_GAP_PX = 2

COLOR_RGB: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
}
SHAPES = ("circle", "square", "triangle")
DIRECTIONS: dict[str, tuple[float, float]] = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "up": (0.0, -1.0),
    "down": (0.0, 1.0),
}
TURNS = ("clockwise", "counterclockwise")

Image8 = NDArray[np.uint8]


class PlacementRejected(AffordanceError):
    """A sampled scene left the canvas or overlapped itself; the generator draws again."""


class Source(enum.StrEnum):
    ROBOTIC = "robotic"
    HUMAN = "human"
    CUSTOM = "custom"
    SYNTHETIC = "synthetic"


class Split(enum.StrEnum):
    TRAIN = "train"
    TEST = "test"
    UNASSIGNED = "unassigned"


class TaskKind(enum.StrEnum):
    TOUCH = "touch"
    PUSH_LINE = "push-line"
    ARC = "arc"


def _unit_interval(_instance: Any, attribute: attrs.Attribute[float], value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{attribute.name}={value} is outside [0, 1]")


@attrs.frozen
class NormalizedPoint2D:
    u: float = attrs.field(converter=float, validator=_unit_interval)
    v: float = attrs.field(converter=float, validator=_unit_interval)


@attrs.frozen
class WaypointChunk:
    points: tuple[NormalizedPoint2D, ...] = attrs.field(converter=tuple)

    @points.validator
    def _check_points(self, _attribute: attrs.Attribute[tuple[NormalizedPoint2D, ...]], value: tuple[NormalizedPoint2D, ...]) -> None:
        if not value:
            raise ValueError("a waypoint chunk needs at least one point")

    @property
    def contact(self) -> NormalizedPoint2D:
        return self.points[0]

    def __len__(self) -> int:
        return len(self.points)

    def to_array(self) -> NDArray[np.float64]:
        return np.array([[p.u, p.v] for p in self.points], dtype=np.float64)

    def to_list(self) -> list[list[float]]:
        return [[p.u, p.v] for p in self.points]

    @classmethod
    def from_array(cls, values: Any) -> WaypointChunk:
        array = np.asarray(values, dtype=np.float64)
        if array.ndim != 2 or array.shape[1] != 2:
            raise ValueError(f"waypoints must be (T, 2), got {array.shape}")
        return cls(NormalizedPoint2D(float(u), float(v)) for u, v in array)


_array_eq = attrs.cmp_using(eq=np.array_equal)


def _resolution(value: Any) -> tuple[int, int]:
    width, height = (int(v) for v in value)
    return width, height


@attrs.frozen
class AffordanceSample:
    image_current: Image8 = attrs.field(eq=_array_eq)
    image_previous: Image8 | None = attrs.field(eq=_array_eq)
    instruction: tuple[int, ...] = attrs.field(converter=tuple)
    waypoints: WaypointChunk
    supervise_mask: tuple[bool, ...] = attrs.field(converter=lambda v: tuple(bool(x) for x in v))
    source: Source = attrs.field(converter=Source)
    native_resolution: tuple[int, int] = attrs.field(converter=_resolution)
    split: Split = attrs.field(default=Split.UNASSIGNED, converter=Split)

    def __attrs_post_init__(self) -> None:
        if self.image_current.ndim != 3 or self.image_current.shape[2] != 3:
            raise ValueError(f"image_current must be (H, W, 3), got {self.image_current.shape}")
        if self.image_previous is not None and self.image_previous.shape != self.image_current.shape:
            raise ValueError("image_previous and image_current differ in resolution")
        if not self.instruction:
            raise ValueError("instruction is empty")
        if len(self.supervise_mask) != len(self.waypoints):
            raise ValueError("supervise_mask length differs from the waypoint count")
        if not any(self.supervise_mask):
            raise ValueError("supervise_mask selects no waypoint")

    @property
    def resolution(self) -> tuple[int, int]:
        height, width = self.image_current.shape[:2]
        return width, height

    @property
    def chunk_size(self) -> int:
        return len(self.waypoints)


@attrs.frozen
class DatasetManifest:
    resolution: tuple[int, int] = attrs.field(converter=_resolution)
    records: tuple[AffordanceSample, ...] = attrs.field(converter=tuple)

    def __attrs_post_init__(self) -> None:
        sizes = {record.chunk_size for record in self.records}
        if len(sizes) > 1:
            raise ValueError(f"records mix chunk sizes {sorted(sizes)}")
        for record in self.records:
            if record.resolution != self.resolution:
                raise ValueError(f"record resolution {record.resolution} != manifest {self.resolution}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[AffordanceSample]:
        return iter(self.records)

    def subset(self, split: Split) -> DatasetManifest:
        return attrs.evolve(self, records=[r for r in self.records if r.split is split])

    def train(self) -> DatasetManifest:
        return self.subset(Split.TRAIN)

    def test(self) -> DatasetManifest:
        return self.subset(Split.TEST)

    @property
    def has_split(self) -> bool:
        return any(r.split is Split.TRAIN for r in self.records) and any(
            r.split is Split.TEST for r in self.records
        )

    def digest(self) -> str:
        """SHA-256 over every record's metadata and pixel bytes, in record order."""
        h = hashlib.sha256()
        h.update(json.dumps(list(self.resolution)).encode())
        for record in self.records:
            h.update(json.dumps(_record_metadata(record), sort_keys=True).encode())
            h.update(record.image_current.tobytes())
            if record.image_previous is not None:
                h.update(record.image_previous.tobytes())
        return h.hexdigest()


@attrs.frozen
class SyntheticTaskSpec:
    task: TaskKind = attrs.field(default=TaskKind.TOUCH, converter=TaskKind)
    canvas: tuple[int, int] = attrs.field(default=(64, 64), converter=_resolution)
    shapes: tuple[str, ...] = attrs.field(default=SHAPES, converter=tuple)
    colors: tuple[str, ...] = attrs.field(default=tuple(COLOR_RGB), converter=tuple)
    chunk_size: int = 5
    seed: int = 0
    displacement: float = 0.3
    arc_radius: float = 0.2
    arc_sweep_degrees: float = 90.0
    min_size: int = 5
    max_size: int = 8
    max_shapes: int = 4

    @shapes.validator
    def _check_shapes(self, _attribute: attrs.Attribute[tuple[str, ...]], value: tuple[str, ...]) -> None:
        if not value or any(s not in SHAPES for s in value):
            raise ValueError(f"shapes must be a nonempty subset of {SHAPES}")

    @colors.validator
    def _check_colors(self, _attribute: attrs.Attribute[tuple[str, ...]], value: tuple[str, ...]) -> None:
        if not value or any(c not in COLOR_RGB for c in value):
            raise ValueError(f"colors must be a nonempty subset of {tuple(COLOR_RGB)}")

    def __attrs_post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.task is not TaskKind.TOUCH and self.chunk_size < 2:
            raise ValueError("trajectory tasks need chunk_size >= 2")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError("shape sizes must satisfy 1 <= min_size <= max_size")
        if not 1 <= self.max_shapes <= 4:
            raise ValueError("max_shapes must lie in [1, 4]")


@attrs.frozen
class PlacedShape:
    """One shape on the canvas: ``center`` in pixels, ``size`` is the half-extent in pixels."""

    shape: str
    color: str
    center: tuple[float, float] = attrs.field(converter=lambda v: (float(v[0]), float(v[1])))
    size: int = 6

    def moved_to(self, center: tuple[float, float]) -> PlacedShape:
        return attrs.evolve(self, center=center)


def _draw(draw: ImageDraw.ImageDraw, placed: PlacedShape) -> None:
    cx, cy = placed.center
    s = placed.size
    fill = COLOR_RGB[placed.color]
    if placed.shape == "circle":
        draw.ellipse([cx - s, cy - s, cx + s, cy + s], fill=fill)
    elif placed.shape == "square":
        draw.rectangle([cx - s, cy - s, cx + s, cy + s], fill=fill)
    else:
        # equilateral, centroid at the center
        half_base = s * math.sqrt(3.0) / 2.0
        draw.polygon([(cx, cy - s), (cx - half_base, cy + s / 2.0), (cx + half_base, cy + s / 2.0)], fill=fill)


def render_scene(canvas: tuple[int, int], shapes: Sequence[PlacedShape]) -> Image8:
    """Rasterise shapes in order onto a black canvas; later shapes are drawn on top."""
    image = Image.new("RGB", canvas, (0, 0, 0))
    draw = ImageDraw.Draw(image)
    for placed in shapes:
        _draw(draw, placed)
    return np.asarray(image, dtype=np.uint8).copy()


OVERLAY_PATH_RGB = (255, 255, 255)
OVERLAY_CONTACT_RGB = (255, 0, 255)


def draw_overlay(image: Image8, waypoints: Any) -> Image8:
    """Copy of ``image`` with the waypoint path drawn as a polyline and the contact point ringed."""
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8))
    draw = ImageDraw.Draw(canvas)
    points = np.asarray(waypoints, dtype=np.float64).reshape(-1, 2) * np.array(canvas.size)
    path = [(float(u), float(v)) for u, v in points]
    if len(path) > 1:
        draw.line(path, fill=OVERLAY_PATH_RGB, width=1)
    u, v = path[0]
    draw.ellipse([u - 2, v - 2, u + 2, v + 2], outline=OVERLAY_CONTACT_RGB)
    return np.asarray(canvas, dtype=np.uint8).copy()


def _rotate(vector: NDArray[np.float64], degrees: float) -> NDArray[np.float64]:
    # image axes: positive angles turn clockwise on screen because v grows downwards
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    return np.array([c * vector[0] - s * vector[1], s * vector[0] + c * vector[1]])


def trajectory(
    spec: SyntheticTaskSpec,
    contact: tuple[float, float],
    direction: str = "right",
    turn: str = "clockwise",
) -> NDArray[np.float64]:
    """The ``(T, 2)`` normalised waypoint chunk for a target whose centroid is ``contact``."""
    start = np.asarray(contact, dtype=np.float64)
    steps = spec.chunk_size
    if spec.task is TaskKind.TOUCH:
        return np.repeat(start[None, :], steps, axis=0)
    heading = np.asarray(DIRECTIONS[direction])
    fractions = np.arange(steps, dtype=np.float64) / (steps - 1)
    if spec.task is TaskKind.PUSH_LINE:
        return start[None, :] + fractions[:, None] * (spec.displacement * heading)[None, :]
    sign = 1.0 if turn == "clockwise" else -1.0
    center = start + spec.arc_radius * _rotate(heading, sign * 90.0)
    radial = start - center
    return np.stack([center + _rotate(radial, sign * spec.arc_sweep_degrees * f) for f in fractions])


def instruction_words(task: TaskKind, target: PlacedShape, direction: str, turn: str) -> list[str]:
    if task is TaskKind.TOUCH:
        return ["touch", "the", target.color, target.shape]
    if task is TaskKind.PUSH_LINE:
        return ["push", "the", target.color, target.shape, direction]
    return ["slide", "the", target.color, target.shape, direction, "along", "arc", turn]


def compose_sample(
    spec: SyntheticTaskSpec,
    shapes: Sequence[PlacedShape],
    direction: str = "right",
    turn: str = "clockwise",
    vocabulary: Vocabulary | None = None,
) -> AffordanceSample:
    """
    Build one record from an explicit scene; ``shapes[0]`` is the target.

    Raises ``PlacementRejected`` when any waypoint would carry the target off the canvas.
    """
    if not shapes:
        raise GenerationError("a scene needs at least one shape")
    vocab = vocabulary or Vocabulary.default()
    width, height = spec.canvas
    target = shapes[0]
    contact = (target.center[0] / width, target.center[1] / height)
    points = trajectory(spec, contact, direction, turn)

    pixels = points * np.array([width, height], dtype=np.float64)
    margin = target.size
    if (
        (pixels[:, 0] < margin).any()
        or (pixels[:, 0] > width - 1 - margin).any()
        or (pixels[:, 1] < margin).any()
        or (pixels[:, 1] > height - 1 - margin).any()
    ):
        raise PlacementRejected("trajectory leaves the canvas")

    others = list(shapes[1:])
    if spec.task is TaskKind.TOUCH:
        current = render_scene(spec.canvas, [*others, target])
        previous = None
        mask = [True] + [False] * (spec.chunk_size - 1)
    else:
        previous = render_scene(spec.canvas, [*others, target])
        moved = target.moved_to((float(pixels[1, 0]), float(pixels[1, 1])))
        current = render_scene(spec.canvas, [*others, moved])
        mask = [True] * spec.chunk_size

    return AffordanceSample(
        image_current=current,
        image_previous=previous,
        instruction=vocab.encode(instruction_words(spec.task, target, direction, turn)),
        waypoints=WaypointChunk.from_array(np.clip(points, 0.0, 1.0)),
        supervise_mask=mask,
        source=Source.SYNTHETIC,
        native_resolution=spec.canvas,
    )


def _sample_scene(spec: SyntheticTaskSpec, rng: np.random.Generator) -> list[PlacedShape]:
    width, height = spec.canvas
    combos = [(shape, color) for shape in spec.shapes for color in spec.colors]
    count = min(int(rng.integers(1, spec.max_shapes + 1)), len(combos))
    picks = rng.choice(len(combos), size=count, replace=False)
    placed: list[PlacedShape] = []
    for pick in picks:
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        if width - 1 - 2 * size < 1 or height - 1 - 2 * size < 1:
            raise GenerationError(f"canvas {spec.canvas} is too small for shapes of size {size}")
        cx = int(rng.integers(size, width - size))
        cy = int(rng.integers(size, height - size))
        shape, color = combos[int(pick)]
        candidate = PlacedShape(shape, color, (cx, cy), size)
        for other in placed:
            gap = math.dist(candidate.center, other.center)
            if gap < candidate.size + other.size + SHAPE_GAP_PX:
                raise PlacementRejected("shapes overlap")
        placed.append(candidate)
    return placed


def _attempt(spec: SyntheticTaskSpec, rng: np.random.Generator, vocab: Vocabulary) -> AffordanceSample:
    shapes = _sample_scene(spec, rng)
    direction = str(rng.choice(list(DIRECTIONS)))
    turn = str(rng.choice(list(TURNS)))
    return compose_sample(spec, shapes, direction, turn, vocab)


def generate_record(spec: SyntheticTaskSpec, index: int, vocabulary: Vocabulary | None = None) -> AffordanceSample:
    """Record ``index`` of the corpus; a pure function of ``(spec, index)``."""
    vocab = vocabulary or Vocabulary.default()
    rng = np.random.default_rng([spec.seed, index])
    retrying = Retrying(
        stop=stop_after_attempt(MAX_PLACEMENT_ATTEMPTS),
        retry=retry_if_exception_type(PlacementRejected),
    )
    try:
        for attempt in retrying:
            with attempt:
                return _attempt(spec, rng, vocab)
    except RetryError as exc:
        raise GenerationError(
            f"record {index}: no valid placement after {MAX_PLACEMENT_ATTEMPTS} attempts"
        ) from exc
    raise GenerationError(f"record {index}: placement loop ended without a result")


def _generate_range(spec: SyntheticTaskSpec, indices: Iterable[int]) -> list[AffordanceSample]:
    vocab = Vocabulary.default()
    return [generate_record(spec, int(i), vocab) for i in indices]


def generate_synthetic(spec: SyntheticTaskSpec, count: int) -> DatasetManifest:
    if count < 1:
        raise GenerationError(f"count must be >= 1, got {count}")
    records = _generate_range(spec, range(count))
    _LOGGER.info("Generated %d %s records", count, spec.task.value)
    return DatasetManifest(resolution=spec.canvas, records=records)


async def generate_synthetic_parallel(
    spec: SyntheticTaskSpec, count: int, workers: int = 4
) -> DatasetManifest:
    """Same corpus as ``generate_synthetic``, built from index ranges on worker threads."""
    if count < 1:
        raise GenerationError(f"count must be >= 1, got {count}")
    ranges = [chunk for chunk in np.array_split(np.arange(count), max(1, workers)) if chunk.size]
    parts: list[list[AffordanceSample]] = [[] for _ in ranges]
    limiter = anyio.CapacityLimiter(max(1, workers))

    async def run(slot: int, indices: NDArray[np.int64]) -> None:
        parts[slot] = await anyio.to_thread.run_sync(_generate_range, spec, indices.tolist(), limiter=limiter)

    async with anyio.create_task_group() as tg:
        for slot, indices in enumerate(ranges):
            tg.start_soon(run, slot, indices)

    records = [record for part in parts for record in part]
    _LOGGER.info("Generated %d %s records on %d workers", count, spec.task.value, len(ranges))
    return DatasetManifest(resolution=spec.canvas, records=records)


def split(manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Tag a seeded random ``round(ratio·n)`` records as train (at least one each way), the rest as test."""
    if not 0.0 < ratio < 1.0:
        raise DatasetError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    n = len(manifest)
    if n < 2:
        raise DatasetError(f"splitting needs at least 2 records, got {n}")
    n_train = min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = set(order[:n_train].tolist())
    records = [
        attrs.evolve(record, split=Split.TRAIN if i in train else Split.TEST)
        for i, record in enumerate(manifest.records)
    ]
    return attrs.evolve(manifest, records=records)


def _record_metadata(record: AffordanceSample) -> dict[str, Any]:
    return {
        "instruction": list(record.instruction),
        "waypoints": record.waypoints.to_list(),
        "supervise_mask": list(record.supervise_mask),
        "source": record.source.value,
        "split": record.split.value,
        "native_resolution": list(record.native_resolution),
    }


def write_image(path: Path, pixels: Image8) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PPM")


def read_image(path: Path) -> Image8:
    """Any Pillow-readable image as ``(H, W, 3)`` uint8."""
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.uint8).copy()


def _read_image(path: Path, index: int, field: str) -> Image8:
    try:
        return read_image(path)
    except (OSError, ValueError) as exc:
        raise ManifestError(f"record {index}: cannot read {field} {path}: {exc}") from exc


def save_manifest(manifest: DatasetManifest, directory: Path) -> Path:
    """Write ``manifest.json`` plus one pixmap per frame under ``directory``."""
    images = directory / IMAGE_DIR
    images.mkdir(parents=True, exist_ok=True)
    records = []
    for index, record in enumerate(manifest.records):
        current = f"{IMAGE_DIR}/{index:06d}_current.ppm"
        write_image(directory / current, record.image_current)
        previous = None
        if record.image_previous is not None:
            previous = f"{IMAGE_DIR}/{index:06d}_previous.ppm"
            write_image(directory / previous, record.image_previous)
        records.append({"image_current": current, "image_previous": previous, **_record_metadata(record)})

    payload = {"version": MANIFEST_VERSION, "resolution": list(manifest.resolution), "records": records}
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    _LOGGER.info("Saved %d records to %s", len(manifest), path)
    return path


_REQUIRED_FIELDS = ("image_current", "instruction", "waypoints", "supervise_mask", "source")


def _parse_record(index: int, raw: Any, root: Path, resolution: tuple[int, int]) -> AffordanceSample:
    if not isinstance(raw, dict):
        raise ManifestError(f"record {index} is not an object")
    for name in _REQUIRED_FIELDS:
        if name not in raw or raw[name] is None:
            raise ManifestError(f"record {index} is missing field {name!r}")
    if not isinstance(raw["instruction"], list) or not raw["instruction"]:
        raise ManifestError(f"record {index} has an empty or malformed instruction")

    try:
        points = np.asarray(raw["waypoints"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"record {index}: malformed waypoints: {exc}") from exc
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 1:
        raise ManifestError(f"record {index}: waypoints must be a list of [u, v] pairs")
    if not np.all(np.isfinite(points)) or points.min() < 0.0 or points.max() > 1.0:
        raise ManifestError(f"waypoint out of range at record {index}")

    current = _read_image(root / raw["image_current"], index, "image_current")
    previous = None
    if raw.get("image_previous"):
        previous = _read_image(root / raw["image_previous"], index, "image_previous")
    try:
        return AffordanceSample(
            image_current=current,
            image_previous=previous,
            instruction=[int(i) for i in raw["instruction"]],
            waypoints=WaypointChunk.from_array(points),
            supervise_mask=raw["supervise_mask"],
            source=raw["source"],
            native_resolution=raw.get("native_resolution", resolution),
            split=raw.get("split", Split.UNASSIGNED),
        )
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"record {index}: {exc}") from exc


def load_manifest(path: Path) -> DatasetManifest:
    """Read and validate a manifest; ``path`` is the corpus directory or the manifest file."""
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    try:
        payload = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{manifest_path} is not a version {MANIFEST_VERSION} manifest")
    if "resolution" not in payload or "records" not in payload:
        raise ManifestError(f"{manifest_path} is missing resolution or records")

    resolution = _resolution(payload["resolution"])
    root = manifest_path.parent
    records = [_parse_record(i, raw, root, resolution) for i, raw in enumerate(payload["records"])]
    try:
        return DatasetManifest(resolution=resolution, records=records)
    except ValueError as exc:
        raise ManifestError(str(exc)) from exc


def frames(records: Sequence[AffordanceSample], *, previous: bool = True) -> tuple[Image8, Image8 | None]:
    """Stack current and previous frames; a record without a previous frame repeats its current one."""
    current = np.stack([record.image_current for record in records])
    if not previous:
        return current, None
    prior = np.stack(
        [r.image_previous if r.image_previous is not None else r.image_current for r in records]
    )
    return current, prior
