"""Synthetic scenes with a known perspective line and a perfect detector.

Pedestrians are boxes whose height follows M(row) = slope * row + intercept
at the box center row, with the head in the middle of the top alpha band.
Every pedestrian is detected with confidence 1. The scene is adjusted so the
detector (box centers in the nearby region) and the density map (heads in the
distant region) never both count the same pedestrian.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

from . import ALPHA, DIVISION_MODE, HEIGHT_ANCHOR, SEED
from .detections import (
    BoundingBox,
    FrameDetections,
    FrameGeometry,
    HeightAnchor,
    Point,
    center_of,
    sort_boxes,
    write_detections,
    write_heads,
)
from .division import (
    DivisionMode,
    division_for_frame,
    expectation_height,
    height_histogram,
    region_of,
)
from .errors import ConfigError, DataError
from .raster import write_gray
from .utils import write_json


logger = logging.getLogger("regioncounter.synth")

BOX_ASPECT = 0.4
MAX_RELOCATIONS = 20


@dataclass(frozen=True)
class SynthSettings:
    width: int = 64
    height: int = 64
    frames: int = 12
    min_people: int = 4
    max_people: int = 10
    slope: float = -0.25
    intercept: float = 24.0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigError(f"Synthetic frames must be at least 8x8, got {self.width}x{self.height}")
        if self.frames < 1 or not 0 <= self.min_people <= self.max_people:
            raise ConfigError(f"Bad synthetic crowd settings: {self}")
        heights = [self.slope * row + self.intercept for row in (0, self.height - 1)]
        if min(heights) < 4 or max(heights) > self.height - 1:
            raise ConfigError(
                f"Perspective line gives box heights {heights}, outside [4, {self.height - 1}]"
            )


@dataclass(frozen=True)
class Pedestrian:
    box: BoundingBox
    head: Point


@dataclass(frozen=True)
class SyntheticScene:
    geometry: FrameGeometry
    slope: float
    intercept: float
    frames: tuple[tuple[str, tuple[Pedestrian, ...]], ...]
    images: tuple[npt.NDArray[np.uint8], ...]

    def detections(self) -> list[FrameDetections]:
        return [_as_frame(frame_id, people, self.geometry) for frame_id, people in self.frames]


def _as_frame(frame_id: str, people, geometry: FrameGeometry) -> FrameDetections:
    heads = tuple(p.head for p in people)
    return FrameDetections(
        frame_id, geometry, sort_boxes(p.box for p in people), heads, len(heads)
    )


def _place(
    rng: np.random.Generator, s: SynthSettings, alpha: float, max_top: int | None = None
) -> Pedestrian | None:
    "A pedestrian fully inside the frame, with its top row at most `max_top`."
    top_limit = s.height - 1 if max_top is None else max_top
    for _ in range(100):
        y_c = rng.uniform(0, s.height - 1)
        h = s.slope * y_c + s.intercept
        w = BOX_ASPECT * h
        top, bottom = round(y_c + h / 2), round(y_c - h / 2)
        if bottom < 0 or top > top_limit or w < 2:
            continue
        x_c = rng.uniform(w / 2, s.width - 1 - w / 2)
        left, right = round(x_c - w / 2), round(x_c + w / 2)
        if left < 0 or right > s.width - 1 or left >= right:
            continue
        box = BoundingBox(Point(left, top), Point(right, bottom), 1.0)
        head = Point(center_of(box).x, round(top - alpha / 2 * (top - bottom)))
        return Pedestrian(box, head)
    return None


def _double_counted(
    frames: list[tuple[str, list[Pedestrian]]],
    geometry: FrameGeometry,
    alpha: float,
    anchor: HeightAnchor,
    mode: DivisionMode,
) -> tuple[set[tuple[int, int]], int]:
    "Pedestrians whose center is nearby while their head is distant, and the line row."
    line = expectation_height(
        height_histogram((_as_frame(fid, people, geometry) for fid, people in frames), anchor)
    )
    offenders = set[tuple[int, int]]()
    for fi, (fid, people) in enumerate(frames):
        mask = division_for_frame(_as_frame(fid, people, geometry), line, alpha, mode).mask
        for pi, p in enumerate(people):
            if region_of(mask, center_of(p.box)) == "nearby" and region_of(mask, p.head) == "distant":
                offenders.add((fi, pi))
    return offenders, line.H_row


def resolve_double_counts(
    frames: list[tuple[str, list[Pedestrian]]],
    geometry: FrameGeometry,
    settings: SynthSettings,
    rng: np.random.Generator,
    alpha: float = ALPHA,
    anchor: HeightAnchor = HEIGHT_ANCHOR,
    mode: DivisionMode = DIVISION_MODE,
    max_relocations: int = MAX_RELOCATIONS,
):
    """Place double-counted pedestrians again below the line, in place, and
    drop them after `max_relocations` rounds. Dropping moves the line, so the
    last round is always a check.
    """
    budget = max_relocations + sum(len(people) for _, people in frames)
    for attempt in range(budget + 1):
        offenders, h_row = _double_counted(frames, geometry, alpha, anchor, mode)
        if not offenders:
            return
        if attempt == budget:
            break
        for fi, pi in sorted(offenders, reverse=True):
            people = frames[fi][1]
            moved = None
            if attempt < max_relocations:
                moved = _place(rng, settings, alpha, max_top=h_row - 1)
            if moved:
                people[pi] = moved
            else:
                del people[pi]
        logger.debug(f"Relocated {len(offenders)} double-counted pedestrians (attempt {attempt})")
    raise DataError(f"{len(offenders)} synthetic pedestrians still counted twice after {budget} rounds")


def generate_scene(
    settings: SynthSettings,
    seed: int = SEED,
    alpha: float = ALPHA,
    anchor: HeightAnchor = HEIGHT_ANCHOR,
    mode: DivisionMode = DIVISION_MODE,
) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    geometry = FrameGeometry(settings.width, settings.height)
    frames = list[tuple[str, list[Pedestrian]]]()
    digits = max(4, len(str(settings.frames - 1)))
    for i in range(settings.frames):
        n = int(rng.integers(settings.min_people, settings.max_people + 1))
        people = [p for p in (_place(rng, settings, alpha) for _ in range(n)) if p]
        frames.append((str(i).zfill(digits), people))

    resolve_double_counts(frames, geometry, settings, rng, alpha, anchor, mode)
    images = tuple(render_frame(geometry, people, rng) for _, people in frames)
    total = sum(len(people) for _, people in frames)
    logger.info(f"Synthesized {len(frames)} frames with {total} pedestrians")
    return SyntheticScene(
        geometry,
        settings.slope,
        settings.intercept,
        tuple((fid, tuple(people)) for fid, people in frames),
        images,
    )


def render_frame(
    geometry: FrameGeometry, people, rng: np.random.Generator
) -> npt.NDArray[np.uint8]:
    "Grayscale bottom-origin frame: a dim body rectangle and one bright blob per head."
    img = np.full((geometry.height, geometry.width), 20.0)
    rows = np.arange(geometry.height)[:, None]
    cols = np.arange(geometry.width)[None, :]
    for p in people:
        b = p.box
        body = img[b.bottom_right.y : b.top_left.y + 1, b.top_left.x : b.bottom_right.x + 1]
        np.maximum(body, 70.0, out=body)
    for p in people:
        sigma = max(0.6, 0.08 * p.box.height)
        blob = np.exp(-((cols - p.head.x) ** 2 + (rows - p.head.y) ** 2) / (2 * sigma**2))
        img += 180.0 * blob
    img += rng.normal(0, 3.0, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_scene(scene: SyntheticScene, directory: Path, seed: int) -> dict[str, Path]:
    "Frames as graymaps plus detection and head files; returns their paths."
    directory = Path(directory)
    frames_dir = directory / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for (frame_id, _), image in zip(scene.frames, scene.images):
        write_gray(frames_dir / f"{frame_id}.pgm", image)

    detections = scene.detections()
    paths = {
        "frames_dir": frames_dir,
        "detections": directory / "detections.csv",
        "heads": directory / "heads.csv",
    }
    write_detections(paths["detections"], detections)
    write_heads(paths["heads"], detections)
    write_json(
        directory / "scene.json",
        {
            "width": scene.geometry.width,
            "height": scene.geometry.height,
            "slope": scene.slope,
            "intercept": scene.intercept,
            "seed": seed,
            "frames": {fid: len(people) for fid, people in scene.frames},
        },
    )
    return paths


def perspective_error(scene: SyntheticScene, slope: float, intercept: float) -> float:
    "Largest relative error of a fitted line against the generating one."
    return max(
        abs(slope - scene.slope) / abs(scene.slope) if scene.slope else abs(slope),
        abs(intercept - scene.intercept) / abs(scene.intercept) if scene.intercept else abs(intercept),
    )


__all__ = [
    "SynthSettings",
    "Pedestrian",
    "SyntheticScene",
    "generate_scene",
    "render_frame",
    "write_scene",
    "perspective_error",
]
