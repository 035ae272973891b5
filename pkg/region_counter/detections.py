"""Detected pedestrians and annotated heads per frame.

All coordinates held by these types use bottom-origin rows: row 0 is the
bottom edge of the frame and rows grow upward. Files use the usual
top-origin raster convention and are converted on load and on write.
"""

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Literal, NamedTuple, Sequence

from . import MIN_CONFIDENCE
from .errors import DetectionParseError
from .utils import frame_sort_key, round_half_up


logger = logging.getLogger("regioncounter.detections")

HeightAnchor = Literal["center", "top", "bottom"]
HEIGHT_ANCHORS = ("center", "top", "bottom")


class Point(NamedTuple):
    x: int
    y: int


PedestrianCenter = Point


@dataclass(frozen=True)
class FrameGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Frame must be at least 1x1, got {self.width}x{self.height}")

    def contains(self, x: float, y: float) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def flip_row(self, y: int) -> int:
        "Convert a row between top-origin and bottom-origin."
        return self.height - 1 - y


@dataclass(frozen=True)
class BoundingBox:
    top_left: Point
    bottom_right: Point
    confidence: float | None = None

    def __post_init__(self):
        if not self.top_left.x < self.bottom_right.x:
            raise ValueError(f"Box needs tf.x < br.x: {self}")
        if self.top_left.y < self.bottom_right.y:
            raise ValueError(f"Box needs tf.y >= br.y in bottom-origin rows: {self}")
        if self.confidence is not None and not 0 <= self.confidence <= 1:
            raise ValueError(f"Confidence out of [0, 1]: {self.confidence}")

    @classmethod
    def from_corners(cls, a: Point, b: Point, confidence: float | None = None) -> "BoundingBox":
        "Box spanned by two opposite bottom-origin corners given in either order."
        (x0, x1), (y0, y1) = sorted((a.x, b.x)), sorted((a.y, b.y))
        return cls(Point(x0, y1), Point(x1, y0), confidence)

    @property
    def height(self) -> int:
        return self.top_left.y - self.bottom_right.y

    @property
    def width(self) -> int:
        return self.bottom_right.x - self.top_left.x


@dataclass(frozen=True)
class FrameDetections:
    frame_id: str
    geometry: FrameGeometry
    boxes: tuple[BoundingBox, ...] = ()
    head_points: tuple[Point, ...] | None = None
    gt_count: int | None = None

    def __post_init__(self):
        if self.gt_count is not None:
            if self.gt_count < 0:
                raise ValueError(f"Negative ground truth count for {self.frame_id}")
            if self.head_points is not None and self.gt_count != len(self.head_points):
                raise ValueError(
                    f"gt_count {self.gt_count} != {len(self.head_points)} heads "
                    f"in frame {self.frame_id}"
                )

    def accepted(self, threshold: float) -> tuple[BoundingBox, ...]:
        return tuple(
            box
            for box in self.boxes
            if box.confidence is None or box.confidence >= threshold
        )


class LoadedDetections(NamedTuple):
    frames: list[FrameDetections]
    dropped: int
    rejected: int


def sort_boxes(boxes: Iterable[BoundingBox]) -> tuple[BoundingBox, ...]:
    "Left edge ascending, then top row descending, then input order."
    return tuple(sorted(boxes, key=lambda b: (b.top_left.x, -b.top_left.y)))


def center_of(box: BoundingBox) -> PedestrianCenter:
    return Point(
        round_half_up((box.top_left.x + box.bottom_right.x) / 2),
        round_half_up((box.top_left.y + box.bottom_right.y) / 2),
    )


def head_band_bottom(box: BoundingBox, alpha: float) -> float:
    "Bottom row of the head band, the top `alpha` share of the box."
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return (1 - alpha) * box.top_left.y + alpha * box.bottom_right.y


def height_anchor_row(box: BoundingBox, anchor: HeightAnchor) -> int:
    match anchor:
        case "center":
            return center_of(box).y
        case "top":
            return box.top_left.y
        case "bottom":
            return box.bottom_right.y
        case _:
            raise ValueError(f"Unknown height anchor: {anchor}")


def _records(path: Path, n_fields: tuple[int, ...]):
    "Yield (line_no, fields) for data lines, skipping blanks, comments and a header."
    with open(path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            row = [value.strip() for value in row]
            if not row or not any(row) or row[0].startswith("#"):
                continue
            if row[0] == "frame_id":
                continue
            if len(row) not in n_fields:
                raise DetectionParseError(
                    path, line_no, f"expected {' or '.join(map(str, n_fields))} fields, got {len(row)}"
                )
            yield line_no, row


def _number(path: Path, line_no: int, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DetectionParseError(path, line_no, f"not a number: {text!r}") from None


def _parse_box(
    path: Path, line_no: int, fields: list[str], geometry: FrameGeometry
) -> BoundingBox | None:
    "Returns None when the box is outside the frame or degenerate after clamping."
    x_min, y_min, x_max, y_max = (
        round_half_up(_number(path, line_no, v)) for v in fields[1:5]
    )
    confidence = _number(path, line_no, fields[5]) if len(fields) == 6 and fields[5] else None
    if confidence is not None and not 0 <= confidence <= 1:
        raise DetectionParseError(path, line_no, f"confidence {confidence} not in [0, 1]")
    x_min, x_max = sorted((x_min, x_max))
    y_min, y_max = sorted((y_min, y_max))

    w, h = geometry.width, geometry.height
    if x_max < 0 or y_max < 0 or x_min > w - 1 or y_min > h - 1:
        return None
    x_min, x_max = max(x_min, 0), min(x_max, w - 1)
    y_min, y_max = max(y_min, 0), min(y_max, h - 1)
    if x_min >= x_max or y_min >= y_max:
        return None
    return BoundingBox.from_corners(
        Point(x_min, geometry.flip_row(y_min)),
        Point(x_max, geometry.flip_row(y_max)),
        confidence,
    )


def load_detections(
    path: Path,
    geometry: FrameGeometry,
    min_confidence: float = MIN_CONFIDENCE,
) -> LoadedDetections:
    """Read `frame_id, x_min, y_min, x_max, y_max[, confidence]` records.
    Boxes are clamped to the frame; boxes outside it or degenerate after the
    clamp are dropped, boxes under `min_confidence` are rejected.
    """
    path = Path(path)
    boxes = dict[str, list[BoundingBox]]()
    dropped = rejected = 0
    for line_no, fields in _records(path, (5, 6)):
        frame_id = fields[0]
        box = _parse_box(path, line_no, fields, geometry)
        frame_boxes = boxes.setdefault(frame_id, [])
        if box is None:
            dropped += 1
            continue
        if box.confidence is not None and box.confidence < min_confidence:
            rejected += 1
            continue
        frame_boxes.append(box)

    if dropped:
        logger.warning(f"{path}: dropped {dropped} boxes outside the frame or degenerate")
    if rejected:
        logger.info(f"{path}: rejected {rejected} boxes under confidence {min_confidence}")

    frames = [
        FrameDetections(frame_id, geometry, sort_boxes(boxes[frame_id]))
        for frame_id in sorted(boxes, key=frame_sort_key)
    ]
    return LoadedDetections(frames, dropped, rejected)


def load_heads(path: Path, geometry: FrameGeometry) -> dict[str, list[Point]]:
    "Read `frame_id, x, y` head annotations (top-origin) into bottom-origin points."
    path = Path(path)
    heads = dict[str, list[Point]]()
    for line_no, fields in _records(path, (3,)):
        x = round_half_up(_number(path, line_no, fields[1]))
        y = round_half_up(_number(path, line_no, fields[2]))
        heads.setdefault(fields[0], []).append(Point(x, geometry.flip_row(y)))
    return heads


def load_scene(
    detections_path: Path,
    heads_path: Path | None,
    geometry: FrameGeometry,
    min_confidence: float = MIN_CONFIDENCE,
) -> LoadedDetections:
    "Detections joined with head annotations; frames missing from either file are kept."
    loaded = load_detections(detections_path, geometry, min_confidence)
    if heads_path is None:
        return loaded
    heads = load_heads(heads_path, geometry)
    by_id = {frame.frame_id: frame for frame in loaded.frames}
    frame_ids = sorted(set(by_id) | set(heads), key=frame_sort_key)
    frames = []
    for frame_id in frame_ids:
        points = tuple(heads.get(frame_id, ()))
        base = by_id.get(frame_id) or FrameDetections(frame_id, geometry)
        frames.append(replace(base, head_points=points, gt_count=len(points)))
    return LoadedDetections(frames, loaded.dropped, loaded.rejected)


def write_detections(path: Path, frames: Sequence[FrameDetections]):
    "Inverse of `load_detections`, top-origin rows."
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("frame_id", "x_min", "y_min", "x_max", "y_max", "confidence"))
        for frame in frames:
            geo = frame.geometry
            for box in frame.boxes:
                writer.writerow(
                    (
                        frame.frame_id,
                        box.top_left.x,
                        geo.flip_row(box.top_left.y),
                        box.bottom_right.x,
                        geo.flip_row(box.bottom_right.y),
                        "" if box.confidence is None else f"{box.confidence:g}",
                    )
                )


def write_heads(path: Path, frames: Sequence[FrameDetections]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("frame_id", "x", "y"))
        for frame in frames:
            for point in frame.head_points or ():
                writer.writerow((frame.frame_id, point.x, frame.geometry.flip_row(point.y)))
