"""Dynamic division of a frame into a nearby and a distant region.

Rows are bottom-origin. A mask column `c` is nearby below its boundary row
b(c) and distant from b(c) upward, so the boundary row is distant. A box
occupies columns tf.x..br.x and rows br.y..tf.y, both inclusive, so keeping
a box nearby over its columns means a boundary of at least tf.y + 1.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, NamedTuple, Sequence

import numpy as np
import numpy.typing as npt

from . import ALPHA, DIVISION_MODE, HEIGHT_ANCHOR
from .detections import (
    BoundingBox,
    FrameDetections,
    FrameGeometry,
    HeightAnchor,
    PedestrianCenter,
    head_band_bottom,
    height_anchor_row,
)
from .errors import EmptyDistributionError
from .raster import write_gray
from .utils import round_half_up


logger = logging.getLogger("regioncounter.division")

DivisionMode = Literal["strict", "envelope"]
DIVISION_MODES = ("strict", "envelope")
Region = Literal["nearby", "distant"]


@dataclass(frozen=True)
class HeightHistogram:
    counts: npt.NDArray[np.int64]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def probabilities(self) -> npt.NDArray[np.float64]:
        return self.counts / self.total


class ExpectationLine(NamedTuple):
    H: float
    H_row: int


@dataclass(frozen=True, eq=False)
class DivisionMask:
    geometry: FrameGeometry
    boundary: npt.NDArray[np.int64]

    def __post_init__(self):
        if self.boundary.shape != (self.geometry.width,):
            raise ValueError(
                f"Boundary has {self.boundary.shape} columns, frame is {self.geometry.width} wide"
            )
        if (self.boundary < 0).any() or (self.boundary > self.geometry.height).any():
            raise ValueError("Boundary rows must lie in [0, height]")

    @property
    def bits(self) -> npt.NDArray[np.bool_]:
        "bits[row, col] is True in the distant region."
        rows = np.arange(self.geometry.height)[:, None]
        return rows >= self.boundary[None, :]

    @property
    def distant_pixels(self) -> int:
        return int((self.geometry.height - self.boundary).sum())

    def __eq__(self, other: object) -> bool:
        if isinstance(other, DivisionMask):
            return self.geometry == other.geometry and np.array_equal(
                self.boundary, other.boundary
            )
        return NotImplemented


class FrameDivision(NamedTuple):
    frame_id: str
    straddlers: tuple[BoundingBox, ...]
    mask: DivisionMask


def height_histogram(
    frames: Iterable[FrameDetections], anchor: HeightAnchor = HEIGHT_ANCHOR
) -> HeightHistogram:
    "Detections per bottom-origin row, over every frame of the scene."
    counts = None
    for frame in frames:
        if counts is None:
            counts = np.zeros(frame.geometry.height, dtype=np.int64)
        for box in frame.boxes:
            counts[height_anchor_row(box, anchor)] += 1
    if counts is None or counts.sum() == 0:
        raise EmptyDistributionError("empty distribution: no detections to place the line")
    return HeightHistogram(counts)


def expectation_height(hist: HeightHistogram) -> ExpectationLine:
    if hist.total <= 0:
        raise EmptyDistributionError("empty distribution: expectation height undefined")
    rows = np.arange(len(hist.counts), dtype=np.float64)
    H = float((hist.probabilities() * rows).sum())
    return ExpectationLine(H, round_half_up(H))


def select_straddlers(
    frame: FrameDetections, line: ExpectationLine, alpha: float = ALPHA
) -> tuple[BoundingBox, ...]:
    "Boxes whose head band crosses the line, in the frame's box order."
    selected = tuple(
        box
        for box in frame.boxes
        if head_band_bottom(box, alpha) < line.H and box.top_left.y >= line.H
    )
    logger.debug(
        f"Frame {frame.frame_id}: {len(selected)} of {len(frame.boxes)} boxes straddle H={line.H:.2f}"
    )
    return selected


def straight_boundary(geometry: FrameGeometry, line: ExpectationLine) -> npt.NDArray[np.int64]:
    return np.full(geometry.width, line.H_row, dtype=np.int64)


def strict_boundary(
    geometry: FrameGeometry, straddlers: Sequence[BoundingBox], line: ExpectationLine
) -> npt.NDArray[np.int64]:
    """The literal mask generation walk over boxes sorted by left edge.
    Each fill sets ones from a start row upward over a column range, so a
    column's boundary is the lowest start row among the fills covering it.
    """
    if not straddlers:
        return straight_boundary(geometry, line)

    boundary = np.full(geometry.width, geometry.height, dtype=np.int64)

    def fill(start_row: int, col0: int, col1: int):
        if col1 > col0:
            span = boundary[col0:col1]
            np.minimum(span, start_row, out=span)

    fill(line.H_row, 0, straddlers[0].top_left.x)
    for prev, box in zip(straddlers, straddlers[1:]):
        prev_top = prev.top_left.y + 1
        if box.top_left.x <= prev.bottom_right.x:
            # overlap: the previous box's top runs up to the next left edge
            fill(prev_top, prev.top_left.x, box.top_left.x)
        else:
            fill(prev_top, prev.top_left.x, prev.bottom_right.x + 1)
            fill(line.H_row, prev.bottom_right.x + 1, box.top_left.x)
    last = straddlers[-1]
    fill(last.top_left.y + 1, last.top_left.x, last.bottom_right.x + 1)
    fill(line.H_row, last.bottom_right.x + 1, geometry.width)
    return boundary


def envelope_boundary(
    geometry: FrameGeometry, straddlers: Iterable[BoundingBox], line: ExpectationLine
) -> npt.NDArray[np.int64]:
    "Per-column max of the line and every covering straddler's top + 1."
    boundary = straight_boundary(geometry, line)
    for box in straddlers:
        span = boundary[box.top_left.x : box.bottom_right.x + 1]
        np.maximum(span, box.top_left.y + 1, out=span)
    return boundary


def generate_mask_strict(
    geometry: FrameGeometry, straddlers: Sequence[BoundingBox], line: ExpectationLine
) -> DivisionMask:
    return DivisionMask(geometry, strict_boundary(geometry, straddlers, line))


def generate_mask_envelope(
    geometry: FrameGeometry, straddlers: Sequence[BoundingBox], line: ExpectationLine
) -> DivisionMask:
    return DivisionMask(geometry, envelope_boundary(geometry, straddlers, line))


def generate_mask(
    geometry: FrameGeometry,
    straddlers: Sequence[BoundingBox],
    line: ExpectationLine,
    mode: DivisionMode = DIVISION_MODE,
) -> DivisionMask:
    match mode:
        case "strict":
            return generate_mask_strict(geometry, straddlers, line)
        case "envelope":
            return generate_mask_envelope(geometry, straddlers, line)
        case _:
            raise ValueError(f"Unknown division mode: {mode}")


def division_for_frame(
    frame: FrameDetections,
    line: ExpectationLine,
    alpha: float = ALPHA,
    mode: DivisionMode = DIVISION_MODE,
) -> FrameDivision:
    straddlers = select_straddlers(frame, line, alpha)
    return FrameDivision(
        frame.frame_id, straddlers, generate_mask(frame.geometry, straddlers, line, mode)
    )


def region_of(mask: DivisionMask, point: PedestrianCenter) -> Region:
    if not mask.geometry.contains(point.x, point.y):
        raise ValueError(f"Point {tuple(point)} is outside the {mask.geometry} frame")
    return "distant" if point.y >= mask.boundary[point.x] else "nearby"


def flip_mask(mask: DivisionMask) -> DivisionMask:
    """Mirror a mask left to right. Strict masks depend on the walk order, so
    a flipped frame keeps its mirrored mask rather than a regenerated one.
    """
    return DivisionMask(mask.geometry, mask.boundary[::-1].copy())


def quarter_mask(mask: DivisionMask) -> npt.NDArray[np.bool_]:
    "Distant cells at network resolution: OR over 4x4 blocks, zero padded."
    bits = mask.bits
    h, w = bits.shape
    padded = np.zeros((-(-h // 4) * 4, -(-w // 4) * 4), dtype=bool)
    padded[:h, :w] = bits
    return padded.reshape(padded.shape[0] // 4, 4, padded.shape[1] // 4, 4).any(axis=(1, 3))


def distant_bounding_rect(mask: DivisionMask) -> tuple[int, int, int, int] | None:
    "(row0, row1, col0, col1), half-open, of the distant pixels; None if there are none."
    cols = np.flatnonzero(mask.boundary < mask.geometry.height)
    if cols.size == 0:
        return None
    row0 = int(mask.boundary[cols].min())
    return row0, mask.geometry.height, int(cols[0]), int(cols[-1]) + 1


def crop_to_distant(
    image: npt.NDArray[np.float64], mask: DivisionMask
) -> npt.NDArray[np.float64]:
    """Zero everything outside the distant region of a (C, H, W) or (H, W)
    raster, keeping the frame size: the distant region's bounding rectangle
    with zeros in its nearby corners.
    """
    return np.where(mask.bits, image, 0.0)


class ModeComparison(NamedTuple):
    differing_columns: list[int]
    pixel_difference: int
    strict_cuts: list[BoundingBox]


def cuts_box(mask: DivisionMask, box: BoundingBox) -> bool:
    "True if any pixel of the box lies in the distant region."
    span = mask.boundary[box.top_left.x : box.bottom_right.x + 1]
    return bool((span <= box.top_left.y).any())


def compare_modes(
    geometry: FrameGeometry, straddlers: Sequence[BoundingBox], line: ExpectationLine
) -> ModeComparison:
    strict = strict_boundary(geometry, straddlers, line)
    envelope = envelope_boundary(geometry, straddlers, line)
    differing = np.flatnonzero(strict != envelope)
    strict_mask = DivisionMask(geometry, strict)
    return ModeComparison(
        [int(c) for c in differing],
        int(np.abs(strict - envelope).sum()),
        [box for box in straddlers if cuts_box(strict_mask, box)],
    )


def write_mask(
    mask: DivisionMask,
    path: Path,
    line: ExpectationLine,
    alpha: float,
    mode: DivisionMode,
):
    """Graymap at `path` (0 nearby, 255 distant) and a `.txt` sidecar with
    H, alpha, mode and the per-column boundary rows.
    """
    path = Path(path).with_suffix(".pgm")
    write_gray(path, mask.bits.astype(np.uint8) * 255)
    sidecar = [
        f"H {line.H!r}",
        f"H_row {line.H_row}",
        f"alpha {alpha!r}",
        f"mode {mode}",
        "boundary " + " ".join(str(int(b)) for b in mask.boundary),
    ]
    path.with_suffix(".txt").write_text("\n".join(sidecar) + "\n")
