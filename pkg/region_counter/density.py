"""Ground-truth density maps for the distant region.

Head sizes come from a perspective line fitted on detected boxes, each
distant head is splatted as a truncated Gaussian whose mass is kept inside
the frame and inside the distant region.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Literal, NamedTuple

import numpy as np
import numpy.typing as npt

from . import DENSITY_NORMALIZATION, M_MIN, SIGMA_FACTOR
from .detections import BoundingBox, FrameDetections, FrameGeometry, Point, center_of, sort_boxes
from .division import DivisionMask
from .errors import DegenerateRegressionError, ShapeError
from .raster import read_float_raster, write_false_color, write_float_raster


logger = logging.getLogger("regioncounter.density")

Normalization = Literal["per_kernel", "frame"]
NORMALIZATIONS = ("per_kernel", "frame")


@dataclass(frozen=True)
class PerspectiveModel:
    "Expected pedestrian box height M(row) = slope * row + intercept, clamped."

    slope: float
    intercept: float
    m_min: float = M_MIN
    m_max: float = math.inf

    def __post_init__(self):
        if not self.m_min > 0:
            raise ValueError(f"m_min must be positive, got {self.m_min}")
        if self.m_max < self.m_min:
            raise ValueError(f"m_max {self.m_max} < m_min {self.m_min}")

    def size_at(self, row: float) -> float:
        return min(max(self.slope * row + self.intercept, self.m_min), self.m_max)


@dataclass(frozen=True, eq=False)
class DensityMap:
    frame_id: str
    geometry: FrameGeometry
    values: npt.NDArray[np.float64]
    scale: int = 1

    def __post_init__(self):
        if self.values.shape != (self.geometry.height, self.geometry.width):
            raise ShapeError(
                f"Density values {self.values.shape} don't match {self.geometry}"
            )

    def total(self) -> float:
        return float(self.values.sum())

    def masked(self, bits: npt.NDArray[np.bool_]) -> "DensityMap":
        return replace(self, values=np.where(bits, self.values, 0.0))


class HeadSplat(NamedTuple):
    center: Point
    sigma: float


def fit_perspective(
    boxes: Iterable[BoundingBox], geometry: FrameGeometry, m_min: float = M_MIN
) -> PerspectiveModel:
    "Least squares of box height against box center row."
    boxes = list(boxes)
    rows = np.array([center_of(box).y for box in boxes], dtype=np.float64)
    heights = np.array([box.height for box in boxes], dtype=np.float64)
    if np.unique(rows).size < 2:
        raise DegenerateRegressionError(
            f"degenerate regression: {len(boxes)} boxes on {np.unique(rows).size} distinct rows"
        )
    design = np.column_stack((rows, np.ones_like(rows)))
    (slope, intercept), *_ = np.linalg.lstsq(design, heights, rcond=None)

    model = PerspectiveModel(float(slope), float(intercept), m_min, float(geometry.height))
    ends = [slope * row + intercept for row in (0, geometry.height - 1)]
    if min(ends) < m_min:
        logger.warning(
            f"Perspective line a={slope:.4f} b={intercept:.3f} predicts sizes under "
            f"{m_min} px inside the frame, clamped"
        )
    logger.info(f"Perspective fit over {len(boxes)} boxes: a={slope:.4f}, b={intercept:.3f}")
    return model


def sigma_at(model: PerspectiveModel, row: float, factor: float = SIGMA_FACTOR) -> float:
    return factor * model.size_at(row)


def splat(
    values: npt.NDArray[np.float64],
    head: HeadSplat,
    support: npt.NDArray[np.bool_] | None = None,
    weight: float = 1.0,
):
    """Add a Gaussian truncated at radius ceil(3 sigma) to `values` in place.
    The kernel is renormalized over the pixels it can reach (inside the
    raster and, when given, inside `support`) so it adds exactly `weight`.
    """
    if not head.sigma > 0:
        raise ValueError(f"sigma must be positive, got {head.sigma}")
    h, w = values.shape
    x, y = head.center
    r = math.ceil(3 * head.sigma)
    r0, r1 = max(y - r, 0), min(y + r + 1, h)
    c0, c1 = max(x - r, 0), min(x + r + 1, w)
    dy = np.arange(r0, r1)[:, None] - y
    dx = np.arange(c0, c1)[None, :] - x
    kernel = np.exp(-(dx * dx + dy * dy) / (2 * head.sigma**2))
    if support is not None:
        kernel = kernel * support[r0:r1, c0:c1]
    kernel_sum = kernel.sum()
    if kernel_sum > 0:
        values[r0:r1, c0:c1] += kernel * (weight / kernel_sum)


def render_density(
    frame: FrameDetections,
    model: PerspectiveModel,
    mask: DivisionMask,
    sigma_factor: float = SIGMA_FACTOR,
    normalization: Normalization = DENSITY_NORMALIZATION,
) -> DensityMap:
    """Density of the distant heads of `frame`. Heads in the nearby region
    are left to the detector. With `per_kernel` every distant head adds 1;
    `frame` scales all kernels by 1 / (number of annotated heads).
    """
    if frame.head_points is None:
        raise ValueError(f"Frame {frame.frame_id} has no head annotations")
    if mask.geometry != frame.geometry:
        raise ShapeError(f"Mask {mask.geometry} doesn't match frame {frame.geometry}")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"Unknown normalization: {normalization}")

    geo = frame.geometry
    values = np.zeros((geo.height, geo.width), dtype=np.float64)
    bits = mask.bits
    weight = 1.0
    if normalization == "frame" and frame.head_points:
        weight = 1.0 / len(frame.head_points)

    outside = 0
    for point in frame.head_points:
        if not geo.contains(point.x, point.y):
            outside += 1
            continue
        if not bits[point.y, point.x]:
            continue
        splat(values, HeadSplat(point, sigma_at(model, point.y, sigma_factor)), bits, weight)
    if outside:
        logger.warning(f"Frame {frame.frame_id}: skipped {outside} heads outside the frame")
    return DensityMap(frame.frame_id, geo, values)


def downsample_quarter(dmap: DensityMap) -> DensityMap:
    "Sum-pool 4x4 blocks. Sizes that aren't multiples of 4 are zero padded first."
    if dmap.scale != 1:
        raise ValueError(f"Map {dmap.frame_id} is already at scale {dmap.scale}")
    h, w = dmap.values.shape
    ph, pw = -(-h // 4) * 4, -(-w // 4) * 4
    padded = np.zeros((ph, pw), dtype=np.float64)
    padded[:h, :w] = dmap.values
    pooled = padded.reshape(ph // 4, 4, pw // 4, 4).sum(axis=(1, 3))
    return DensityMap(dmap.frame_id, FrameGeometry(pw // 4, ph // 4), pooled, scale=4)


def flip_box(box: BoundingBox, width: int) -> BoundingBox:
    return BoundingBox(
        Point(width - 1 - box.bottom_right.x, box.top_left.y),
        Point(width - 1 - box.top_left.x, box.bottom_right.y),
        box.confidence,
    )


def flip_detections(frame: FrameDetections) -> FrameDetections:
    width = frame.geometry.width
    heads = frame.head_points
    if heads is not None:
        heads = tuple(Point(width - 1 - p.x, p.y) for p in heads)
    return replace(
        frame,
        boxes=sort_boxes(flip_box(box, width) for box in frame.boxes),
        head_points=heads,
    )


def flip_horizontal(
    image: npt.NDArray[np.float64], dmap: DensityMap, frame: FrameDetections
) -> tuple[npt.NDArray[np.float64], DensityMap, FrameDetections]:
    "Mirror a frame image (.., H, W), its density map and its detections left to right."
    if image.shape[-1] != frame.geometry.width:
        raise ShapeError(f"Image width {image.shape[-1]} != frame width {frame.geometry.width}")
    if dmap.geometry.width * dmap.scale != frame.geometry.width:
        raise ShapeError(
            f"Density map {dmap.geometry} at scale {dmap.scale} can't mirror a "
            f"{frame.geometry.width} px wide frame"
        )
    return (
        np.ascontiguousarray(image[..., ::-1]),
        replace(dmap, values=np.ascontiguousarray(dmap.values[:, ::-1])),
        flip_detections(frame),
    )


def write_density(dmap: DensityMap, path: Path, false_color: bool = False):
    header = {
        "width": dmap.geometry.width,
        "height": dmap.geometry.height,
        "scale": dmap.scale,
        "frame_id": dmap.frame_id,
    }
    write_float_raster(path, dmap.values, header)
    if false_color:
        write_false_color(Path(path).with_suffix(".png"), dmap.values)


def read_density(path: Path) -> DensityMap:
    values, header = read_float_raster(path)
    return DensityMap(
        header.get("frame_id", Path(path).stem),
        FrameGeometry(values.shape[1], values.shape[0]),
        values,
        int(header.get("scale", 1)),
    )
