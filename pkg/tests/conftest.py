import numpy as np
import pytest

from region_counter.detections import BoundingBox, FrameDetections, FrameGeometry, Point, sort_boxes
from region_counter.idcnn import NetworkConfig


def box(x0: int, top: int, x1: int, bottom: int, confidence: float | None = None) -> BoundingBox:
    "Bottom-origin box from its left column, top row, right column and bottom row."
    return BoundingBox(Point(x0, top), Point(x1, bottom), confidence)


def frame(
    boxes=(), heads=None, frame_id="0", geometry=FrameGeometry(200, 200)
) -> FrameDetections:
    head_points = None if heads is None else tuple(Point(*h) for h in heads)
    return FrameDetections(
        frame_id,
        geometry,
        sort_boxes(boxes),
        head_points,
        None if head_points is None else len(head_points),
    )


def random_boxes(rng: np.random.Generator, geometry: FrameGeometry, n: int) -> list[BoundingBox]:
    boxes = []
    for _ in range(n):
        x0 = int(rng.integers(0, geometry.width - 2))
        x1 = int(rng.integers(x0 + 1, geometry.width))
        bottom = int(rng.integers(0, geometry.height - 2))
        top = int(rng.integers(bottom + 1, geometry.height))
        boxes.append(box(x0, top, x1, bottom))
    return boxes


@pytest.fixture
def geometry() -> FrameGeometry:
    return FrameGeometry(200, 200)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> NetworkConfig:
    return NetworkConfig(in_channels=3, branch_widths=(2, 2, 2), tail_channels=2)
