import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import MIN_CONFIDENCE
from .detections import FrameDetections, center_of
from .division import DivisionMask, region_of
from .errors import DataError
from .utils import frame_sort_key, read_json, round_half_up, write_json


logger = logging.getLogger("regioncounter.fusion_eval")


@dataclass(frozen=True)
class FrameCount:
    frame_id: str
    nearby: int
    distant: float
    fused: float
    fused_rounded: int
    gt: int | None = None

    def __post_init__(self):
        if self.nearby < 0 or self.distant < 0:
            raise ValueError(f"Negative count in frame {self.frame_id}")


@dataclass(frozen=True)
class CountReport:
    scene_id: str
    frames: tuple[FrameCount, ...]
    mae: float
    mae_raw: float
    n: int

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "mae": self.mae,
            "mae_raw": self.mae_raw,
            "n": self.n,
            "frames": [asdict(frame) for frame in self.frames],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CountReport":
        return cls(
            d["scene_id"],
            tuple(FrameCount(**frame) for frame in d["frames"]),
            float(d["mae"]),
            float(d["mae_raw"]),
            int(d["n"]),
        )


class Fused(NamedTuple):
    fused: float
    fused_rounded: int


def count_nearby(
    frame: FrameDetections, mask: DivisionMask, threshold: float = MIN_CONFIDENCE
) -> int:
    "Accepted boxes whose center lies in the nearby region."
    if mask.geometry != frame.geometry:
        raise ValueError(f"Mask {mask.geometry} doesn't match frame {frame.geometry}")
    return sum(
        1 for box in frame.accepted(threshold) if region_of(mask, center_of(box)) == "nearby"
    )


def fuse(nearby: int, distant: float) -> Fused:
    if nearby < 0 or distant < 0:
        raise ValueError(f"Counts must be nonnegative, got nearby={nearby} distant={distant}")
    fused = nearby + distant
    return Fused(fused, round_half_up(fused))


def frame_count(frame_id: str, nearby: int, distant: float, gt: int | None) -> FrameCount:
    fused = fuse(nearby, distant)
    return FrameCount(frame_id, nearby, distant, fused.fused, fused.fused_rounded, gt)


def mae(frames: Iterable[FrameCount], rounded: bool = True) -> float:
    "Mean absolute error of the fused count over frames that have ground truth."
    errors = [
        abs((f.fused_rounded if rounded else f.fused) - f.gt) for f in frames if f.gt is not None
    ]
    if not errors:
        raise DataError("MAE needs at least one frame with ground truth")
    return float(np.mean(errors))


def build_report(scene_id: str, frames: Iterable[FrameCount]) -> CountReport:
    frames = tuple(sorted(frames, key=lambda f: frame_sort_key(f.frame_id)))
    missing = [f.frame_id for f in frames if f.gt is None]
    if missing:
        logger.warning(f"Scene {scene_id}: {len(missing)} frames without ground truth excluded from MAE")
    return CountReport(
        scene_id,
        frames,
        mae(frames, rounded=True),
        mae(frames, rounded=False),
        len(frames) - len(missing),
    )


def emit_curves(report: CountReport, path: Path):
    "Per-frame `frame_id, gt, nearby, distant, fused` rows."
    if not report.frames:
        raise DataError(f"Scene {report.scene_id} has no frames to plot")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("frame_id", "gt", "nearby", "distant", "fused"))
        for frame in sorted(report.frames, key=lambda fc: frame_sort_key(fc.frame_id)):
            writer.writerow(
                (
                    frame.frame_id,
                    "" if frame.gt is None else frame.gt,
                    frame.nearby,
                    repr(frame.distant),
                    repr(frame.fused),
                )
            )


def report_text(report: CountReport) -> str:
    lines = [
        f"scene {report.scene_id}",
        f"frames with ground truth: {report.n} of {len(report.frames)}",
        f"MAE (rounded fused count): {report.mae:.4f}",
        f"MAE (raw fused count):     {report.mae_raw:.4f}",
        "",
        f"{'frame':>10} {'gt':>5} {'nearby':>7} {'distant':>9} {'fused':>9}",
    ]
    for f in report.frames:
        gt = "-" if f.gt is None else str(f.gt)
        lines.append(f"{f.frame_id:>10} {gt:>5} {f.nearby:>7} {f.distant:>9.3f} {f.fused:>9.3f}")
    return "\n".join(lines) + "\n"


def write_report(report: CountReport, directory: Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.txt").write_text(report_text(report))
    write_json(directory / "report.json", report.to_dict())
    emit_curves(report, directory / "curves.csv")


def read_report(path: Path) -> CountReport:
    return CountReport.from_dict(read_json(path))


def scene_table(reports: Sequence[CountReport]) -> dict[str, dict[str, float]]:
    "One column per scene plus their average, for both MAE conventions."
    if not reports:
        raise DataError("No scene reports to tabulate")
    table = dict[str, dict[str, float]]()
    for key in ("mae", "mae_raw"):
        row = {r.scene_id: getattr(r, key) for r in reports}
        row["Average"] = float(np.mean(list(row.values())))
        table[key] = row
    return table


def scene_table_text(table: Mapping[str, Mapping[str, float]]) -> str:
    scenes = list(next(iter(table.values())))
    width = max(12, *(len(s) for s in scenes))
    lines = [f"{'Method':<12}" + "".join(f" | {s:>{width}}" for s in scenes)]
    labels = {"mae": "MAE", "mae_raw": "MAE (raw)"}
    for key, row in table.items():
        lines.append(f"{labels.get(key, key):<12}" + "".join(f" | {row[s]:>{width}.2f}" for s in scenes))
    return "\n".join(lines) + "\n"
