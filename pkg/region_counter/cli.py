import argparse
import logging
import math
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import DEFAULT_CONFIG_PATH
from . import help_strings as hs
from .density import (
    DensityMap,
    downsample_quarter,
    fit_perspective,
    flip_horizontal,
    read_density,
    render_density,
    write_density,
)
from .detections import BoundingBox, FrameDetections, FrameGeometry, load_scene
from .division import (
    DIVISION_MODES,
    DivisionMask,
    ExpectationLine,
    FrameDivision,
    compare_modes,
    crop_to_distant,
    distant_bounding_rect,
    division_for_frame,
    expectation_height,
    flip_mask,
    height_histogram,
    quarter_mask,
    write_mask,
)
from .errors import ConfigError, DataError
from .fusion_eval import (
    build_report,
    count_nearby,
    frame_count,
    read_report,
    scene_table,
    scene_table_text,
    write_report,
)
from .idcnn import (
    Checkpoint,
    TrainExample,
    channel_mean,
    load_checkpoint,
    new_state,
    pad_frame,
    predict_count,
    predict_density,
    prepare_input,
    save_checkpoint,
    train,
)
from .pipeline_config import PipelineConfig, dump_config, load_config
from .raster import read_image
from .synth import generate_scene, write_scene
from .utils import atomic_write_bytes, frame_sort_key, map_frames, staged_output, write_json


logger = logging.getLogger("regioncounter.cli")

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".png")
CHECKPOINT_NAME = "checkpoint.idcn"


class Scene(NamedTuple):
    frames: list[FrameDetections]
    line: ExpectationLine
    divisions: dict[str, FrameDivision]


def frame_image_path(frames_dir: Path, frame_id: str) -> Path:
    for suffix in IMAGE_SUFFIXES:
        path = Path(frames_dir) / f"{frame_id}{suffix}"
        if path.exists():
            return path
    raise DataError(f"No image for frame {frame_id} in {frames_dir}")


def resolve_geometry(cfg: PipelineConfig) -> PipelineConfig:
    "Fill in the frame size from the first frame image when the config lacks it."
    if cfg.width is not None and cfg.height is not None:
        return cfg
    frames_dir = cfg.paths.frames_dir
    if frames_dir is None:
        raise ConfigError("Set width and height, or paths.frames_dir to read them from a frame")
    images = sorted(p for p in Path(frames_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise DataError(f"No frame images in {frames_dir}")
    _, h, w = read_image(images[0]).shape
    logger.info(f"Frame size {w}x{h} taken from {images[0].name}")
    return cfg.override(width=w, height=h)


def echo_config(cfg: PipelineConfig):
    atomic_write_bytes(cfg.paths.output_dir / "effective_config.json", dump_config(cfg))


def split_frames(
    frames: Sequence[FrameDetections], train_fraction: float
) -> tuple[list[FrameDetections], list[FrameDetections]]:
    "First `train_fraction` of the frames in natural order train, the rest are held out."
    frames = sorted(frames, key=lambda f: frame_sort_key(f.frame_id))
    n = len(frames)
    n_train = min(max(1, math.floor(train_fraction * n)), max(1, n - 1))
    return frames[:n_train], frames[n_train:]


def load_and_divide(cfg: PipelineConfig) -> Scene:
    "Every frame of the scene with its division. H uses the detections of all frames."
    heads = cfg.paths.heads
    if heads is not None and not Path(heads).exists():
        raise ConfigError(f"paths.heads does not exist: {heads}")
    loaded = load_scene(cfg.paths.detections, heads, cfg.geometry, cfg.min_confidence)
    if not loaded.frames:
        raise DataError(f"No frames in {cfg.paths.detections}")
    line = expectation_height(height_histogram(loaded.frames, cfg.anchor))
    logger.info(f"Expectation line H={line.H:.3f} (row {line.H_row}) over {len(loaded.frames)} frames")

    def divide(frame: FrameDetections) -> FrameDivision:
        try:
            return division_for_frame(frame, line, cfg.alpha, cfg.mode)
        except ValueError as e:
            raise DataError(f"Frame {frame.frame_id}: {e}") from e

    divisions = map_frames(divide, loaded.frames, cfg.workers)
    return Scene(loaded.frames, line, {d.frame_id: d for d in divisions})


def _file_box(box: BoundingBox, geometry: FrameGeometry) -> list[int]:
    "Top-origin `x_min, y_min, x_max, y_max`, as in the detections file."
    return [
        box.top_left.x,
        geometry.flip_row(box.top_left.y),
        box.bottom_right.x,
        geometry.flip_row(box.bottom_right.y),
    ]


def _distant_rect(mask: DivisionMask) -> list[int] | None:
    "Top-origin `x_min, y_min, x_max, y_max`, half-open, of the distant pixels."
    rect = distant_bounding_rect(mask)
    if rect is None:
        return None
    row0, row1, col0, col1 = rect
    height = mask.geometry.height
    return [col0, height - row1, col1, height - row0]


def _read_frame(cfg: PipelineConfig, frame_id: str) -> np.ndarray:
    image = read_image(frame_image_path(cfg.paths.frames_dir, frame_id))
    geo = cfg.geometry
    if image.shape[1:] != (geo.height, geo.width):
        raise DataError(
            f"Frame {frame_id} is {image.shape[2]}x{image.shape[1]}, expected {geo.width}x{geo.height}"
        )
    return image


def network_input(
    image: np.ndarray, mask: DivisionMask, mean: Sequence[float]
) -> np.ndarray:
    "Normalized frame with its nearby region zeroed, padded for the network."
    return pad_frame(crop_to_distant(prepare_input(image, mean), mask))


def set_log_level(name: str):
    try:
        logging.getLogger().setLevel(name.upper())
    except ValueError:
        raise ConfigError(f"Unknown log level: {name}") from None


def _checkpoint(cfg: PipelineConfig, path: Path | None) -> Checkpoint:
    path = Path(path) if path else cfg.paths.output_dir / "model" / CHECKPOINT_NAME
    if not path.exists():
        raise DataError(f"No checkpoint at {path}, run train first")
    return load_checkpoint(path)


# Commands


def cmd_synth(cfg: PipelineConfig):
    scene = generate_scene(cfg.synth, cfg.seed, cfg.alpha, cfg.anchor, cfg.mode)  # type: ignore
    scene_dir = cfg.paths.output_dir / "scene"
    with staged_output(scene_dir) as tmp:
        write_scene(scene, tmp, cfg.seed)
    effective = cfg.override(
        width=scene.geometry.width,
        height=scene.geometry.height,
        frames_dir=scene_dir / "frames",
        detections=scene_dir / "detections.csv",
        heads=scene_dir / "heads.csv",
    )
    echo_config(effective)
    logger.info(f"Synthetic scene written to {scene_dir}")


def cmd_divide(cfg: PipelineConfig):
    cfg = resolve_geometry(cfg.validate("detections"))
    scene = load_and_divide(cfg)
    geo = cfg.geometry
    frames_report, comparisons = {}, {}
    with staged_output(cfg.paths.output_dir / "division") as tmp:
        (tmp / "masks").mkdir()
        for frame in scene.frames:
            division = scene.divisions[frame.frame_id]
            write_mask(division.mask, tmp / "masks" / frame.frame_id, scene.line, cfg.alpha, cfg.mode)  # type: ignore
            frames_report[frame.frame_id] = {
                "straddlers": [_file_box(b, geo) for b in division.straddlers],
                "distant_pixels": division.mask.distant_pixels,
                "distant_rect": _distant_rect(division.mask),
            }
            diff = compare_modes(geo, division.straddlers, scene.line)
            comparisons[frame.frame_id] = {
                "differing_columns": diff.differing_columns,
                "pixel_difference": diff.pixel_difference,
                "strict_cuts": [_file_box(b, geo) for b in diff.strict_cuts],
            }
        write_json(
            tmp / "division.json",
            {
                "H": scene.line.H,
                "H_row": scene.line.H_row,
                "alpha": cfg.alpha,
                "mode": cfg.mode,
                "anchor": cfg.anchor,
                "frames": frames_report,
            },
        )
        write_json(tmp / "mode_comparison.json", comparisons)
    echo_config(cfg)
    differing = sum(1 for c in comparisons.values() if c["differing_columns"])
    logger.info(
        f"Divided {len(scene.frames)} frames; strict and envelope masks differ in {differing}"
    )


def cmd_densify(cfg: PipelineConfig):
    cfg = resolve_geometry(cfg.validate("detections", "heads"))
    scene = load_and_divide(cfg)
    model = fit_perspective(
        (box for frame in scene.frames for box in frame.boxes), cfg.geometry, cfg.m_min
    )

    def render(frame: FrameDetections) -> DensityMap:
        return render_density(
            frame,
            model,
            scene.divisions[frame.frame_id].mask,
            cfg.sigma_factor,
            cfg.normalization,  # type: ignore
        )

    maps = map_frames(render, scene.frames, cfg.workers)
    with staged_output(cfg.paths.output_dir / "density") as tmp:
        (tmp / "full").mkdir()
        (tmp / "quarter").mkdir()
        for dmap in maps:
            write_density(dmap, tmp / "full" / dmap.frame_id, cfg.false_color)
            write_density(downsample_quarter(dmap), tmp / "quarter" / dmap.frame_id)
        write_json(
            tmp / "perspective.json",
            {
                "slope": model.slope,
                "intercept": model.intercept,
                "m_min": model.m_min,
                "m_max": model.m_max,
            },
        )
        write_json(tmp / "totals.json", {dmap.frame_id: dmap.total() for dmap in maps})
    echo_config(cfg)
    logger.info(f"Rendered {len(maps)} density maps")


def training_examples(
    cfg: PipelineConfig, scene: Scene, frames: Sequence[FrameDetections], density_dir: Path
) -> tuple[list[TrainExample], tuple[float, ...]]:
    images = dict(
        zip(
            (f.frame_id for f in frames),
            map_frames(lambda f: _read_frame(cfg, f.frame_id), frames, cfg.workers),
        )
    )
    mean = channel_mean(list(images.values()))
    examples = list[TrainExample]()
    for frame in frames:
        path = density_dir / f"{frame.frame_id}.raw"
        if not path.exists():
            raise DataError(f"No density map for frame {frame.frame_id} in {density_dir}")
        dmap = read_density(path)
        if dmap.geometry != frame.geometry:
            raise DataError(f"Density map {path} is {dmap.geometry}, frame is {frame.geometry}")
        image, mask = images[frame.frame_id], scene.divisions[frame.frame_id].mask
        variants = [(frame.frame_id, image, dmap, mask)]
        if cfg.training.flip:
            f_image, f_map, _ = flip_horizontal(image, dmap, frame)
            variants.append((f"{frame.frame_id}/flipped", f_image, f_map, flip_mask(mask)))
        for example_id, img, target, mask in variants:
            cells = quarter_mask(mask)
            if not cells.any():
                logger.warning(f"Frame {example_id} has no distant region, skipped")
                continue
            examples.append(
                TrainExample(
                    example_id,
                    network_input(img, mask, mean),
                    downsample_quarter(target).values,
                    cells,
                )
            )
    return examples, mean


def cmd_train(cfg: PipelineConfig):
    cfg = resolve_geometry(cfg.validate("frames_dir", "detections", "heads"))
    if cfg.network.in_channels != 3:
        raise ConfigError(f"Frames are read as RGB, network.in_channels must be 3, got {cfg.network.in_channels}")
    density_dir = cfg.paths.output_dir / "density" / "full"
    if not density_dir.is_dir():
        raise DataError(f"No density maps in {density_dir}, run densify first")
    scene = load_and_divide(cfg)
    train_frames, held_out = split_frames(scene.frames, cfg.training.train_fraction)
    logger.info(f"Training on {len(train_frames)} frames, {len(held_out)} held out")
    examples, mean = training_examples(cfg, scene, train_frames, density_dir)
    if not examples:
        raise DataError("No training frame has a distant region")

    t = cfg.training
    state = new_state(cfg.network, cfg.seed, t.learning_rate, t.optimizer)  # type: ignore
    logger.info(f"Network has {state.parameter_count} parameters, {len(examples)} examples")
    losses = list[float]()
    state = train(
        state, examples, t.steps, t.batch_size, on_step=lambda s: losses.append(s.last_loss)
    )
    with staged_output(cfg.paths.output_dir / "model") as tmp:
        save_checkpoint(tmp / CHECKPOINT_NAME, state.config, state.params, mean, state.step)
        write_json(
            tmp / "training_log.json",
            {
                "steps": state.step,
                "losses": losses,
                "examples": [e.frame_id for e in examples],
                "parameters": state.parameter_count,
            },
        )
    echo_config(cfg)
    if losses:
        logger.info(f"Trained {state.step} steps, final loss {losses[-1]:.6g}")


def cmd_predict(cfg: PipelineConfig, checkpoint: Path | None = None, all_frames: bool = False):
    cfg = resolve_geometry(cfg.validate("frames_dir", "detections"))
    scene = load_and_divide(cfg)
    frames = scene.frames if all_frames else split_frames(scene.frames, cfg.training.train_fraction)[1]
    if not frames:
        raise DataError("No frames to predict")
    ckpt = _checkpoint(cfg, checkpoint)

    def run(frame: FrameDetections) -> tuple[DensityMap, float]:
        mask = scene.divisions[frame.frame_id].mask
        x = network_input(_read_frame(cfg, frame.frame_id), mask, ckpt.channel_mean)
        values = predict_density(ckpt.config, ckpt.params, x)
        cells = quarter_mask(mask)
        h4, w4 = values.shape
        dmap = DensityMap(frame.frame_id, FrameGeometry(w4, h4), values, scale=4)
        return dmap, float(np.where(cells, values, 0.0).sum())

    results = map_frames(run, frames, cfg.workers)
    with staged_output(cfg.paths.output_dir / "predict") as tmp:
        (tmp / "maps").mkdir()
        for dmap, _ in results:
            write_density(dmap, tmp / "maps" / dmap.frame_id, cfg.false_color)
        write_json(tmp / "predictions.json", {dmap.frame_id: count for dmap, count in results})
    echo_config(cfg)
    logger.info(f"Predicted {len(results)} frames")


def cmd_evaluate(cfg: PipelineConfig, checkpoint: Path | None = None):
    cfg = resolve_geometry(cfg.validate("frames_dir", "detections"))
    scene = load_and_divide(cfg)
    _, held_out = split_frames(scene.frames, cfg.training.train_fraction)
    if not held_out:
        raise DataError("Empty test set: no held-out frames to evaluate")
    ckpt = _checkpoint(cfg, checkpoint)

    def run(frame: FrameDetections):
        mask = scene.divisions[frame.frame_id].mask
        x = network_input(_read_frame(cfg, frame.frame_id), mask, ckpt.channel_mean)
        distant = predict_count(ckpt.config, ckpt.params, x, quarter_mask(mask))
        nearby = count_nearby(frame, mask, cfg.min_confidence)
        return frame_count(frame.frame_id, nearby, distant, frame.gt_count)

    report = build_report(cfg.scene_id, map_frames(run, held_out, cfg.workers))
    with staged_output(cfg.paths.output_dir / "evaluate") as tmp:
        write_report(report, tmp)
    echo_config(cfg)
    logger.info(
        f"Scene {report.scene_id}: MAE {report.mae:.3f} (raw {report.mae_raw:.3f}) over {report.n} frames"
    )


def cmd_report(cfg: PipelineConfig, report_paths: Sequence[Path]):
    reports = [read_report(path) for path in report_paths]
    ids = [r.scene_id for r in reports]
    if len(set(ids)) != len(ids):
        raise DataError(f"Duplicate scene ids in reports: {ids}")
    table = scene_table(reports)
    with staged_output(cfg.paths.output_dir / "report") as tmp:
        (tmp / "table.txt").write_text(scene_table_text(table))
        write_json(
            tmp / "table.json",
            {
                "scenes": [
                    {"scene_id": r.scene_id, "mae": r.mae, "mae_raw": r.mae_raw, "n": r.n}
                    for r in reports
                ],
                "average": {key: row["Average"] for key, row in table.items()},
            },
        )
    echo_config(cfg)
    logger.info(f"Tabulated {len(reports)} scenes")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_CONFIG_PATH, help=hs.common_desc["config"])
    common.add_argument("--out", type=Path, help=hs.common_desc["out"])
    common.add_argument("--seed", type=int, help=hs.common_desc["seed"])
    common.add_argument("--mode", choices=DIVISION_MODES, help=hs.common_desc["mode"])
    common.add_argument("--alpha", type=float, help=hs.common_desc["alpha"])
    common.add_argument("--workers", type=int, help=hs.common_desc["workers"])
    common.add_argument("--log-level", help=hs.common_desc["log_level"])

    parser = argparse.ArgumentParser(
        prog="region-counter",
        description=hs.prog_desc,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "synth": hs.synth_desc,
        "divide": hs.divide_desc,
        "densify": hs.densify_desc,
        "train": hs.train_desc,
        "predict": hs.predict_desc,
        "evaluate": hs.evaluate_desc,
        "report": hs.report_desc,
    }
    subparsers = {
        name: sub.add_parser(
            name,
            parents=[common],
            description=desc,
            help=desc.splitlines()[0],
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        for name, desc in commands.items()
    }
    for name in ("predict", "evaluate"):
        subparsers[name].add_argument("--checkpoint", type=Path, help=hs.checkpoint_desc)
    subparsers["predict"].add_argument(
        "--all", action="store_true", dest="all_frames", help="Predict every frame, not only held-out ones."
    )
    subparsers["report"].add_argument("reports", nargs="+", type=Path, help="report.json files")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    "Run one command. Returns the process exit code."
    args = build_parser().parse_args(argv)
    try:
        if args.log_level:
            set_log_level(args.log_level)
        cfg = load_config(args.config).override(
            output_dir=args.out,
            seed=args.seed,
            mode=args.mode,
            alpha=args.alpha,
            workers=args.workers,
        )
        cfg.validate()
        match args.command:
            case "synth":
                cmd_synth(cfg)
            case "divide":
                cmd_divide(cfg)
            case "densify":
                cmd_densify(cfg)
            case "train":
                cmd_train(cfg)
            case "predict":
                cmd_predict(cfg, args.checkpoint, args.all_frames)
            case "evaluate":
                cmd_evaluate(cfg, args.checkpoint)
            case "report":
                cmd_report(cfg, args.reports)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return 2
    except (DataError, OSError) as e:
        logger.error(f"Data error: {e}")
        return 3
    return 0
