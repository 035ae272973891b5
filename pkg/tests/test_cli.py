import logging

import numpy as np
import pytest

import region_counter.__main__ as entry
from region_counter.cli import build_parser, load_and_divide, main, split_frames, training_examples
from region_counter.fusion_eval import build_report, frame_count, write_report
from region_counter.idcnn import NetworkConfig, init_params, load_checkpoint
from region_counter.pipeline_config import load_config
from region_counter.utils import read_json, write_json

from .conftest import frame


SMALL_SCENE = {
    "scene_id": "synthetic",
    "synth": {
        "width": 32,
        "height": 32,
        "frames": 6,
        "min_people": 2,
        "max_people": 4,
        "slope": -0.25,
        "intercept": 14.0,
    },
    "network": {"branch_widths": [2, 2, 2], "tail_channels": 2},
    "training": {"steps": 3, "learning_rate": 1e-3, "optimizer": "adam", "train_fraction": 0.5},
    "workers": 2,
}


def run(*argv) -> int:
    return main([str(a) for a in argv])


def synthesize(tmp_path, settings=SMALL_SCENE, name="out"):
    "Synthetic scene under tmp_path/name; returns the output dir and its effective config."
    config = tmp_path / f"{name}.json"
    write_json(config, settings)
    out = tmp_path / name
    assert run("synth", "--config", config, "--out", out) == 0
    return out, out / "effective_config.json"


def run_pipeline(out, config, *commands):
    for command in commands:
        assert run(command, "--config", config, "--out", out) == 0, command


def test_parser_knows_every_command():
    parser = build_parser()
    for command in ("synth", "divide", "densify", "train", "predict", "evaluate"):
        args = parser.parse_args([command, "--mode", "strict"])
        assert args.command == command and args.mode == "strict"
    assert parser.parse_args(["report", "a.json", "b.json"]).reports[1].name == "b.json"
    with pytest.raises(SystemExit):
        parser.parse_args(["divide", "--mode", "fuzzy"])


@pytest.mark.parametrize(
    "n, fraction, expected",
    [(10, 0.7, (7, 3)), (1, 0.7, (1, 0)), (2, 0.1, (1, 1)), (2, 0.9, (1, 1)), (5, 0.5, (2, 3))],
)
def test_split_frames(n, fraction, expected):
    frames = [frame([], frame_id=str(i)) for i in reversed(range(n))]
    train, held_out = split_frames(frames, fraction)
    assert (len(train), len(held_out)) == expected
    assert [f.frame_id for f in train + held_out] == [str(i) for i in range(n)]


def test_synth_writes_scene_and_config(tmp_path):
    out, config = synthesize(tmp_path)
    effective = read_json(config)
    assert effective["width"] == 32 and effective["height"] == 32
    assert effective["paths"]["heads"] == str(out / "scene" / "heads.csv")
    assert len(list((out / "scene" / "frames").iterdir())) == 6
    assert (out / "scene" / "scene.json").exists()


def test_divide_and_densify(tmp_path):
    out, config = synthesize(tmp_path)
    run_pipeline(out, config, "divide", "densify")

    division = read_json(out / "division" / "division.json")
    assert division["mode"] == "envelope" and len(division["frames"]) == 6
    assert 0 <= division["H_row"] < 32
    assert len(read_json(out / "division" / "mode_comparison.json")) == 6
    assert len(list((out / "division" / "masks").glob("*.pgm"))) == 6

    perspective = read_json(out / "density" / "perspective.json")
    assert perspective["slope"] < 0
    totals = read_json(out / "density" / "totals.json")
    scene = read_json(out / "scene" / "scene.json")
    assert set(totals) == set(scene["frames"])
    for fid, total in totals.items():
        assert 0 <= total <= scene["frames"][fid] + 1e-3
    assert len(list((out / "density" / "quarter").glob("*.raw"))) == 6


def test_mode_flag_overrides_config(tmp_path):
    out, config = synthesize(tmp_path)
    assert run("divide", "--config", config, "--out", out, "--mode", "strict") == 0
    assert read_json(out / "division" / "division.json")["mode"] == "strict"
    assert read_json(out / "effective_config.json")["mode"] == "strict"


def test_training_examples_stay_inside_the_distant_region(tmp_path):
    out, config = synthesize(tmp_path)
    assert run("divide", "--config", config, "--out", out, "--mode", "strict") == 0
    run_pipeline(out, config, "densify")
    cfg = load_config(config)
    scene = load_and_divide(cfg)
    examples, _ = training_examples(cfg, scene, scene.frames, out / "density" / "full")
    assert any(e.frame_id.endswith("/flipped") for e in examples)
    for e in examples:
        assert np.abs(e.target[~e.mask]).sum() < 1e-9, e.frame_id
        cells = np.kron(e.mask, np.ones((4, 4), dtype=bool))
        assert (e.frame[:, ~cells] == 0).all(), e.frame_id
    for fid, division in scene.divisions.items():
        if division.mask.distant_pixels:
            (example,) = [e for e in examples if e.frame_id == fid]
            assert (example.frame[:, ~division.mask.bits] == 0).all()


def test_division_records_distant_rect(tmp_path):
    out, config = synthesize(tmp_path)
    run_pipeline(out, config, "divide")
    division = read_json(out / "division" / "division.json")
    for entry in division["frames"].values():
        if entry["distant_rect"] is None:
            assert entry["distant_pixels"] == 0
            continue
        x_min, y_min, x_max, y_max = entry["distant_rect"]
        assert 0 <= x_min < x_max <= 32 and y_min == 0 < y_max <= 32
        assert entry["distant_pixels"] <= (x_max - x_min) * (y_max - y_min)


def test_train_predict_evaluate_report(tmp_path):
    out, config = synthesize(tmp_path)
    run_pipeline(out, config, "divide", "densify", "train", "evaluate")

    log = read_json(out / "model" / "training_log.json")
    assert log["steps"] == 3 and len(log["losses"]) == 3
    assert any(e.endswith("/flipped") for e in log["examples"])

    report = read_json(out / "evaluate" / "report.json")
    assert report["scene_id"] == "synthetic" and report["n"] == 3
    assert (out / "evaluate" / "curves.csv").exists()

    assert run("predict", "--config", config, "--out", out, "--all") == 0
    assert len(read_json(out / "predict" / "predictions.json")) == 6

    assert run("report", "--out", out, out / "evaluate" / "report.json") == 0
    table = read_json(out / "report" / "table.json")
    assert table["scenes"][0]["scene_id"] == "synthetic"
    assert table["average"]["mae"] == report["mae"]


def test_zero_steps_keeps_initial_weights(tmp_path):
    settings = {**SMALL_SCENE, "training": {**SMALL_SCENE["training"], "steps": 0}, "seed": 9}
    out, config = synthesize(tmp_path, settings)
    run_pipeline(out, config, "divide", "densify", "train")
    ckpt = load_checkpoint(out / "model" / "checkpoint.idcn")
    network = NetworkConfig(branch_widths=(2, 2, 2), tail_channels=2)
    assert ckpt.config == network and ckpt.step == 0
    for name, value in init_params(network, 9).items():
        assert (ckpt.params[name] == value).all()


def test_train_needs_density_maps(tmp_path):
    out, config = synthesize(tmp_path)
    assert run("train", "--config", config, "--out", out) == 3


def test_evaluate_without_held_out_frames(tmp_path):
    settings = {**SMALL_SCENE, "synth": {**SMALL_SCENE["synth"], "frames": 1}}
    out, config = synthesize(tmp_path, settings)
    assert run("evaluate", "--config", config, "--out", out) == 3


@pytest.mark.parametrize(
    "settings",
    [{"alpha": 1.5}, {"bogus": 1}, {"paths": {"bogus": "x"}}, {"version": 7}, {"training": {"optimizer": "rmsprop"}}],
)
def test_bad_config_exits_2(tmp_path, settings):
    config = tmp_path / "bad.json"
    write_json(config, settings)
    assert run("divide", "--config", config, "--out", tmp_path / "out") == 2


def test_missing_config_and_paths_exit_2(tmp_path):
    assert run("divide", "--config", tmp_path / "nope.json") == 2
    config = tmp_path / "c.json"
    config.write_text("[1, 2]")
    assert run("divide", "--config", config) == 2
    write_json(config, {"width": 10, "height": 10})
    assert run("divide", "--config", config, "--out", tmp_path / "out") == 2
    assert run("divide", "--config", config, "--log-level", "chatty") == 2


def test_frames_without_detections_exit_3(tmp_path):
    detections, heads = tmp_path / "det.csv", tmp_path / "heads.csv"
    detections.write_text("frame_id,x_min,y_min,x_max,y_max,confidence\n")
    heads.write_text("1,5,5\n")
    config = tmp_path / "c.json"
    write_json(
        config,
        {"width": 10, "height": 10, "paths": {"detections": str(detections), "heads": str(heads)}},
    )
    assert run("divide", "--config", config, "--out", tmp_path / "out") == 3
    assert not (tmp_path / "out" / "division").exists()


def test_malformed_detections_exit_3(tmp_path):
    detections = tmp_path / "det.csv"
    detections.write_text("1,0,0,five,5\n")
    config = tmp_path / "c.json"
    write_json(config, {"width": 10, "height": 10, "paths": {"detections": str(detections)}})
    assert run("divide", "--config", config, "--out", tmp_path / "out") == 3


def test_report_tables_scenes(tmp_path):
    paths = []
    for scene_id, fused in (("a", 1.0), ("b", 5.0)):
        write_report(build_report(scene_id, [frame_count("0", 0, fused, 2)]), tmp_path / scene_id)
        paths.append(tmp_path / scene_id / "report.json")
    assert run("report", "--out", tmp_path / "out", *paths) == 0
    table = read_json(tmp_path / "out" / "report" / "table.json")
    assert table["average"]["mae"] == 2.0
    assert "Average" in (tmp_path / "out" / "report" / "table.txt").read_text()

    assert run("report", "--out", tmp_path / "out", paths[0], paths[0]) == 3


E2E_SCENE = {
    "scene_id": "synthetic",
    "synth": {"width": 64, "height": 64, "frames": 20, "min_people": 3, "max_people": 8},
    "network": {"branch_widths": [4, 4, 4], "tail_channels": 8},
    "training": {"steps": 1500, "learning_rate": 2e-3, "optimizer": "adam"},
    "seed": 3,
    "workers": 4,
}


@pytest.mark.slow
def test_end_to_end_counts_synthetic_scene(tmp_path):
    out, config = synthesize(tmp_path, E2E_SCENE)
    run_pipeline(out, config, "divide", "densify", "train", "evaluate")

    scene = read_json(out / "scene" / "scene.json")
    fitted = read_json(out / "density" / "perspective.json")
    assert abs(fitted["slope"] - scene["slope"]) / abs(scene["slope"]) < 0.05
    assert abs(fitted["intercept"] - scene["intercept"]) / abs(scene["intercept"]) < 0.05

    report = read_json(out / "evaluate" / "report.json")
    assert report["n"] == 6
    assert report["mae"] < 1.0


@pytest.mark.slow
def test_pipeline_is_deterministic(tmp_path):
    settings = {**E2E_SCENE, "training": {**E2E_SCENE["training"], "steps": 20}}
    reports = []
    for name in ("first", "second"):
        out, config = synthesize(tmp_path, settings, name)
        run_pipeline(out, config, "divide", "densify", "train", "evaluate")
        reports.append((out / "evaluate" / "report.json").read_bytes())
    assert reports[0] == reports[1]


def test_bad_log_level_in_environment_exits_2(monkeypatch):
    root = logging.getLogger()
    monkeypatch.setattr(root, "handlers", [])
    level = root.level
    monkeypatch.setattr(entry, "LOG_LEVEL", "chatty")
    monkeypatch.setattr(entry, "cli_main", lambda: pytest.fail("CLI ran with a bad log level"))
    assert entry.main() == 2

    monkeypatch.setattr(entry, "LOG_LEVEL", "debug")
    monkeypatch.setattr(entry, "cli_main", lambda: 0)
    try:
        assert entry.main() == 0
        assert root.level == logging.DEBUG
    finally:
        root.setLevel(level)
