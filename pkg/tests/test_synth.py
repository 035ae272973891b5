import numpy as np
import pytest

from region_counter.density import fit_perspective
from region_counter.detections import FrameGeometry, center_of, load_scene
from region_counter.division import (
    division_for_frame,
    expectation_height,
    height_histogram,
    region_of,
)
from region_counter.errors import ConfigError
from region_counter.raster import read_image
from region_counter.synth import (
    SynthSettings,
    _double_counted,
    _place,
    generate_scene,
    perspective_error,
    render_frame,
    resolve_double_counts,
    write_scene,
)
from region_counter.utils import read_json


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SynthSettings(frames=30), seed=11)


def test_same_seed_same_scene():
    a = generate_scene(SynthSettings(frames=4), seed=5)
    b = generate_scene(SynthSettings(frames=4), seed=5)
    assert a.frames == b.frames
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x, y)
    assert generate_scene(SynthSettings(frames=4), seed=6).frames != a.frames


def test_frames_are_zero_padded_and_counted(scene):
    ids = [fid for fid, _ in scene.frames]
    assert ids[:3] == ["0000", "0001", "0002"]
    for f, (_, people) in zip(scene.detections(), scene.frames):
        assert f.gt_count == len(people) == len(f.boxes)
        assert all(b.confidence == 1.0 for b in f.boxes)


def test_pedestrians_fit_the_frame(scene):
    geo = scene.geometry
    for _, people in scene.frames:
        for p in people:
            assert 0 <= p.box.top_left.x < p.box.bottom_right.x < geo.width
            assert 0 <= p.box.bottom_right.y < p.box.top_left.y < geo.height
            assert p.head.x == center_of(p.box).x
            assert center_of(p.box).y <= p.head.y <= p.box.top_left.y


def test_perspective_fit_recovers_generating_line(scene):
    boxes = [b for f in scene.detections() for b in f.boxes]
    model = fit_perspective(boxes, scene.geometry)
    assert perspective_error(scene, model.slope, model.intercept) < 0.05


def test_no_pedestrian_is_counted_twice(scene):
    frames = scene.detections()
    line = expectation_height(height_histogram(frames))
    for f, (_, people) in zip(frames, scene.frames):
        mask = division_for_frame(f, line).mask
        for p in people:
            double = region_of(mask, center_of(p.box)) == "nearby" and region_of(mask, p.head) == "distant"
            assert not double


def test_heads_are_bright(scene):
    for (_, people), image in zip(scene.frames, scene.images):
        assert image.dtype == np.uint8
        assert image.shape == (scene.geometry.height, scene.geometry.width)
        for p in people:
            assert image[p.head.y, p.head.x] > 150


def test_render_empty_frame_is_background():
    image = render_frame(FrameGeometry(32, 24), [], np.random.default_rng(0))
    assert abs(float(image.mean()) - 20) < 2


def test_write_scene(tmp_path):
    scene = generate_scene(SynthSettings(frames=3), seed=2)
    paths = write_scene(scene, tmp_path, seed=2)
    assert sorted(p.name for p in paths["frames_dir"].iterdir()) == ["0000.pgm", "0001.pgm", "0002.pgm"]
    image = read_image(paths["frames_dir"] / "0001.pgm")
    np.testing.assert_array_equal(image[0], scene.images[1])
    loaded = load_scene(paths["detections"], paths["heads"], scene.geometry)
    assert loaded.frames == scene.detections()
    meta = read_json(tmp_path / "scene.json")
    assert meta["slope"] == scene.slope and meta["seed"] == 2
    assert meta["frames"] == {fid: len(people) for fid, people in scene.frames}


@pytest.mark.parametrize(
    "settings",
    [
        dict(width=4),
        dict(frames=0),
        dict(min_people=5, max_people=2),
        dict(slope=1.0),
        dict(intercept=2.0, slope=0.0),
    ],
)
def test_settings_validation(settings):
    with pytest.raises(ConfigError):
        SynthSettings(**settings)


@pytest.mark.parametrize("max_relocations", [0, 2, 20])
@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_double_counts_resolved_for_any_relocation_budget(seed, max_relocations):
    settings = SynthSettings(frames=8)
    geometry = FrameGeometry(settings.width, settings.height)
    rng = np.random.default_rng(seed)
    frames = [
        (str(i), [p for p in (_place(rng, settings, 0.3) for _ in range(10)) if p])
        for i in range(settings.frames)
    ]
    before = sum(len(people) for _, people in frames)
    resolve_double_counts(frames, geometry, settings, rng, max_relocations=max_relocations)
    offenders, _ = _double_counted(frames, geometry, 0.3, "center", "envelope")
    assert not offenders
    assert sum(len(people) for _, people in frames) <= before
