import numpy as np
import pytest

from rgbdseg import dataset as ds
from rgbdseg import scenes
from rgbdseg.hha import DepthImage, default_intrinsics
from rgbdseg.scenes import Cuboid, SyntheticSceneSpec


def wall_stare_spec():
    # wide, tall room with a close back wall: every ray lands on that wall
    return SyntheticSceneSpec(
        name="wallstare", image_size=32,
        classes=["wall", "floor", "ceiling"],
        room=(8.0, 8.0, 2.5),
        wall_albedo=(0.7, 0.7, 0.7), floor_albedo=(0.4, 0.3, 0.2),
        ceiling_albedo=(0.9, 0.9, 0.9),
        cam_height=4.0, cam_height_jitter=0.0,
        cam_xz=(4.0, 0.5), cam_xz_jitter=(0.0, 0.0),
        noise_depth=0.0, noise_rgb=0.0,
    )


def test_wall_stare_depth_and_labels():
    sample = scenes.generate_scene(wall_stare_spec(), seed=0)
    assert np.array_equal(sample.depth.depth, np.full((32, 32), 2.0))
    wall_idx = wall_stare_spec().classes.index("wall")
    assert (sample.labels == wall_idx).all()


def test_generation_deterministic_per_seed():
    spec = scenes.basic_scene_spec(image_size=48)
    a = scenes.generate_scene(spec, seed=11)
    b = scenes.generate_scene(spec, seed=11)
    c = scenes.generate_scene(spec, seed=12)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth.depth, b.depth.depth)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.labels, c.labels)


def test_depth_labels_consistent_with_nearest_hit():
    # furniture pixels must be strictly closer than the furniture-free render
    spec = scenes.basic_scene_spec(image_size=48, noise_depth=0.0, noise_rgb=0.0)
    bare = scenes.SyntheticSceneSpec(**{**spec.__dict__, "furniture": []})
    full = scenes.generate_scene(spec, seed=5)
    empty = scenes.generate_scene(bare, seed=5)
    furniture_classes = {spec.classes.index(c) for c in ("table", "chair", "bed")}
    mask = np.isin(full.labels, list(furniture_classes))
    assert mask.any()
    assert (full.depth.depth[mask] < empty.depth.depth[mask] + 1e-9).all()
    assert np.array_equal(full.labels[~mask], empty.labels[~mask])


def test_color_twins_share_appearance_but_not_depth():
    spec = scenes.color_twin_scene_spec(noise_depth=0.0, noise_rgb=0.0)
    near_idx = spec.classes.index("panel_near")
    far_idx = spec.classes.index("panel_far")
    near_vals, far_vals, near_depth, far_depth = [], [], [], []
    for seed in range(12):
        s = scenes.generate_scene(spec, seed=seed)
        near_m, far_m = s.labels == near_idx, s.labels == far_idx
        if near_m.any():
            near_vals.append(np.unique(np.round(s.rgb[:, near_m], 9)))
            near_depth.append(s.depth.depth[near_m])
        if far_m.any():
            far_vals.append(np.unique(np.round(s.rgb[:, far_m], 9)))
            far_depth.append(s.depth.depth[far_m])
    assert near_vals and far_vals
    # identical albedo + normal + light: the exact same shaded color values
    assert np.array_equal(np.unique(np.concatenate(near_vals)),
                          np.unique(np.concatenate(far_vals)))
    assert np.concatenate(near_depth).max() < np.concatenate(far_depth).min()


def test_layout_twins_share_shaded_color():
    spec = scenes.layout_twin_scene_spec(noise_depth=0.0, noise_rgb=0.0)
    s = scenes.generate_scene(spec, seed=3)
    floor_m = s.labels == spec.classes.index("floor")
    ceil_m = s.labels == spec.classes.index("ceiling")
    assert floor_m.any() and ceil_m.any()
    floor_colors = np.unique(np.round(s.rgb[:, floor_m], 9))
    ceil_colors = np.unique(np.round(s.rgb[:, ceil_m], 9))
    assert np.array_equal(floor_colors, ceil_colors)


def test_degenerate_camera_rejected():
    spec = wall_stare_spec()
    spec.cam_xz = (20.0, 0.5)
    with pytest.raises(ValueError):
        scenes.generate_scene(spec, seed=0)


def test_sample_round_trip(tmp_path):
    sample = scenes.generate_scene(scenes.basic_scene_spec(image_size=32), seed=2)
    rel = ds.write_sample(tmp_path, sample)
    back = ds.read_sample(tmp_path, sample.id, rel["rgb"], rel["depth"], rel["labels"])
    assert np.array_equal(back.labels, sample.labels)
    assert np.array_equal(ds.rgb_to_bytes(back.rgb), ds.rgb_to_bytes(sample.rgb))
    assert np.abs(back.depth.depth - sample.depth.depth).max() <= 0.0005 + 1e-12
    assert back.depth.fx == sample.depth.fx and back.depth.cy == sample.depth.cy


def test_depth_unit_conversion(tmp_path):
    d = np.full((4, 4), 3.0)
    ds.write_depth_pgm(tmp_path / "d.pgm", d, default_intrinsics(4, 4))
    raw = (tmp_path / "d.pgm").read_bytes()
    body = raw[raw.index(b"65535\n") + 6:]
    values = np.frombuffer(body, dtype=">u2")
    assert (values == 3000).all()


def test_eight_bit_depth_rejected(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(16))
    with pytest.raises(ValueError, match="16-bit"):
        ds.read_depth_pgm(p)


def test_malformed_headers_rejected(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P6\n4 nope\n255\n" + bytes(48))
    with pytest.raises(ValueError):
        ds.read_ppm(p)
    q = tmp_path / "trunc.ppm"
    q.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(ValueError, match="payload"):
        ds.read_ppm(q)


def test_sample_dimension_mismatch_rejected():
    depth = DepthImage(np.ones((4, 4)), *default_intrinsics(4, 4))
    with pytest.raises(ValueError):
        ds.RgbdSample("x", np.zeros((3, 5, 4)), depth, np.zeros((4, 4), dtype=np.uint8))


def test_crop_identity_and_alignment():
    sample = scenes.generate_scene(scenes.basic_scene_spec(image_size=48), seed=9)
    full = ds.crop(sample, 48, "center")
    assert np.array_equal(full.rgb, sample.rgb)
    sample.labels[20, 30] = 200  # marker pixel
    sample.rgb[:, 20, 30] = 0.123
    c = ds.crop(sample, 32, "center")
    where = np.argwhere(c.labels == 200)
    assert len(where) == 1
    r, col = where[0]
    assert np.allclose(c.rgb[:, r, col], 0.123)


def test_crop_random_deterministic_and_bounds():
    sample = scenes.generate_scene(scenes.basic_scene_spec(image_size=48), seed=10)
    a = ds.crop(sample, 24, "random", seed=7)
    b = ds.crop(sample, 24, "random", seed=7)
    assert np.array_equal(a.labels, b.labels)
    with pytest.raises(ValueError):
        ds.crop(sample, 64, "center")


def _toy_manifest(tmp_path, count=10):
    spec = scenes.basic_scene_spec(image_size=24)
    entries = []
    for i in range(count):
        s = scenes.generate_scene(spec, seed=i)
        rel = ds.write_sample(tmp_path, s)
        entries.append((s.id, rel["rgb"], rel["depth"], rel["labels"]))
    return ds.Manifest(tmp_path, list(spec.classes), entries)


def test_manifest_round_trip_and_validation(tmp_path):
    m = _toy_manifest(tmp_path)
    ds.write_manifest(tmp_path / "manifest.txt", m)
    back = ds.read_manifest(tmp_path / "manifest.txt")
    assert back.classes == m.classes
    assert back.entries == m.entries
    (tmp_path / m.entries[0][1]).unlink()
    with pytest.raises(FileNotFoundError):
        ds.read_manifest(tmp_path / "manifest.txt")


def test_split_partition_and_determinism(tmp_path):
    m = _toy_manifest(tmp_path)
    train, test = ds.make_split(m, 0.5, seed=3)
    assert len(train) == 5 and len(test) == 5
    ids = {e[0] for e in train.entries} | {e[0] for e in test.entries}
    assert ids == {e[0] for e in m.entries}
    assert not ({e[0] for e in train.entries} & {e[0] for e in test.entries})
    train2, _ = ds.make_split(m, 0.5, seed=3)
    assert train.entries == train2.entries
    with pytest.raises(ValueError):
        ds.make_split(m, 0.05, seed=0)


def test_class_frequencies_sum_to_one(tmp_path):
    m = _toy_manifest(tmp_path, count=4)
    freq = ds.class_pixel_frequencies(m)
    assert freq.shape == (6,)
    assert freq.sum() == pytest.approx(1.0, abs=1e-9)


def test_scene_spec_file_parsing(tmp_path):
    p = tmp_path / "twin.scene"
    p.write_text("scene.kind = color_twin\nscene.image_size = 32\nscene.noise_depth = 0.0\n")
    spec = scenes.load_scene_spec(p)
    assert spec.name == "color_twin"
    assert spec.image_size == 32
    assert spec.noise_depth == 0.0
    bad = tmp_path / "bad.scene"
    bad.write_text("scene.kindd = basic\n")
    with pytest.raises(ValueError, match="unknown scene key"):
        scenes.load_scene_spec(bad)
