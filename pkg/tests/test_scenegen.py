import json
import math

import numpy as np
import pytest

from seqdepth.errors import DatasetIntegrityError, ImageFormatError, InvalidConfigError
from seqdepth.scenegen import (
    Box,
    CameraPose,
    CameraRig,
    GeneratorConfig,
    Scene,
    generate_dataset,
    generate_episode,
    make_episode,
    quantize_depth,
    read_dataset,
    read_pnm,
    render_frame,
    single_ray_depth,
    straight_trajectory,
    write_dataset,
    write_pnm,
)


def test_empty_scene():
    rgb, z = render_frame(Scene(), CameraPose(0, 0, 3.0))
    sky = np.floor(np.array(Scene().sky_color) * 255 + 0.5)
    top = slice(0, 16)
    assert np.all(z[top] == 50.0)
    assert np.all(rgb[:, top] == sky[:, None, None])
    # the ground is still a hit, so the lower half is nearer than R
    assert np.all(z[-8:] < 50.0)
    assert not np.any(np.all(rgb[:, 16:] == sky[:, None, None], axis=0))
    # looking above the horizon nothing is in range
    _, z_up = render_frame(Scene(), CameraPose(0, 0, 3.0, pitch=math.radians(50)))
    assert np.all(quantize_depth(z_up) == 255)


def test_unit_box_ahead():
    pose = CameraPose(0, 0, 3.0, yaw=math.pi / 2)
    scene = Scene([Box((0, 10, 3.0), (1, 1, 1))])
    _, z = render_frame(scene, pose)
    for r in (15, 16):
        for c in (15, 16):
            assert z[r, c] == pytest.approx(9.5, abs=1e-12)


def test_planar_vs_ray_length():
    pose = CameraPose(0, 0, 3.0)
    d = pose.ray_directions()
    fwd = pose.basis()[0]
    np.testing.assert_allclose(d @ fwd, 1.0)
    lengths = np.linalg.norm(d, axis=1)
    assert np.all(lengths >= 1.0)
    assert lengths.min() == pytest.approx(math.sqrt(1 + 2 * (0.5 / pose.focal) ** 2))


def test_quantize():
    assert quantize_depth(0.0) == 0
    assert quantize_depth(50.0) == 255 and quantize_depth(80.0) == 255
    assert quantize_depth(25.0, 50.0) == 128
    z = np.linspace(0, 60, 1000)
    assert np.all(np.diff(quantize_depth(z).astype(int)) >= 0)
    with pytest.raises(InvalidConfigError):
        quantize_depth(-0.1)


def test_single_ray_spot_checks():
    ep, _ = make_episode(GeneratorConfig(frames=6), 3)
    rng = np.random.default_rng(0)
    for i in range(6):
        for _ in range(40):
            r, c = rng.integers(0, 32, 2)
            want = quantize_depth(single_ray_depth(ep.scene, ep.poses[i], r, c), ep.scene.max_range)
            assert ep.depths[i, r, c] == want


def test_occlusion_never_increases_depth():
    pose = CameraPose(0, 0, 3.0)
    base = Scene([Box.on_ground(1.0, 15.0, 2, 2, 3)])
    _, z0 = render_frame(base, pose)
    _, z1 = render_frame(base.with_box(Box.on_ground(0.5, 8.0, 1.5, 1.0, 2)), pose)
    assert np.all(z1 <= z0)
    assert np.any(z1 < z0)


def test_static_trajectory_identical_frames():
    rig = CameraRig()
    scene = Scene([Box.on_ground(0, 10, 2, 2, 2)])
    ep = generate_episode(scene, [rig.pose(0, 0, math.pi / 2)] * 5)
    assert all(np.array_equal(ep.frames[0], f) for f in ep.frames)
    assert all(np.array_equal(ep.depths[0], d) for d in ep.depths)


def test_approach_decreases_depth():
    rig = CameraRig(step=0.5)
    scene = Scene([Box.on_ground(0, 20, 4, 1, 6)])
    ep = generate_episode(scene, straight_trajectory(rig, 0, 0, math.pi / 2, 10))
    _, z = render_frame(scene, ep.poses[0])
    _, z_empty = render_frame(Scene(), ep.poses[0])
    box_px = z < z_empty
    zs = np.stack([render_frame(scene, p)[1][box_px] for p in ep.poses])
    assert np.all(np.diff(zs, axis=0) < 0)


def test_episode_determinism():
    cfg = GeneratorConfig(frames=8)
    a, ka = make_episode(cfg, 5)
    b, kb = make_episode(cfg, 5)
    assert ka == kb
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.depths, b.depths)


def test_training_boxes_never_car_shaped():
    cfg = GeneratorConfig(frames=8)
    for i in range(6):
        ep, _ = make_episode(cfg, i)
        for b in ep.scene.boxes:
            assert max(b.size[:2]) < 4.5


def test_pose_validation():
    with pytest.raises(InvalidConfigError):
        CameraPose(0, 0, height=30)
    with pytest.raises(InvalidConfigError):
        CameraPose(0, 0, fov=math.pi)
    with pytest.raises(InvalidConfigError):
        Box((0, 0, 0), (1, 0, 1))


def test_pnm_round_trip(tmp_path, rng):
    rgb = rng.integers(0, 256, (3, 16, 32), dtype=np.uint8)
    grey = rng.integers(0, 256, (16, 32), dtype=np.uint8)
    write_pnm(tmp_path / "a.ppm", rgb)
    write_pnm(tmp_path / "a.pgm", grey)
    assert (tmp_path / "a.ppm").read_bytes()[:2] == b"P6"
    assert (tmp_path / "a.pgm").read_bytes()[:2] == b"P5"
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), grey)
    (tmp_path / "b.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ImageFormatError):
        read_pnm(tmp_path / "b.ppm")


@pytest.fixture(scope="module")
def small_dataset():
    cfg = GeneratorConfig(n_train=5, n_test=2, frames=4)
    return cfg, *generate_dataset(cfg)


def test_default_split_counts():
    cfg = GeneratorConfig()
    n_val = round(cfg.n_train * cfg.val_fraction)
    assert (cfg.n_train - n_val, n_val, cfg.n_test) == (19, 5, 6)


def test_dataset_round_trip(tmp_path, small_dataset):
    cfg, eps, splits, _ = small_dataset
    write_dataset(eps, tmp_path / "ds", splits)
    ds = read_dataset(tmp_path / "ds")
    assert [e["split"] for e in ds.manifest["episodes"]] == splits
    assert ds.manifest["height"] == 32 and ds.manifest["max_range"] == 50.0
    for a, b in zip(eps, ds.episodes):
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.depths, b.depths)
        assert a.poses == b.poses
    assert len(ds.split("test")) == 2 and len(ds.split("val")) == 1


def test_same_seed_same_bytes(tmp_path, small_dataset):
    cfg, eps, splits, _ = small_dataset
    eps2, splits2, _ = generate_dataset(cfg)
    write_dataset(eps, tmp_path / "a", splits)
    write_dataset(eps2, tmp_path / "b", splits2)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_dataset_integrity_errors(tmp_path, small_dataset):
    _, eps, splits, _ = small_dataset
    root = write_dataset(eps[:2], tmp_path / "ds", splits[:2])
    (root / "episode_0000" / "frame_00003.ppm").unlink()
    with pytest.raises(DatasetIntegrityError):
        read_dataset(root)
    root2 = write_dataset(eps[:1], tmp_path / "ds2")
    m = json.loads((root2 / "manifest.json").read_text())
    m["height"] = 16
    (root2 / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetIntegrityError):
        read_dataset(root2)
    with pytest.raises(DatasetIntegrityError):
        read_dataset(tmp_path / "missing")
