import json
import math

import numpy as np
import pytest
from PIL import Image

from few_tensorf.data_processing.blender_loader import (
    DEFAULT_BLENDER_VIEW_IDS,
    CameraModel,
    PosedImage,
    few_shot_subset,
    generate_rays,
    load_scene,
    load_split,
    rays_from_images,
)
from few_tensorf.errors import DatasetError

BLENDER_ANGLE = 0.6911112070083618


def _write_scene(root, frames, size=(4, 3), meta_extra=None, split="train"):
    root.mkdir(parents=True, exist_ok=True)
    (root / split).mkdir(exist_ok=True)
    entries = []
    for i, rgba in enumerate(frames):
        Image.fromarray(rgba).save(root / split / f"r_{i}.png")
        entries.append({"file_path": f"./{split}/r_{i}", "transform_matrix": np.eye(4).tolist()})
    meta = {"camera_angle_x": BLENDER_ANGLE, "frames": entries, **(meta_extra or {})}
    (root / f"transforms_{split}.json").write_text(json.dumps(meta), encoding="utf-8")


def _rgba(width=4, height=3, value=(255, 0, 0, 255)):
    return np.tile(np.array(value, dtype=np.uint8), (height, width, 1))


def test_focal_of_blender_camera():
    camera = CameraModel(800, 800, BLENDER_ANGLE, np.eye(4))
    assert camera.focal == pytest.approx(1111.11, abs=0.01)


def test_camera_rejects_invalid_pose():
    with pytest.raises(DatasetError):
        CameraModel(4, 4, 0.5, np.eye(3))
    with pytest.raises(DatasetError):
        CameraModel(4, 4, 0.5, np.diag([2.0, 1.0, 1.0, 1.0]))
    with pytest.raises(DatasetError):
        CameraModel(4, 4, 4.0, np.eye(4))


def test_center_pixel_looks_down_negative_z():
    rays = generate_rays(CameraModel(3, 3, 1.0, np.eye(4)), np.array([4]))
    np.testing.assert_allclose(rays.directions[0], [0.0, 0.0, -1.0], atol=1e-12)
    np.testing.assert_array_equal(rays.origins[0], 0.0)


def test_pixel_one_focal_length_right_of_center():
    width = 5
    angle = 2 * math.atan(0.5 * width / 2.0)
    camera = CameraModel(width, width, angle, np.eye(4))
    assert camera.focal == pytest.approx(2.0)
    rays = generate_rays(camera, np.array([2 * width + 4]))
    np.testing.assert_allclose(rays.directions[0], np.array([1.0, 0.0, -1.0]) / math.sqrt(2), atol=1e-12)


def test_translated_pose_moves_every_origin():
    pose = np.eye(4)
    pose[:3, 3] = [0.0, 0.0, 4.0]
    rays = generate_rays(CameraModel(6, 4, 0.8, pose))
    assert len(rays) == 24
    np.testing.assert_array_equal(rays.origins, np.tile([0.0, 0.0, 4.0], (24, 1)))
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0)


def test_pixel_indices_out_of_range_are_rejected():
    with pytest.raises(DatasetError):
        generate_rays(CameraModel(2, 2, 0.8, np.eye(4)), np.array([4]))


def test_load_split_composites_alpha_over_background(tmp_path):
    half = _rgba(value=(255, 0, 0, 0))
    _write_scene(tmp_path, [_rgba(), half], meta_extra={"w": 4, "h": 3})
    images = load_split(tmp_path, "train", background=(0.0, 0.0, 1.0))
    assert len(images) == 2
    assert images[0].camera.width == 4 and images[0].camera.height == 3
    np.testing.assert_allclose(images[0].rgb, np.tile([1.0, 0.0, 0.0], (3, 4, 1)))
    np.testing.assert_allclose(images[1].rgb, np.tile([0.0, 0.0, 1.0], (3, 4, 1)))
    np.testing.assert_array_equal(images[1].alpha, 0.0)


def test_load_split_with_downscale(tmp_path):
    _write_scene(tmp_path, [_rgba(8, 6)], meta_extra={"w": 8, "h": 6})
    images = load_split(tmp_path, "train", downscale=2)
    assert images[0].rgb.shape == (3, 4, 3)


def test_empty_frames_give_empty_split(tmp_path):
    _write_scene(tmp_path, [])
    assert load_split(tmp_path, "train") == []


def test_missing_image_is_reported(tmp_path):
    _write_scene(tmp_path, [_rgba()])
    (tmp_path / "train" / "r_0.png").unlink()
    with pytest.raises(FileNotFoundError, match="r_0.png"):
        load_split(tmp_path, "train")


def test_malformed_json_is_reported(tmp_path):
    (tmp_path / "transforms_train.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(DatasetError, match="transforms_train.json"):
        load_split(tmp_path, "train")


def test_size_mismatch_is_reported(tmp_path):
    _write_scene(tmp_path, [_rgba()], meta_extra={"w": 5})
    with pytest.raises(DatasetError):
        load_split(tmp_path, "train")


def test_load_scene_reads_available_splits(tmp_path):
    _write_scene(tmp_path, [_rgba()])
    _write_scene(tmp_path, [_rgba(), _rgba()], split="test")
    scene = load_scene(tmp_path)
    assert sorted(scene) == ["test", "train"]
    assert len(scene["test"]) == 2
    with pytest.raises(FileNotFoundError):
        load_scene(tmp_path / "missing")


def _fake_images(n):
    camera = CameraModel(2, 2, 0.8, np.eye(4))
    return [PosedImage(camera, np.full((2, 2, 3), i / max(n, 1)), np.ones((2, 2))) for i in range(n)]


def test_explicit_view_ids_keep_order():
    images = _fake_images(100)
    subset, ids = few_shot_subset(images, view_ids=DEFAULT_BLENDER_VIEW_IDS)
    assert ids == list(DEFAULT_BLENDER_VIEW_IDS)
    assert subset == [images[i] for i in DEFAULT_BLENDER_VIEW_IDS]


def test_count_subset_is_seeded_and_spread():
    images = _fake_images(20)
    _, first = few_shot_subset(images, count=4, seed=7)
    _, second = few_shot_subset(images, count=4, seed=7)
    assert first == second
    assert len(set(first)) == 4
    assert all(0 <= i < 20 for i in first)


def test_full_count_is_identity():
    images = _fake_images(5)
    subset, ids = few_shot_subset(images, count=5, seed=1)
    assert ids == [0, 1, 2, 3, 4]
    assert subset == images
    assert few_shot_subset(images)[1] == [0, 1, 2, 3, 4]


def test_subset_errors():
    images = _fake_images(3)
    with pytest.raises(DatasetError):
        few_shot_subset(images, count=4)
    with pytest.raises(DatasetError):
        few_shot_subset(images, view_ids=[0, 5])


def test_rays_from_images_attach_pixel_colors():
    images = _fake_images(3)
    rays = rays_from_images(images)
    assert len(rays) == 12
    np.testing.assert_array_equal(rays.colors[4:8], images[1].rgb.reshape(-1, 3))
    assert len(rays_from_images([])) == 0
