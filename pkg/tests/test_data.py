import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from semdepth.data import (
    CATEGORIES, CATEGORY_ID, CategoryTable, SceneConfig, SceneDataset, binarize_semantics,
    generate_dataset, generate_synthetic_scene, load_depth_png, load_kitti_triplet, one_hot_labels,
    read_scene, save_depth_png, write_scene,
)
from semdepth.sampler import SamplerConfig, inlier_rate, sample_quadruplets


def test_binarize_examples():
    assert binarize_semantics(np.full((3, 3), CATEGORY_ID["road"])).sum() == 0
    assert binarize_semantics(np.full((3, 3), CATEGORY_ID["car"])).min() == 1


@given(arrays(np.int64, (5, 6), elements=st.integers(0, len(CATEGORIES) - 1)))
def test_binarize_matches_lookup(full):
    table = CategoryTable()
    expected = np.vectorize(lambda i: 1 if CATEGORIES[i] in table.foreground else 0)(full)
    np.testing.assert_array_equal(binarize_semantics(full), expected)


def test_binarize_unmapped_id_names_it():
    with pytest.raises(ValueError, match="category id 42"):
        binarize_semantics(np.array([[0, 42]]))


def test_category_table_disjoint():
    with pytest.raises(ValueError, match="both"):
        CategoryTable(foreground=frozenset({"car"}), background=frozenset({"car"}))
    t = CategoryTable()
    assert t.foreground | t.background == set(CATEGORIES)


@given(arrays(np.int64, (4, 5), elements=st.integers(0, 19)))
def test_one_hot_round_trip(label):
    oh = one_hot_labels(label, 20)
    assert oh.shape == (20, 4, 5)
    np.testing.assert_array_equal(oh.sum(0), 1)
    np.testing.assert_array_equal(oh.argmax(0), label)
    np.testing.assert_array_equal(binarize_semantics(oh.argmax(0)), binarize_semantics(label))


def test_one_hot_binary_and_out_of_range():
    oh = one_hot_labels(np.array([[0, 1], [1, 0]]), 2)
    assert oh.shape == (2, 2, 2)
    with pytest.raises(ValueError, match="does not fit"):
        one_hot_labels(np.array([[2]]), 2)


def test_scene_is_deterministic():
    cfg = SceneConfig(noise_radius=2)
    a = generate_synthetic_scene(7, cfg)
    b = generate_synthetic_scene(7, cfg)
    for fa, fb in zip(a.triplet, b.triplet):
        np.testing.assert_array_equal(fa, fb)
    np.testing.assert_array_equal(a.gt_depth, b.gt_depth)
    np.testing.assert_array_equal(a.binary_label, b.binary_label)


def test_zero_motion_gives_identical_frames():
    s = generate_synthetic_scene(3, SceneConfig(motion=False))
    np.testing.assert_array_equal(s.triplet[0], s.triplet[1])
    np.testing.assert_array_equal(s.triplet[2], s.triplet[1])


def test_scene_contents(scene):
    assert len(scene.triplet) == 3
    assert scene.triplet[1].shape == (64, 192, 3)
    assert scene.gt_depth.shape == (64, 192) and (scene.gt_depth > 0).all()
    np.testing.assert_array_equal(binarize_semantics(scene.full_labels), scene.clean_binary_label)
    fg = scene.clean_binary_label == 1
    assert fg.any()
    assert scene.gt_depth[fg].min() >= 2.0 - 1e-6 and scene.gt_depth[fg].max() <= 30.0 + 1e-6
    # label noise moves the border but keeps the same objects
    assert (scene.binary_label != scene.clean_binary_label).any()


@pytest.mark.parametrize("seed", range(5))
def test_clean_labels_give_perfect_inliers(seed):
    s = generate_synthetic_scene(seed)
    mask = s.clean_binary_label
    q = sample_quadruplets(mask, np.zeros(mask.shape), SamplerConfig(), np.random.default_rng(0), r=0)
    assert len(q) > 0
    assert inlier_rate(q, mask) == 1.0


def test_depth_png_convention(tmp_path):
    path = tmp_path / "d.png"
    Image.fromarray(np.array([[2560, 0]], dtype=np.uint16)).save(path)
    np.testing.assert_array_equal(load_depth_png(path), [[10.0, 0.0]])
    save_depth_png(tmp_path / "e.png", np.array([[10.0, 0.0, 1.5]]))
    np.testing.assert_array_equal(load_depth_png(tmp_path / "e.png"), [[10.0, 0.0, 1.5]])


def test_scene_folder_round_trip(tmp_path, scene):
    write_scene(scene, tmp_path / "00000")
    back = read_scene(tmp_path / "00000")
    np.testing.assert_array_equal(back.binary_label, scene.binary_label)
    np.testing.assert_array_equal(back.full_labels, scene.full_labels)
    assert np.abs(back.gt_depth - scene.gt_depth).max() <= 1 / 512 + 1e-6
    assert np.abs(back.triplet[1] - scene.triplet[1]).max() <= 1 / 255
    np.testing.assert_allclose(back.poses["next"].matrix(), scene.poses["next"].matrix(), atol=1e-12)
    assert back.intrinsics.fx == pytest.approx(scene.intrinsics.fx)


def test_read_scene_missing_file(tmp_path):
    os.makedirs(tmp_path / "00000")
    with pytest.raises(FileNotFoundError, match="img_prev.png"):
        read_scene(tmp_path / "00000")


def test_dataset_iteration_is_deterministic(tmp_path):
    cfg = SceneConfig(supersample=1)
    generate_dataset(tmp_path / "a", 3, cfg, seed=4)
    generate_dataset(tmp_path / "b", 3, cfg, seed=4)
    da, db = SceneDataset(tmp_path / "a"), SceneDataset(tmp_path / "b")
    assert len(da) == 3
    for i in range(3):
        np.testing.assert_array_equal(da[i].triplet[1], db[i].triplet[1])


def _fake_kitti(root, with_depth=True, with_sem=True):
    drive = root / "2011_09_26" / "2011_09_26_drive_0001_sync"
    img_dir = drive / "image_02" / "data"
    img_dir.mkdir(parents=True)
    for i in (4, 5, 6):
        Image.fromarray(np.full((20, 64, 3), 10 * i, np.uint8)).save(img_dir / f"{i:010d}.png")
    with open(root / "2011_09_26" / "calib_cam_to_cam.txt", "w") as f:
        f.write("P_rect_02: 100 0 32 0 0 100 10 0 0 0 1 0\n")
    if with_depth:
        d = drive / "proj_depth" / "groundtruth" / "image_02"
        d.mkdir(parents=True)
        Image.fromarray(np.full((20, 64), 2560, np.uint16)).save(d / "0000000005.png")
    if with_sem:
        d = drive / "semantic" / "image_02"
        d.mkdir(parents=True)
        lab = np.zeros((20, 64), np.uint8)
        lab[:, 32:] = CATEGORY_ID["car"]
        Image.fromarray(lab).save(d / "0000000005.png")
    return "2011_09_26/2011_09_26_drive_0001_sync 5 l"


def test_kitti_triplet(tmp_path):
    fid = _fake_kitti(tmp_path)
    s = load_kitti_triplet(tmp_path, fid, size=(32, 64))
    # frames n-1, n, n+1
    assert [round(float(f.mean()) * 255) for f in s.triplet] == [40, 50, 60]
    assert s.triplet[0].shape == (32, 64, 3)
    assert np.all(s.gt_depth == 10.0)
    assert s.intrinsics.fy == pytest.approx(100 * 32 / 20)
    assert s.binary_label[:, 40:].min() == 1 and s.binary_label[:, :20].max() == 0


def test_kitti_missing_depth_and_frame(tmp_path):
    fid = _fake_kitti(tmp_path, with_depth=False, with_sem=False)
    s = load_kitti_triplet(tmp_path, fid, size=(32, 64))
    assert s.gt_depth is None and s.full_labels is None
    with pytest.raises(FileNotFoundError, match="0000000008"):
        load_kitti_triplet(tmp_path, fid.replace(" 5 ", " 9 "), size=(32, 64))
