import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcdiff import degrade as G
from pcdiff import geometry as geo
from pcdiff.geometry import Camera, PointCloud


def line(n=10):
    return PointCloud(np.c_[np.arange(float(n)), np.zeros(n), np.zeros(n)])


def rows(cloud):
    return {tuple(r) for r in np.hstack([cloud.positions, cloud.features if cloud.features is not None
                                         else np.zeros((cloud.n, 0))]).tolist()}


@pytest.fixture(scope="module")
def scene():
    return G.synth_scene("two-room", 512, seed=3)


# rgbd


def test_rgbd_principal_point():
    cam = Camera(10, 10, 2, 3, 6, 6)
    depth = np.zeros((6, 6))
    depth[3, 2] = 1.0
    rgb = np.zeros((6, 6, 3))
    rgb[3, 2] = [0.2, 0.4, 0.6]
    cloud = G.rgbd_to_cloud(rgb, depth, cam)
    assert cloud.n == 1
    assert np.allclose(cloud.positions, [[0, 0, 1]])
    assert np.allclose(cloud.features, [[0.2, 0.4, 0.6]])


def test_rgbd_all_too_deep():
    with pytest.raises(ValueError):
        G.rgbd_to_cloud(None, np.full((4, 4), 5.0), Camera(1, 1, 1, 1, 4, 4), depth_max=2.0)


def test_rgbd_ramp_matches_hand_backprojection():
    cam = Camera(2.0, 4.0, 1.5, 1.5, 4, 4)
    depth = 1.0 + 0.5 * np.arange(16).reshape(4, 4)
    cloud = G.rgbd_to_cloud(np.zeros((4, 4, 3)), depth, cam, depth_max=8.0)
    expected = []
    for i in range(4):
        for j in range(4):
            z = depth[i, j]
            if z <= 8.0:
                expected.append([(j - 1.5) * z / 2.0, (i - 1.5) * z / 4.0, z])
    assert np.allclose(cloud.positions, expected)


def test_rgbd_inverts_projection():
    rot, trans = G.look_at([2.0, -1.0, 1.5], [0, 0, 0])
    cam = Camera(20, 20, 8, 8, 16, 16, rot, trans)
    depth = np.random.default_rng(0).uniform(1, 3, (16, 16))
    cloud = G.rgbd_to_cloud(np.zeros((16, 16, 3)), depth, cam)
    uv, z, _ = geo.project_points(cam, cloud.positions)
    ii, jj = np.nonzero(depth > 0)
    assert np.allclose(uv, np.c_[jj, ii], atol=1e-4)
    assert np.allclose(z, depth[ii, jj], atol=1e-5)


def test_rgbd_rejects_negative_depth():
    with pytest.raises(ValueError):
        G.rgbd_to_cloud(None, -np.ones((2, 2)), Camera(1, 1, 0, 0, 2, 2))


# patch removal


def test_remove_nothing():
    c = line()
    assert np.array_equal(G.remove_patches(c, 0.0, 3).positions, c.positions)


def test_remove_half_line_from_endpoint():
    out = G.remove_patches(line(), 0.5, 1, centers=[0])
    assert out.positions[:, 0].tolist() == [5, 6, 7, 8, 9]


def test_remove_fraction_bound():
    with pytest.raises(ValueError):
        G.remove_patches(line(), 1.0, 1)


@given(st.integers(10, 300), st.floats(0, 0.95), st.integers(1, 6), st.integers(0, 1000))
def test_removed_count_and_subset(n, frac, patches, seed):
    c = PointCloud(np.random.default_rng(seed).standard_normal((n, 3)))
    out = G.remove_patches(c, frac, patches, seed)
    removed = n - out.n
    assert abs(removed - math.ceil(frac * n)) <= patches
    assert rows(out) <= rows(c)


# subsample


def test_subsample_examples():
    c = PointCloud(np.random.default_rng(0).standard_normal((2048, 3)))
    assert rows(G.subsample(c, 1.0)) == rows(c)
    assert G.subsample(c, 1 / 8).n == 256
    assert G.subsample(c, 1 / 1.3425).n == 1526
    with pytest.raises(ValueError):
        G.subsample(PointCloud(np.zeros((3, 3))), 0.1)


@given(st.integers(1, 200), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_subsample_is_subset(n, ratio, seed):
    c = PointCloud(np.random.default_rng(seed).standard_normal((n, 3)))
    if round(ratio * n) < 1:
        return
    out = G.subsample(c, ratio, seed)
    assert out.n == round(ratio * n)
    assert rows(out) <= rows(c)


# noise


def test_noise_zero_and_statistics():
    c = PointCloud(np.random.default_rng(0).standard_normal((2048, 3)))
    assert np.array_equal(G.add_noise(c, 0.0).positions, c.positions)
    unit = PointCloud(c.positions / geo.bounding_sphere_radius(c))
    out = G.add_noise(unit, 0.02, seed=4)
    disp = (out.positions.astype(np.float64) - unit.positions)
    n = disp.shape[0]
    assert np.all(np.abs(disp.std(axis=0, ddof=1) - 0.02) < 3 * 0.02 / math.sqrt(2 * (n - 1)))


def test_noise_keeps_count_and_colors():
    rng = np.random.default_rng(1)
    c = PointCloud(rng.standard_normal((50, 3)), rng.uniform(size=(50, 3)))
    out = G.add_noise(c, 0.05, seed=2)
    assert out.n == c.n and np.array_equal(out.features, c.features)


def test_noise_radius_is_fixed_by_caller():
    c = PointCloud(np.random.default_rng(0).standard_normal((200, 3)))
    once = G.add_noise(c, 0.05, seed=1, radius=2.0)
    again = G.add_noise(c, 0.05, seed=1, radius=2.0)
    assert np.array_equal(once.positions, again.positions)
    default = G.add_noise(c, 0.05, seed=1)
    ratio = (default.positions - c.positions) / (once.positions - c.positions)
    assert np.allclose(ratio, geo.bounding_sphere_radius(c) / 2.0, rtol=1e-3)


# pairs


def test_identity_spec_pair(scene):
    cloud, image, cam = scene
    pair = G.make_pair(cloud, image, cam, G.DegradationSpec())
    assert np.array_equal(pair.input_cloud.positions, pair.target_cloud.positions)
    assert np.array_equal(pair.input_cloud.features, cloud.features)


def test_combination_count(scene):
    cloud, image, cam = scene
    spec = G.DegradationSpec(**G.TASK_SPECS["combination"], seed=5)
    pair = G.make_pair(cloud, image, cam, spec, n_gt=512)
    assert pair.input_cloud.n == round(0.25 * (512 - math.ceil(0.3 * 512)))
    assert pair.input_cloud.features is None
    assert pair.target_cloud.n == 512


def test_pairs_are_deterministic_and_leave_target_alone(scene):
    cloud, image, cam = scene
    before = cloud.positions.copy()
    spec = G.DegradationSpec(0.3, 3, 0.5, 0.02, True, seed=9)
    a = G.make_pair(cloud, image, cam, spec)
    b = G.make_pair(cloud, image, cam, spec)
    assert a.input_cloud.positions.tobytes() == b.input_cloud.positions.tobytes()
    assert np.array_equal(cloud.positions, before)
    assert np.array_equal(a.target_cloud.positions, before)


def test_spec_validation():
    for bad in (dict(remove_fraction=1.0), dict(keep_ratio=0.0), dict(noise_level=0.06),
                dict(patch_count=0)):
        with pytest.raises(ValueError):
            G.DegradationSpec(**bad)
    with pytest.raises(ValueError):
        G.DegradationSpec.from_dict({"bogus": 1})


# scenes


def test_cube_points_on_surface():
    cloud, _, _ = G.synth_scene("cube", 400, seed=0)
    p = cloud.positions.astype(np.float64)
    assert np.abs(np.abs(p).max(axis=1) - 0.5).max() < 1e-6


@pytest.mark.parametrize("kind", G.SCENE_KINDS)
def test_render_matches_unoccluded_colors(kind):
    cloud, image, cam = G.synth_scene(kind, 300, seed=1)
    _, owner = geo.zbuffer(cam, cloud, 1.5)
    uv, _, inside = geo.project_points(cam, cloud)
    seen = 0
    for i in np.flatnonzero(inside):
        u, v = np.floor(uv[i]).astype(int)
        if owner[v, u] == i:
            assert np.allclose(image[v, u], cloud.features[i])
            seen += 1
    assert seen > 0


def test_scene_hash_is_seeded(tmp_path):
    def dump(seed, name):
        cloud, image, cam = G.synth_scene("checker-terrain", 128, seed=seed)
        G.write_pair(tmp_path / name, G.SamplePair(cloud, image, cam, cloud), G.DegradationSpec())
        return G.tree_hash(tmp_path / name)

    assert dump(1, "a") == dump(1, "b")
    assert dump(1, "a") != dump(2, "c")


def test_unknown_scene_and_small_n():
    with pytest.raises(ValueError):
        G.synth_scene("torus", 100)
    with pytest.raises(ValueError):
        G.synth_scene("cube", 63)


def test_pair_files_roundtrip(tmp_path, scene):
    cloud, image, cam = scene
    pair = G.make_pair(cloud, image, cam, G.DegradationSpec(keep_ratio=0.5))
    G.write_pair(tmp_path, pair, G.DegradationSpec(keep_ratio=0.5))
    back = G.read_pair(tmp_path)
    assert back.input_cloud.n == pair.input_cloud.n
    assert np.allclose(back.input_image, np.rint(image * 255) / 255, atol=1e-6)
    assert np.allclose(back.camera.rotation, cam.rotation)
    (tmp_path / "image.ppm").unlink()
    with pytest.raises(FileNotFoundError, match="image.ppm"):
        G.read_pair(tmp_path)
