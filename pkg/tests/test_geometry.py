import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from viflow import geometry as g
from viflow.errors import InvalidDimensionError, InvalidParameterError, InvalidPoseError, ShapeError


def translate(x=0.0, y=0.0, z=0.0):
    return g.PoseSE3.from_rt(np.eye(3), [x, y, z])


def random_pose(rng, scale=0.3):
    r = Rotation.from_rotvec(rng.normal(scale=scale, size=3)).as_matrix()
    return g.PoseSE3.from_rt(r, rng.normal(scale=scale, size=3))


# --- value types -------------------------------------------------------------

def test_image_rejects_out_of_range_and_nonfinite():
    with pytest.raises(InvalidParameterError):
        g.Image(np.array([[0.0, 1.5]]))
    with pytest.raises(InvalidParameterError):
        g.Image(np.array([[np.nan, 0.0]]))
    with pytest.raises(ShapeError):
        g.Image(np.zeros(4))


def test_image_is_immutable():
    img = g.Image(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        img.data[0, 0] = 1.0


def test_depth_map_marks_nonpositive_invalid():
    d = g.DepthMap(np.array([[1.0, -1.0], [np.inf, 2.0]]))
    assert d.valid.tolist() == [[True, False], [False, True]]
    assert d.data[0, 1] == 0.0


def test_affine_params_reject_nonfinite():
    with pytest.raises(InvalidParameterError):
        g.AffineParams([1, 0, np.nan, 0, 1, 0])


def test_flow_field_invalidates_nonfinite():
    f = g.FlowField(np.array([[[np.nan, 0.0], [1.0, 2.0]]]))
    assert f.valid.tolist() == [[False, True]]


@pytest.mark.parametrize("bad", [
    np.diag([1.0, 1.0, 1.0, 2.0]),                      # bottom row
    np.diag([1.0, 1.0, -1.0, 1.0]),                     # reflection
    np.diag([1.0, 1.0 + 1e-6, 1.0, 1.0]),               # not orthonormal
    np.eye(3),                                          # wrong shape
])
def test_pose_rejects_invalid(bad):
    with pytest.raises(InvalidPoseError):
        g.PoseSE3(bad)


def test_intrinsics_reject_nonpositive_focal():
    with pytest.raises(InvalidParameterError):
        g.CameraIntrinsics(0.0, 1.0, 0.0, 0.0)


# --- grids -------------------------------------------------------------------

def test_base_grid_corners_2x2():
    c = g.make_base_grid(2, 2).coords
    assert c[0, 0].tolist() == [-1, -1]
    assert c[0, 1].tolist() == [1, -1]
    assert c[1, 0].tolist() == [-1, 1]
    assert c[1, 1].tolist() == [1, 1]


def test_base_grid_center_3x3():
    assert g.make_base_grid(3, 3).coords[1, 1].tolist() == [0.0, 0.0]


def test_base_grid_matches_linspace():
    c = g.make_base_grid(2, 4).coords
    np.testing.assert_allclose(c[0, :, 0], np.linspace(-1, 1, 4), atol=1e-15)
    np.testing.assert_allclose(c[0, :, 0], [-1, -1 / 3, 1 / 3, 1], atol=1e-15)


@pytest.mark.parametrize("shape", [(1, 4), (4, 1), (0, 0)])
def test_base_grid_rejects_small(shape):
    with pytest.raises(InvalidDimensionError):
        g.make_base_grid(*shape)


@given(st.integers(2, 12), st.integers(2, 12))
def test_identity_affine_is_base_grid_bitwise(h, w):
    a = g.affine_grid(g.AffineParams.identity(), h, w).coords
    assert np.array_equal(a, g.make_base_grid(h, w).coords)


def test_affine_translation_shifts_x():
    base = g.make_base_grid(3, 3).coords
    out = g.affine_grid(np.array([[1, 0, 0.5], [0, 1, 0]]), 3, 3).coords
    np.testing.assert_array_equal(out[..., 0], base[..., 0] + 0.5)
    np.testing.assert_array_equal(out[..., 1], base[..., 1])


def test_affine_rotation_matches_matrix_apply():
    theta = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]])
    base = g.make_base_grid(3, 3).coords
    out = g.affine_grid(theta, 3, 3).coords
    for r in range(3):
        for c in range(3):
            x, y = base[r, c]
            np.testing.assert_allclose(out[r, c], theta @ [x, y, 1.0])


def test_batched_affine_coords_agree_with_single():
    rng = np.random.default_rng(0)
    thetas = rng.normal(size=(4, 2, 3))
    batched = g.affine_coords(thetas, 5, 6)
    for i in range(4):
        assert np.array_equal(batched[i], g.affine_coords(thetas[i], 5, 6))


def test_compose_shifts():
    base = g.make_base_grid(4, 5)
    zero = g.ShiftField(np.zeros((4, 5, 2)))
    assert np.array_equal(g.compose_shifts(base, zero).coords, base.coords)
    const = g.ShiftField(np.broadcast_to([0.1, 0.0], (4, 5, 2)))
    out = g.compose_shifts(base, const).coords
    np.testing.assert_array_equal(out[..., 0], base.coords[..., 0] + 0.1)
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5, 2)), rng.normal(size=(4, 5, 2))
    out = g.compose_shifts(g.SampleGrid(a), g.ShiftField(b)).coords
    for idx in np.ndindex(4, 5, 2):
        assert out[idx] == a[idx] + b[idx]
    with pytest.raises(ShapeError):
        g.compose_shifts(base, g.ShiftField(np.zeros((4, 4, 2))))


# --- sampling ----------------------------------------------------------------

def bilinear_oracle(img, x, y):
    """Per-pixel reference: align-corners, zero outside [-1, 1]."""
    h, w = img.shape
    if not (-1 <= x <= 1 and -1 <= y <= 1):
        return 0.0
    px, py = (x + 1) / 2 * (w - 1), (y + 1) / 2 * (h - 1)
    total = 0.0
    for r in range(h):
        for c in range(w):
            wgt = max(0.0, 1 - abs(px - c)) * max(0.0, 1 - abs(py - r))
            total += wgt * img[r, c]
    return total


def test_identity_sampling_exact():
    rng = np.random.default_rng(2)
    img = g.Image(rng.uniform(size=(7, 9)))
    out = g.bilinear_sample(img, g.make_base_grid(7, 9))
    assert np.max(np.abs(out.data - img.data)) <= 1e-6
    np.testing.assert_allclose(out.data, img.data, atol=1e-15)


def test_hand_bilinear_center():
    # values above 1 are outside the Image domain, so use the raw kernel
    out = g.bilinear_kernel(np.array([[0.0, 1.0], [2.0, 3.0]]), np.zeros((1, 1, 2))).out
    assert out[0, 0] == 1.5


def test_out_of_bounds_samples_zero():
    img = g.Image(np.full((3, 3), 0.7))
    out = g.bilinear_sample(img, g.SampleGrid(np.full((1, 1, 2), -3.0)))
    assert out.data[0, 0] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_sampling_matches_oracle(h, w, n, seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(h, w))
    grid = rng.uniform(-1.2, 1.2, size=(n, n, 2))
    grid[0, 0] = [1.0, 1.0]  # exact far corner
    out = g.bilinear_kernel(img, grid).out
    for idx in np.ndindex(n, n):
        assert abs(out[idx] - bilinear_oracle(img, *grid[idx])) < 1e-10


# --- flow <-> grid -----------------------------------------------------------

def test_base_grid_zero_flow():
    f = g.grid_to_flow(g.make_base_grid(5, 6))
    np.testing.assert_allclose(f.vectors, 0.0, atol=1e-14)


def test_unit_pixel_offset():
    w = 6
    base = g.make_base_grid(4, w).coords.copy()
    base[..., 0] += 2.0 / (w - 1)
    f = g.grid_to_flow(g.SampleGrid(base))
    np.testing.assert_allclose(f.vectors[..., 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(f.vectors[..., 1], 0.0, atol=1e-12)


@given(arrays(np.float64, (4, 5, 2), elements=st.floats(-2, 2)))
def test_flow_grid_round_trip(coords):
    grid = g.SampleGrid(coords)
    back = g.flow_to_grid(g.grid_to_flow(grid)).coords
    np.testing.assert_allclose(back, coords, atol=1e-12, rtol=0)


# --- poses -------------------------------------------------------------------

def test_relative_pose_equal_is_identity():
    a = random_pose(np.random.default_rng(3))
    np.testing.assert_allclose(g.relative_pose(a, a).matrix, np.eye(4), atol=1e-12)


def test_relative_pose_literal_translation():
    rel = g.relative_pose(g.PoseSE3.identity(), translate(0.1))
    np.testing.assert_allclose(rel.translation, [0.1, 0, 0], atol=1e-15)


@given(st.integers(0, 2 ** 31))
def test_relative_pose_inverse_and_chain(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    ab, ba = g.relative_pose(a, b), g.relative_pose(b, a)
    np.testing.assert_allclose((ab @ ba).matrix, np.eye(4), atol=1e-10)
    chained = g.relative_pose(a, b) @ g.relative_pose(b, c)
    np.testing.assert_allclose(g.relative_pose(a, c).matrix, chained.matrix, atol=1e-9)


def test_relative_pose_rejects_non_pose():
    with pytest.raises(InvalidPoseError):
        g.relative_pose(np.eye(4), g.PoseSE3.identity())


# --- ground-truth flow -------------------------------------------------------

K100 = g.CameraIntrinsics(100.0, 100.0, 50.0, 50.0)


def test_equal_poses_zero_flow():
    rng = np.random.default_rng(4)
    depth = g.DepthMap(rng.uniform(1, 5, size=(10, 12)))
    pose = random_pose(rng, 0.1)
    f = g.ground_truth_flow(g.CameraIntrinsics(20, 20, 6, 5), depth, pose, pose)
    np.testing.assert_allclose(f.vectors[f.valid], 0.0, atol=1e-12)
    # inv(pose) @ pose is identity only up to rounding, so borders may slip out of frame
    assert f.valid[1:-1, 1:-1].all()
    exact = g.ground_truth_flow(g.CameraIntrinsics(20, 20, 6, 5), depth, g.PoseSE3.identity(),
                                g.PoseSE3.identity())
    assert exact.valid.all() and not exact.vectors.any()


def test_hand_lateral_translation():
    depth = g.DepthMap(np.full((101, 101), 2.0))
    f = g.ground_truth_flow(K100, depth, g.PoseSE3.identity(), translate(0.1))
    assert f.vectors[50, 50].tolist() == [-5.0, 0.0]


def test_forward_backward_round_trip():
    rng = np.random.default_rng(5)
    k = g.CameraIntrinsics(60, 60, 31.5, 31.5)
    h0, h1 = g.PoseSE3.identity(), random_pose(rng, 0.05)
    u, v = rng.uniform(10, 54, size=(2, 200))
    z = rng.uniform(2, 6, size=200)
    u1, v1, z1 = g.reproject_points(k, u, v, z, h0, h1)
    ub, vb, _ = g.reproject_points(k, u1, v1, z1, h1, h0)
    assert np.max(np.hypot(ub - u, vb - v)) < 1e-6


@given(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.floats(-0.5, 0.5), st.floats(1.5, 8.0))
def test_fronto_parallel_plane_flow_is_affine(tx, ty, tz, depth):
    h, w = 9, 11
    k = g.CameraIntrinsics(40, 44, 5.0, 4.0)
    f = g.ground_truth_flow(k, g.DepthMap(np.full((h, w), depth)), g.PoseSE3.identity(),
                            translate(tx, ty, tz))
    vv, uu = np.mgrid[0:h, 0:w]
    ok = f.valid.ravel()
    assert ok.sum() >= 3
    design = np.stack([uu.ravel(), vv.ravel(), np.ones(h * w)], axis=1)[ok]
    for ch in range(2):
        target = (f.vectors[..., ch] + (uu, vv)[ch]).ravel()[ok]
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        assert np.max(np.abs(design @ coef - target)) < 1e-6


def test_points_behind_camera_invalid():
    depth = g.DepthMap(np.full((5, 5), 1.0))
    f = g.ground_truth_flow(g.CameraIntrinsics(5, 5, 2, 2), depth, g.PoseSE3.identity(), translate(z=2.0))
    assert not f.valid.any()


def test_occlusion_flags_hidden_pixels():
    k = g.CameraIntrinsics(10, 10, 2, 2)
    depth0 = g.DepthMap(np.full((5, 5), 4.0))
    depth1 = np.full((5, 5), 4.0)
    depth1[2, 2] = 1.0  # something nearer sits where pixel (2,2) lands
    f = g.ground_truth_flow(k, depth0, g.PoseSE3.identity(), g.PoseSE3.identity(), g.DepthMap(depth1))
    assert not f.valid[2, 2]
    assert f.valid.sum() == 24


# --- crop --------------------------------------------------------------------

def test_center_crop():
    img = g.Image(np.arange(16.0).reshape(4, 4) / 16)
    assert np.array_equal(g.center_crop(img, 4).data, img.data)
    assert np.array_equal(g.center_crop(img, 2).data, img.data[1:3, 1:3])
    img5 = g.Image(np.arange(25.0).reshape(5, 5) / 25)
    assert np.array_equal(g.center_crop(img5, 2).data, img5.data[1:3, 1:3])
    with pytest.raises(InvalidDimensionError):
        g.center_crop(img, 5)
