import filecmp
import os

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from viflow import geometry
from viflow.data.dataset import (DatasetConfig, build_dataset, load_dataset, save_dataset,
                                 warp_consistency)
from viflow.data.imu import (GRAVITY, EUROC50, KITTI20, ImuNoise, layout_by_name, pack_imu_window,
                             synthesize_imu)
from viflow.data.kmeans import kmeans_fit, sffms_encode
from viflow.data.scene import Layer, Scene, make_scene, render_frame
from viflow.data.trajectory import Trajectory, TrajectoryConfig, generate_trajectory, pose_delta
from viflow.errors import ConfigError, ContractError, RenderError
from viflow.evaluation import residual_map
from viflow.geometry import CameraIntrinsics, Image, PoseSE3

STILL = dict(angular_std=(0, 0, 0), linear_std=(0, 0, 0))


# trajectories ---------------------------------------------------------------

def test_zero_velocity_is_constant_pose():
    traj = generate_trajectory(0, TrajectoryConfig(duration_s=1.0, **STILL))
    for pose in traj.poses:
        assert np.array_equal(pose.matrix, np.eye(4))


def test_straight_line():
    cfg = TrajectoryConfig(duration_s=1.0, linear_mean=(0.2, 0.0, 0.1), position_restoring=0.0, **STILL)
    traj = generate_trajectory(0, cfg)
    np.testing.assert_allclose(traj.positions, traj.times[:, None] * [0.2, 0.0, 0.1], atol=1e-12)
    assert np.allclose(traj.rotations, np.eye(3))


def test_timestamps_increase_and_poses_valid():
    traj = generate_trajectory(5, TrajectoryConfig(duration_s=2.0))
    assert np.all(np.diff(traj.times) > 0)
    assert len(traj.frame_indices()) == 41


@pytest.mark.parametrize("seed", range(3))
def test_bimodal_regimes_separate_under_two_means(seed):
    traj = generate_trajectory(seed, TrajectoryConfig(duration_s=20.0, bimodal=True))
    frames = traj.frame_indices()
    deltas = np.stack([pose_delta(traj.poses[a], traj.poses[b]) for a, b in zip(frames[:-1], frames[1:])])
    truth = traj.regimes[frames[:-1]]
    labels = kmeans_fit(deltas, 2, seed=0).labels
    purity = max(np.mean(labels == truth), np.mean(labels != truth))
    assert purity >= 0.95


def test_trajectory_config_validation():
    with pytest.raises(ConfigError):
        TrajectoryConfig(duration_s=0)
    with pytest.raises(ConfigError):
        TrajectoryConfig(linear_std=(1.0, 2.0))


# IMU ------------------------------------------------------------------------

def test_constant_pose_reads_gravity_reaction():
    tilt = Rotation.from_rotvec([0.3, -0.2, 0.1]).as_matrix()
    n = 50
    traj = Trajectory(np.arange(n) / 200.0, [PoseSE3.from_rt(tilt, [1.0, 2.0, 3.0])] * n, 200.0, 20.0)
    stream = synthesize_imu(traj)
    assert np.abs(stream.gyro).max() < 1e-12
    # an accelerometer at rest measures the reaction to gravity, expressed in the body frame
    np.testing.assert_allclose(stream.accel, np.broadcast_to(-tilt.T @ GRAVITY, stream.accel.shape),
                               atol=1e-9)


def test_uniform_yaw_rate():
    omega, rate = 0.7, 200.0
    t = np.arange(100) / rate
    poses = [PoseSE3.from_rt(Rotation.from_rotvec([0, 0, omega * ti]).as_matrix(), np.zeros(3)) for ti in t]
    stream = synthesize_imu(Trajectory(t, poses, rate, 20.0))
    np.testing.assert_allclose(stream.gyro[:, 2], omega, atol=(1 / rate) ** 2)
    assert np.abs(stream.gyro[:, :2]).max() < 1e-12


def test_circular_motion_specific_force():
    # camera moving on a circle of radius r at angular rate w without rotating
    r, w, rate = 0.5, 2.0, 1000.0
    t = np.arange(400) / rate
    poses = [PoseSE3.from_rt(np.eye(3), [r * np.cos(w * ti), 0.0, r * np.sin(w * ti)]) for ti in t]
    stream = synthesize_imu(Trajectory(t, poses, rate, 20.0))
    ts = stream.timestamps
    centripetal = -r * w ** 2 * np.stack([np.cos(w * ts), np.zeros_like(ts), np.sin(w * ts)], axis=1)
    np.testing.assert_allclose(stream.accel, centripetal - GRAVITY, atol=1e-4)


def test_noise_is_seeded():
    traj = generate_trajectory(1, TrajectoryConfig(duration_s=1.0))
    a = synthesize_imu(traj, noise=ImuNoise(0.01, 0.1, seed=4))
    b = synthesize_imu(traj, noise=ImuNoise(0.01, 0.1, seed=4))
    c = synthesize_imu(traj, noise=ImuNoise(0.01, 0.1, seed=5))
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    clean = synthesize_imu(traj)
    assert np.array_equal(clean.samples, synthesize_imu(traj).samples)


def test_resampled_rate():
    traj = generate_trajectory(2, TrajectoryConfig(duration_s=1.0))
    stream = synthesize_imu(traj, imu_rate_hz=400.0)
    assert np.allclose(np.diff(stream.timestamps), 1 / 400.0)
    with pytest.raises(ContractError):
        synthesize_imu(traj, imu_rate_hz=10.0)


@pytest.fixture(scope="module")
def moving_stream():
    return synthesize_imu(generate_trajectory(3, TrajectoryConfig(duration_s=3.0)))


@pytest.mark.parametrize("lookahead", [1, 2, 3, 4])
def test_euroc50_zero_pattern(moving_stream, lookahead):
    t_i = 1.0
    window = pack_imu_window(moving_stream, t_i, t_i + lookahead * 0.05, EUROC50)
    assert window.shape == (50, 6)
    filled = 10 + 10 * lookahead
    assert not np.any(window[filled:])
    assert np.all(np.any(window[:filled] != 0, axis=1))
    # history rows are the ten samples strictly before capture
    start = int(np.searchsorted(moving_stream.timestamps, t_i - 1e-9))
    assert np.array_equal(window[:10], moving_stream.samples[start - 10:start])
    assert moving_stream.timestamps[start] == pytest.approx(t_i)


def test_kitti20_shape(moving_stream):
    window = pack_imu_window(moving_stream, 1.0, 1.1, KITTI20)
    assert window.shape == (20, 6)
    assert np.all(np.any(window != 0, axis=1))


def test_window_coverage_errors(moving_stream):
    with pytest.raises(ContractError):
        pack_imu_window(moving_stream, 0.02, 0.07)
    with pytest.raises(ContractError):
        pack_imu_window(moving_stream, 2.9, 3.2)
    with pytest.raises(ContractError):
        pack_imu_window(moving_stream, 1.0, 1.3)  # six frame periods overflow 50 rows
    with pytest.raises(ContractError):
        layout_by_name("EUROC51")


# K-Means ---------------------------------------------------------------------

def test_kmeans_distinct_points():
    pts = np.random.default_rng(0).standard_normal((6, 3))
    cb = kmeans_fit(pts, 6, seed=1)
    assert cb.inertia == 0.0
    assert sorted(map(tuple, cb.centroids)) == sorted(map(tuple, pts))


def test_kmeans_two_blobs():
    rng = np.random.default_rng(1)
    sigma = 0.1
    means = np.array([[0.0] * 6, [2.0] * 6])
    pts = np.concatenate([m + sigma * rng.standard_normal((200, 6)) for m in means])
    cb = kmeans_fit(pts, 2, seed=0)
    for m in means:
        assert np.min(np.linalg.norm(cb.centroids - m, axis=1)) < 3 * sigma


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_inertia_monotone_and_converged(seed):
    pts = np.random.default_rng(seed).standard_normal((300, 6))
    cb = kmeans_fit(pts, 20, seed=seed)
    assert all(b <= a + 1e-9 for a, b in zip(cb.inertia_history, cb.inertia_history[1:]))
    d = np.sum((pts[:, None] - cb.centroids[None]) ** 2, axis=-1)
    assert np.array_equal(cb.labels, np.argmin(d, axis=1))


def test_kmeans_empty_cluster_reseeded():
    # duplicated points force k-means++ to reuse a location, emptying a cluster
    pts = np.array([[0.0, 0.0]] * 5 + [[10.0, 0.0]] * 5 + [[10.0, 1.0]])
    cb = kmeans_fit(pts, 3, seed=0)
    assert np.all(np.bincount(cb.labels, minlength=3) > 0)
    assert np.all(np.isfinite(cb.centroids))


def test_kmeans_needs_k_points():
    with pytest.raises(ContractError):
        kmeans_fit(np.zeros((3, 6)), 4)


def test_sffms_encode():
    rng = np.random.default_rng(2)
    cb = kmeans_fit(rng.standard_normal((100, 6)), 20, seed=0)
    code, err = sffms_encode(cb.centroids[7], cb)
    assert err == 0.0 and code[7] == 1.0
    for delta in rng.standard_normal((50, 6)):
        code, err = sffms_encode(delta, cb)
        assert code.sum() == 1.0 and np.count_nonzero(code) == 1
        best, best_d = 0, np.inf
        for j, c in enumerate(cb.centroids):
            dist = np.sqrt(np.sum((delta - c) ** 2))
            if dist < best_d:
                best, best_d = j, dist
        assert code[best] == 1.0 and err == pytest.approx(best_d, rel=1e-12)


def sffms_errors(angular_std, linear_std):
    traj = generate_trajectory(0, TrajectoryConfig(duration_s=40.0, angular_std=angular_std,
                                                   linear_std=linear_std))
    frames = traj.frame_indices()
    deltas = np.stack([pose_delta(traj.poses[a], traj.poses[b]) for a, b in zip(frames[:-1], frames[1:])])
    cb = kmeans_fit(deltas, 20, seed=0)
    return np.array([sffms_encode(d, cb)[1] for d in deltas])


def test_sffms_error_spread_grows_with_motion_variance():
    low = sffms_errors((0.1, 0.1, 0.03), (0.03, 0.03, 0.01))
    high = sffms_errors((0.8, 0.8, 0.3), (0.3, 0.3, 0.1))
    assert low.std() < high.std()


# rendering -------------------------------------------------------------------

def test_identity_fronto_parallel_is_texture_crop():
    tex = Image(np.random.default_rng(3).uniform(size=(32, 32)))
    scene = Scene([tex], [Layer(1.0)], texel_size=0.1)
    # one pixel spans exactly one texel at this focal length and depth
    img, depth = render_frame(scene, PoseSE3.identity(), CameraIntrinsics(10.0, 10.0, 0.0, 0.0), 8)
    np.testing.assert_allclose(img.data, tex.data[:8, :8], atol=1e-12)
    assert np.all(depth.data == 1.0)


def test_depth_is_analytic_plane_depth():
    scene = make_scene(np.random.default_rng(4))
    bg = scene.layers[0].depth
    scene = Scene(scene.textures, scene.layers[:1])
    rot = Rotation.from_rotvec([0.1, -0.15, 0.05]).as_matrix()
    pose = PoseSE3.from_rt(rot, [0.2, -0.1, 0.5])
    k = CameraIntrinsics(40.0, 40.0, 15.5, 15.5)
    _, depth = render_frame(scene, pose, k, 32)
    v, u = np.mgrid[0:32, 0:32]
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u, dtype=float)], axis=-1)
    expected = (bg - 0.5) / (rays @ rot.T)[..., 2]
    np.testing.assert_allclose(depth.data, expected, rtol=1e-12)


def test_render_error_when_nothing_is_seen():
    scene = Scene([Image(np.zeros((4, 4)))], [Layer(1.0, extent=(5.0, 6.0, 5.0, 6.0))])
    with pytest.raises(RenderError):
        render_frame(scene, PoseSE3.identity(), CameraIntrinsics(10, 10, 3.5, 3.5), 8)


def test_scene_rejects_fast_patch():
    with pytest.raises(ValueError):
        Scene([Image(np.zeros((4, 4)))], [Layer(1.0, velocity=(3.0, 0.0))], max_patch_speed=2.0)


# datasets --------------------------------------------------------------------

SMALL = DatasetConfig(image_size=32, focal=28.0, trajectories=2, duration_s=2.5, anomaly_exemplars=3)


@pytest.fixture(scope="module")
def small_dataset():
    return build_dataset(11, SMALL)


def test_split_fractions(small_dataset):
    counts = small_dataset.counts()
    total = counts["train"] + counts["test"]
    assert abs(counts["train"] - 0.8 * total) <= 1
    assert counts["anomaly"] == 3
    assert set(small_dataset.split("train").ids).isdisjoint(small_dataset.split("test").ids)
    with pytest.raises(ContractError):
        small_dataset.split("validation")


def test_exemplar_contents(small_dataset):
    train = small_dataset.split("train")
    assert set(np.unique(train.lookaheads)) <= {1, 2, 3, 4}
    assert train.imu.shape[1:] == (50, 6) and train.sffms.shape[1:] == (20,)
    assert np.all(train.sffms.sum(axis=1) == 1.0)
    for i in range(len(train)):
        look = train.lookaheads[i]
        assert not train.imu[i, 10 + 10 * look:].any()


def test_rigid_exemplars_pass_warp_consistency(small_dataset):
    for name in ("train", "test"):
        split = small_dataset.split(name)
        for i in range(len(split)):
            assert warp_consistency(split.exemplar(i)) < 0.02


def test_anomaly_patch_residual_contrast(small_dataset):
    split = small_dataset.split("anomaly")
    for i in range(len(split)):
        ex = split.exemplar(i)
        recon = geometry.bilinear_sample(ex.target, geometry.flow_to_grid(ex.flow))
        res = residual_map(ex.source, recon, ex.flow.valid).data
        inside = res[ex.patch_mask & ex.flow.valid].mean()
        outside = res[~ex.patch_mask & ex.flow.valid].mean()
        assert inside >= 3 * outside


def test_save_load_round_trip(small_dataset, tmp_path):
    save_dataset(small_dataset, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert loaded.counts() == small_dataset.counts()
    for name, split in small_dataset.splits.items():
        other = loaded.split(name)
        assert other.ids == split.ids
        for attr in split.ARRAYS:
            assert np.array_equal(getattr(other, attr), getattr(split, attr)), attr
        if split.patch_masks is not None:
            assert np.array_equal(other.patch_masks, split.patch_masks)
    assert np.array_equal(loaded.codebook.centroids, small_dataset.codebook.centroids)


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    for name in cmp.common_files:
        if not filecmp.cmp(os.path.join(a, name), os.path.join(b, name), shallow=False):
            return False
    return all(tree_equal(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


def test_generation_is_deterministic(small_dataset, tmp_path):
    cfg = DatasetConfig(image_size=32, focal=28.0, trajectories=1, duration_s=1.5)
    save_dataset(build_dataset(5, cfg), tmp_path / "a")
    save_dataset(build_dataset(5, cfg), tmp_path / "b")
    assert tree_equal(tmp_path / "a", tmp_path / "b")


def test_dataset_config_strict():
    with pytest.raises(ConfigError, match="bogus"):
        DatasetConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="wobble"):
        DatasetConfig(trajectory={"wobble": 1})
    assert DatasetConfig.from_dict(SMALL.to_dict()) == SMALL
