"""Smooth random camera trajectories.

Body-frame angular velocity and world-frame linear velocity are band-limited
Gaussian noise (white noise smoothed by a Gaussian kernel) plus configured
means, optionally pulled back toward the start pose so long sequences keep
looking at the scene.  The camera frame is x right, y down, z forward and the
world frame coincides with the camera frame at t = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.spatial.transform import Rotation

from viflow.errors import ConfigError
from viflow.geometry import PoseSE3


@dataclass(frozen=True)
class TrajectoryConfig:
    duration_s: float = 10.0
    pose_rate_hz: float = 200.0
    image_rate_hz: float = 20.0
    angular_std: tuple = (0.4, 0.4, 0.1)  # rad/s about camera x, y, z
    linear_std: tuple = (0.1, 0.1, 0.05)  # m/s along world x, y, z
    angular_mean: tuple = (0.0, 0.0, 0.0)
    linear_mean: tuple = (0.0, 0.0, 0.0)
    bandwidth_hz: float = 1.0
    # pull-back rates toward the start orientation / position (1/s)
    rotation_restoring: float = 2.0
    position_restoring: float = 0.5
    # alternating yaw-rate regimes of +/- bimodal_rate for regime_s seconds each
    bimodal: bool = False
    bimodal_rate: float = 1.0
    bimodal_axis: int = 1
    regime_s: float = 0.5

    def __post_init__(self):
        if self.duration_s <= 0 or self.pose_rate_hz <= 0 or self.image_rate_hz <= 0:
            raise ConfigError("duration and rates must be positive")
        if self.bandwidth_hz <= 0:
            raise ConfigError("bandwidth must be positive")
        for name in ("angular_std", "linear_std", "angular_mean", "linear_mean"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3:
                raise ConfigError(f"{name} must have three components")
            object.__setattr__(self, name, value)


@dataclass
class Trajectory:
    times: np.ndarray
    poses: list
    pose_rate_hz: float
    image_rate_hz: float
    regimes: np.ndarray = field(default=None)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.times) != len(self.poses):
            raise ValueError("times and poses differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @property
    def rotations(self) -> np.ndarray:
        return np.stack([p.rotation for p in self.poses])

    @property
    def positions(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])

    def frame_indices(self) -> np.ndarray:
        """Pose indices of image capture instants."""
        step = int(round(self.pose_rate_hz / self.image_rate_hz))
        return np.arange(0, len(self.poses), step)

    def pose_at_index(self, i: int) -> PoseSE3:
        return self.poses[i]


def _band_limited(rng, n, std, rate, bandwidth):
    noise = rng.standard_normal((n, 3))
    sigma = rate / (2.0 * np.pi * bandwidth)  # kernel std in samples
    smooth = gaussian_filter1d(noise, sigma, axis=0, mode="reflect")
    # white noise of unit variance through a unit-area Gaussian kernel
    gain = 1.0 / np.sqrt(2.0 * sigma * np.sqrt(np.pi)) if sigma > 0.5 else 1.0
    return smooth / gain * np.asarray(std)


def generate_trajectory(seed: int, config: TrajectoryConfig = TrajectoryConfig()) -> Trajectory:
    rng = np.random.default_rng(seed)
    dt = 1.0 / config.pose_rate_hz
    n = int(round(config.duration_s * config.pose_rate_hz)) + 1
    times = np.arange(n) * dt
    omega_noise = _band_limited(rng, n, config.angular_std, config.pose_rate_hz, config.bandwidth_hz)
    vel_noise = _band_limited(rng, n, config.linear_std, config.pose_rate_hz, config.bandwidth_hz)
    regimes = np.zeros(n, dtype=np.int64)
    if config.bimodal:
        regimes = (np.floor(times / config.regime_s).astype(np.int64)) % 2
    omega_mean = np.asarray(config.angular_mean)
    vel_mean = np.asarray(config.linear_mean)

    rot = np.eye(3)
    pos = np.zeros(3)
    poses = []
    for k in range(n):
        poses.append(PoseSE3.from_rt(rot, pos))
        omega = omega_mean + omega_noise[k]
        if config.bimodal:
            omega = omega.copy()
            omega[config.bimodal_axis] += config.bimodal_rate * (1.0 if regimes[k] == 0 else -1.0)
        if config.rotation_restoring:
            omega = omega - config.rotation_restoring * (rot.T @ Rotation.from_matrix(rot).as_rotvec())
        vel = vel_mean + vel_noise[k] - config.position_restoring * pos
        # exact integration over the sample interval keeps the gyro model exact
        rot = rot @ Rotation.from_rotvec(omega * dt).as_matrix()
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        pos = pos + vel * dt
    return Trajectory(times, poses, config.pose_rate_hz, config.image_rate_hz, regimes)


def pose_delta(h0: PoseSE3, h1: PoseSE3) -> np.ndarray:
    """6-vector (translation m, axis-angle rad) of the t1 camera expressed in the t0 camera frame."""
    rel = h0.inverse() @ h1
    return np.concatenate([rel.translation, Rotation.from_matrix(rel.rotation).as_rotvec()])
