"""IMU synthesis from trajectories and fixed-shape window packing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, Slerp

from viflow.data.trajectory import Trajectory
from viflow.errors import ContractError

GRAVITY = np.array([0.0, 9.81, 0.0])  # world frame is camera-at-t0: y points down


@dataclass(frozen=True)
class ImuNoise:
    gyro_sigma: float = 0.0
    accel_sigma: float = 0.0
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    seed: int = 0


@dataclass
class ImuStream:
    timestamps: np.ndarray
    samples: np.ndarray  # (N, 6): gx, gy, gz [rad/s], ax, ay, az [m/s^2]

    @property
    def gyro(self) -> np.ndarray:
        return self.samples[:, :3]

    @property
    def accel(self) -> np.ndarray:
        return self.samples[:, 3:]


def synthesize_imu(trajectory: Trajectory, imu_rate_hz: float | None = None,
                   noise: ImuNoise = ImuNoise()) -> ImuStream:
    """Body-frame angular rate and specific force along ``trajectory``.

    Angular rate at sample k is log(R_k^T R_{k+1}) / dt; specific force is
    R_k^T (a_k - g) with a_k the second difference of positions.  Samples
    exist for every interior time of the (resampled) trajectory.
    """
    rate = trajectory.pose_rate_hz if imu_rate_hz is None else float(imu_rate_hz)
    if rate < trajectory.image_rate_hz:
        raise ContractError("IMU rate must be at least the image rate")
    times = trajectory.times
    rots = trajectory.rotations
    pos = trajectory.positions
    if not np.isclose(rate, trajectory.pose_rate_hz):
        new_times = np.arange(times[0], times[-1] + 1e-12, 1.0 / rate)
        rots = Slerp(times, Rotation.from_matrix(rots))(new_times).as_matrix()
        pos = CubicSpline(times, pos, axis=0)(new_times)
        times = new_times
    if len(times) < 3:
        raise ContractError("trajectory too short to synthesize IMU samples")
    dt = 1.0 / rate
    rel = np.einsum("kji,kjl->kil", rots[:-1], rots[1:])  # R_k^T R_{k+1}
    gyro = Rotation.from_matrix(rel).as_rotvec() / dt
    acc_w = (pos[2:] - 2.0 * pos[1:-1] + pos[:-2]) / dt ** 2
    spec_w = acc_w - GRAVITY
    accel = np.einsum("kji,kj->ki", rots[1:-1], spec_w)
    samples = np.concatenate([gyro[1:], accel], axis=1)
    ts = times[1:-1].copy()
    rng = np.random.default_rng(noise.seed)
    if noise.gyro_sigma or noise.accel_sigma:
        samples[:, :3] += rng.standard_normal((len(ts), 3)) * noise.gyro_sigma
        samples[:, 3:] += rng.standard_normal((len(ts), 3)) * noise.accel_sigma
    samples[:, :3] += np.asarray(noise.gyro_bias)
    samples[:, 3:] += np.asarray(noise.accel_bias)
    return ImuStream(ts, samples)


@dataclass(frozen=True)
class WindowLayout:
    name: str
    rows: int
    before: int
    # rows after capture: fixed count, or everything up to the next capture
    after: int | None


EUROC50 = WindowLayout("EUROC50", 50, 10, None)
KITTI20 = WindowLayout("KITTI20", 20, 10, 10)
LAYOUTS = {"EUROC50": EUROC50, "KITTI20": KITTI20}


def layout_by_name(name: str, rows: int | None = None) -> WindowLayout:
    if name == "SYNTH":
        if not rows:
            raise ContractError("SYNTH layout needs an explicit row count")
        return WindowLayout("SYNTH", rows, 0, None)
    try:
        return LAYOUTS[name]
    except KeyError:
        raise ContractError(f"unknown IMU layout {name!r}") from None


def pack_imu_window(stream: ImuStream, t_i: float, t_next: float,
                    layout: WindowLayout | str = EUROC50) -> np.ndarray:
    """Arrange IMU samples around an image pair into a zero-padded (rows, 6) window.

    The first ``layout.before`` rows hold the samples just before ``t_i``.
    The following rows hold samples from ``t_i`` onwards: every sample up to
    ``t_next`` for variable layouts, a fixed count otherwise.  Unused rows
    stay zero.
    """
    if isinstance(layout, str):
        layout = layout_by_name(layout)
    if t_next <= t_i:
        raise ContractError("t_next must follow t_i")
    ts = stream.timestamps
    dt = float(np.median(np.diff(ts)))
    tol = 1e-6 * dt
    start = int(np.searchsorted(ts, t_i - tol, side="left"))
    if layout.after is None:
        stop = int(np.searchsorted(ts, t_next - tol, side="left"))
        if t_next > ts[-1] + dt:
            raise ContractError(f"IMU stream ends at {ts[-1]:.4f}s, before t_next={t_next:.4f}s")
    else:
        stop = start + layout.after
    if start - layout.before < 0 or start >= len(ts) or stop > len(ts):
        raise ContractError(
            f"IMU samples do not cover [{t_i:.4f}s, {t_next:.4f}s] with {layout.before} rows of history")
    count = stop - start
    if layout.before + count > layout.rows:
        raise ContractError(
            f"{count} samples after capture do not fit the {layout.rows}-row {layout.name} window")
    window = np.zeros((layout.rows, 6))
    window[:layout.before] = stream.samples[start - layout.before:start]
    window[layout.before:layout.before + count] = stream.samples[start:stop]
    return window
