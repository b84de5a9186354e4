"""Rendered image-pair datasets with IMU windows, motion codes and GT flow.

Rigid exemplars are pairs of frames from a trajectory through a static layered
scene, separated by 1-4 image periods.  They are split 80/20 by a seeded
shuffle into "train" and "test".  Anomaly exemplars come from scenes with an
independently moving patch and live in their own "anomaly" split, never used
for training.

On disk a dataset is an ``index.json`` plus one VIFT file per exemplar tensor.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from viflow import geometry, io
from viflow.data.imu import ImuNoise, layout_by_name, pack_imu_window, synthesize_imu
from viflow.data.kmeans import SffmsCodebook, kmeans_fit, sffms_encode
from viflow.data.scene import SceneConfig, make_scene, render_frame
from viflow.data.trajectory import TrajectoryConfig, generate_trajectory, pose_delta
from viflow.errors import ConfigError, ContractError
from viflow.geometry import CameraIntrinsics, FlowField, Image
from viflow.model import SFFMS_SIZE, MotionInput

SPLITS = ("train", "test", "anomaly")
INDEX_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 64
    focal: float = 55.0
    trajectories: int = 32
    duration_s: float = 5.0
    max_lookahead: int = 4
    train_fraction: float = 0.8
    imu_layout: str = "EUROC50"
    imu_rows: int = 50
    sffms_k: int = SFFMS_SIZE
    anomaly_exemplars: int = 0
    anomaly_lookahead: int = 2
    gyro_noise: float = 0.0
    accel_noise: float = 0.0
    trajectory: dict = field(default_factory=dict)
    scene: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if self.trajectories < 1 or self.duration_s <= 0:
            raise ConfigError("need at least one trajectory of positive duration")
        if not 1 <= self.max_lookahead <= 4:
            raise ConfigError("max_lookahead must lie in 1..4")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.sffms_k != SFFMS_SIZE:
            raise ConfigError(f"sffms_k must be {SFFMS_SIZE}")
        if self.anomaly_exemplars < 0 or not 1 <= self.anomaly_lookahead <= 4:
            raise ConfigError("bad anomaly settings")
        _strict(TrajectoryConfig, self.trajectory, "trajectory")
        _strict(SceneConfig, self.scene, "scene")
        layout_by_name(self.imu_layout, self.imu_rows)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        c = (self.image_size - 1) / 2.0
        return CameraIntrinsics(self.focal, self.focal, c, c)

    def trajectory_config(self) -> TrajectoryConfig:
        opts = {"duration_s": self.duration_s, **self.trajectory}
        return TrajectoryConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in opts.items()})

    def scene_config(self, moving_patch: bool = False) -> SceneConfig:
        opts = {k: tuple(v) if isinstance(v, list) else v for k, v in self.scene.items()}
        opts["moving_patch"] = moving_patch or opts.get("moving_patch", False)
        return SceneConfig(**opts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        _strict(cls, d, "dataset")
        return cls(**d)


def _strict(cls, d, what):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {unknown}")


@dataclass(frozen=True, eq=False)
class Exemplar:
    source: Image
    target: Image
    motion: MotionInput
    flow: FlowField
    lookahead: int
    patch_mask: np.ndarray | None = None


class ExemplarSet:
    """Column-stored exemplars of one split; arrays are float32 except masks."""

    ARRAYS = ("sources", "targets", "flows", "valid", "imu", "sffms", "deltas", "lookaheads")

    def __init__(self, name, ids, sources, targets, flows, valid, imu, sffms, deltas, lookaheads,
                 patch_masks=None):
        self.name = name
        self.ids = list(ids)
        self.sources = sources
        self.targets = targets
        self.flows = flows
        self.valid = valid
        self.imu = imu
        self.sffms = sffms
        self.deltas = deltas
        self.lookaheads = lookaheads
        self.patch_masks = patch_masks

    def __len__(self):
        return len(self.ids)

    def imu_batch(self, sl):
        return self.imu[sl]

    def sffms_batch(self, sl):
        return self.sffms[sl]

    def exemplar(self, i: int) -> Exemplar:
        return Exemplar(
            source=Image(self.sources[i]),
            target=Image(self.targets[i]),
            motion=MotionInput(self.imu[i], self.sffms[i]),
            flow=FlowField(self.flows[i], self.valid[i]),
            lookahead=int(self.lookaheads[i]),
            patch_mask=None if self.patch_masks is None else self.patch_masks[i],
        )

    def subset(self, indices) -> "ExemplarSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ExemplarSet(
            self.name, [self.ids[i] for i in idx], self.sources[idx], self.targets[idx],
            self.flows[idx], self.valid[idx], self.imu[idx], self.sffms[idx], self.deltas[idx],
            self.lookaheads[idx], None if self.patch_masks is None else self.patch_masks[idx])


@dataclass
class Dataset:
    config: DatasetConfig
    seed: int
    splits: dict
    codebook: SffmsCodebook

    def split(self, name: str) -> ExemplarSet:
        try:
            return self.splits[name]
        except KeyError:
            raise ContractError(f"dataset has no split {name!r}") from None

    def counts(self) -> dict:
        return {name: len(s) for name, s in self.splits.items()}


# ---------------------------------------------------------------------------
# generation

def _render_pair(scene, k, size, h0, h1, t0=0.0, t1=0.0):
    img0, depth0, layers0 = render_frame(scene, h0, k, size, time=t0, return_layers=True)
    img1, depth1 = render_frame(scene, h1, k, size, time=t1)
    return img0, img1, depth0, depth1, layers0


def _rigid_records(seed, cfg, traj_index, layout):
    rng = np.random.default_rng([seed, traj_index])
    traj = generate_trajectory(int(rng.integers(2 ** 31)), cfg.trajectory_config())
    scene = make_scene(rng, cfg.scene_config())
    noise = ImuNoise(gyro_sigma=cfg.gyro_noise, accel_sigma=cfg.accel_noise,
                     seed=int(rng.integers(2 ** 31)))
    stream = synthesize_imu(traj, noise=noise)
    k = cfg.intrinsics
    frames = traj.frame_indices()
    period = 1.0 / traj.image_rate_hz
    # first frame with a full IMU history before it
    first = int(np.searchsorted(traj.times[frames], stream.timestamps[layout.before] + 1e-9))
    cache = {}

    def frame(i):
        if i not in cache:
            img, depth = render_frame(scene, traj.poses[frames[i]], k, cfg.image_size)
            cache[i] = (img, depth)
        return cache[i]

    records = []
    for i in range(first, len(frames)):
        look = int(rng.integers(1, cfg.max_lookahead + 1))
        j = i + look
        if j >= len(frames):
            break
        t_i, t_j = traj.times[frames[i]], traj.times[frames[j]]
        if t_j + period > stream.timestamps[-1]:
            break
        img0, depth0 = frame(i)
        img1, depth1 = frame(j)
        h0, h1 = traj.poses[frames[i]], traj.poses[frames[j]]
        flow = geometry.ground_truth_flow(k, depth0, h0, h1, depth_t1=depth1)
        window = pack_imu_window(stream, t_i, t_j, layout)
        records.append(dict(source=img0.data, target=img1.data, flow=flow.vectors, valid=flow.valid,
                            imu=window, delta=pose_delta(h0, h1), lookahead=look,
                            tag=f"r{traj_index:03d}f{i:04d}"))
    return records


def _anomaly_records(seed, cfg, layout, count):
    """Moving-patch pairs with the flow a fully rigid world would induce."""
    tcfg = cfg.trajectory_config()
    records = []
    attempt = 0
    while len(records) < count:
        rng = np.random.default_rng([seed, 10_000 + attempt])
        attempt += 1
        traj = generate_trajectory(int(rng.integers(2 ** 31)), tcfg)
        scene = make_scene(rng, cfg.scene_config(moving_patch=True))
        stream = synthesize_imu(traj)
        k = cfg.intrinsics
        frames = traj.frame_indices()
        patch = len(scene.layers) - 1
        i = int(rng.integers(2, len(frames) - cfg.anomaly_lookahead - 2))
        j = i + cfg.anomaly_lookahead
        h0, h1 = traj.poses[frames[i]], traj.poses[frames[j]]
        t_i, t_j = traj.times[frames[i]], traj.times[frames[j]]
        img0, img1, depth0, depth1, layers0 = _render_pair(scene, k, cfg.image_size, h0, h1, t_i, t_j)
        mask = layers0 == patch
        # a patch covering almost nothing or almost everything makes a useless fixture
        if not 0.03 < mask.mean() < 0.4:
            continue
        flow = geometry.ground_truth_flow(k, depth0, h0, h1)
        records.append(dict(source=img0.data, target=img1.data, flow=flow.vectors, valid=flow.valid,
                            imu=pack_imu_window(stream, t_i, t_j, layout), delta=pose_delta(h0, h1),
                            lookahead=cfg.anomaly_lookahead, mask=mask, tag=f"a{attempt - 1:04d}"))
    return records


def _stack(records, name, codes):
    f32 = np.float32
    return ExemplarSet(
        name,
        [r["tag"] for r in records],
        np.stack([r["source"] for r in records]).astype(f32),
        np.stack([r["target"] for r in records]).astype(f32),
        np.stack([r["flow"] for r in records]).astype(f32),
        np.stack([r["valid"] for r in records]).astype(bool),
        np.stack([r["imu"] for r in records]).astype(f32),
        np.asarray(codes, dtype=f32),
        np.stack([r["delta"] for r in records]).astype(f32),
        np.array([r["lookahead"] for r in records], dtype=np.int64),
        np.stack([r["mask"] for r in records]) if "mask" in records[0] else None,
    )


def build_dataset(seed: int, config: DatasetConfig = DatasetConfig()) -> Dataset:
    layout = layout_by_name(config.imu_layout, config.imu_rows)
    rigid = []
    for t in range(config.trajectories):
        rigid.extend(_rigid_records(seed, config, t, layout))
    if len(rigid) < 2:
        raise ContractError("dataset configuration yields fewer than two exemplars")
    order = np.random.default_rng([seed, 99]).permutation(len(rigid))
    n_train = int(round(config.train_fraction * len(rigid)))
    train = [rigid[i] for i in order[:n_train]]
    test = [rigid[i] for i in order[n_train:]]
    deltas = np.stack([r["delta"] for r in train])
    codebook = kmeans_fit(deltas, k=min(config.sffms_k, len(train)), seed=seed)
    codebook.centroids = codebook.centroids.astype(np.float32).astype(np.float64)

    def codes(records):
        out = np.zeros((len(records), config.sffms_k))
        for n, r in enumerate(records):
            code, _ = sffms_encode(r["delta"].astype(np.float32), codebook)
            out[n, :codebook.k] = code
        return out

    splits = {"train": _stack(train, "train", codes(train)), "test": _stack(test, "test", codes(test))}
    if config.anomaly_exemplars:
        anomalies = _anomaly_records(seed, config, layout, config.anomaly_exemplars)
        splits["anomaly"] = _stack(anomalies, "anomaly", codes(anomalies))
    return Dataset(config, seed, splits, codebook)


def warp_consistency(exemplar: Exemplar) -> float:
    """Mean |bilinear_sample(target, GT grid) - source| over GT-valid pixels."""
    recon = geometry.bilinear_sample(exemplar.target, geometry.flow_to_grid(exemplar.flow))
    valid = exemplar.flow.valid
    if not valid.any():
        return 0.0
    return float(np.mean(np.abs(recon.data - exemplar.source.data)[valid]))


# ---------------------------------------------------------------------------
# serialization

_TENSORS = (("source", "sources"), ("target", "targets"), ("flow", "flows"), ("valid", "valid"),
            ("imu", "imu"), ("sffms", "sffms"), ("delta", "deltas"))


def save_dataset(dataset: Dataset, path) -> None:
    os.makedirs(os.path.join(path, "tensors"), exist_ok=True)
    entries = []
    for name, split in dataset.splits.items():
        for i, ex_id in enumerate(split.ids):
            files = {}
            for key, attr in _TENSORS + ((("mask", "patch_masks"),) if split.patch_masks is not None else ()):
                rel = f"tensors/{ex_id}.{key}.vift"
                io.save_vift(os.path.join(path, rel), getattr(split, attr)[i])
                files[key] = rel
            entries.append({"id": ex_id, "split": name, "lookahead": int(split.lookaheads[i]),
                            "files": files})
    io.save_vift(os.path.join(path, "codebook.vift"), dataset.codebook.centroids)
    index = {
        "version": INDEX_VERSION,
        "seed": dataset.seed,
        "config": dataset.config.to_dict(),
        "codebook": {"file": "codebook.vift", "inertia_history": dataset.codebook.inertia_history},
        "counts": dataset.counts(),
        "exemplars": entries,
    }
    with open(os.path.join(path, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    index_path = os.path.join(path, "index.json")
    try:
        with open(index_path) as fh:
            index = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"no dataset index at {index_path}") from None
    if index.get("version") != INDEX_VERSION:
        raise ContractError(f"{index_path}: unsupported dataset index version {index.get('version')}")
    config = DatasetConfig.from_dict(index["config"])
    by_split = {}
    for entry in index["exemplars"]:
        by_split.setdefault(entry["split"], []).append(entry)
    splits = {}
    for name in SPLITS:
        entries = by_split.get(name)
        if not entries:
            continue
        records = []
        codes = []
        for e in entries:
            rec = {"tag": e["id"], "lookahead": e["lookahead"]}
            for key, rel in e["files"].items():
                rec[key] = io.load_vift(os.path.join(path, rel))
            rec["valid"] = rec["valid"] != 0
            if "mask" in rec:
                rec["mask"] = rec["mask"] != 0
            codes.append(rec["sffms"])
            records.append(rec)
        splits[name] = _stack(records, name, codes)
    cb = index["codebook"]
    codebook = SffmsCodebook(io.load_vift(os.path.join(path, cb["file"])).astype(np.float64),
                             list(cb["inertia_history"]))
    return Dataset(config, index["seed"], splits, codebook)
