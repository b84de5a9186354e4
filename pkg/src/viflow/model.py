"""The two-pathway multi-hypothesis flow network.

Global pathway: one fully connected stack per motion modality (IMU window,
one-hot motion code), concatenated, then one linear head per hypothesis that
emits a 2x3 affine matrix.  Local pathway: a strided conv encoder over the
source image whose deepest map is flattened, joined with the global features,
pushed through a bridge FC layer, projected back to the deepest map shape and
decoded by transposed convolutions; one 1x1 conv head per hypothesis emits a
per-pixel shift in normalized units.  Each hypothesis grid is the affine grid
plus its shift field.

Only the heads are per-hypothesis; everything else is shared.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from viflow import autodiff as ad
from viflow import geometry
from viflow.errors import ConfigError, ContractError, ShapeError

MOTION_MODES = ("IMU", "SFFMS", "IMU+SFFMS")
SFFMS_SIZE = 20
IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    hypothesis_count: int = 4
    motion_mode: str = "IMU"
    imu_rows: int = 50
    fc_sizes: tuple = (512, 4096, 4096, 512)
    conv_filters: tuple = (32, 64, 128, 256, 512)
    bridge_fc: int = 4096
    scale_factor: int = 1
    kernel_size: int = 5
    # std of the per-hypothesis noise on affine head weights
    head_noise: float = 1e-7
    # fixed per-channel divisors for (gyro, accel) applied to the IMU window
    imu_scale: tuple = (1.0, 1.0)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "fc_sizes", tuple(int(v) for v in self.fc_sizes))
        object.__setattr__(self, "conv_filters", tuple(int(v) for v in self.conv_filters))
        object.__setattr__(self, "imu_scale", tuple(float(v) for v in self.imu_scale))
        self.validate()

    def validate(self):
        if self.hypothesis_count < 1:
            raise ConfigError(f"hypothesis_count must be >= 1, got {self.hypothesis_count}")
        if self.motion_mode not in MOTION_MODES:
            raise ConfigError(f"motion_mode must be one of {MOTION_MODES}, got {self.motion_mode!r}")
        if self.uses_imu and self.imu_rows < 1:
            raise ConfigError("imu_rows must be >= 1 when the IMU modality is used")
        if not self.conv_filters or not self.fc_sizes:
            raise ConfigError("conv_filters and fc_sizes must be non-empty")
        if self.scale_factor < 1:
            raise ConfigError("scale_factor must be >= 1")
        levels = len(self.conv_filters)
        if self.input_size < 2 ** levels or self.input_size % (2 ** levels):
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 2^{levels} for {levels} conv levels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if len(self.imu_scale) != 2 or min(self.imu_scale) <= 0:
            raise ConfigError("imu_scale must hold two positive divisors")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def uses_imu(self) -> bool:
        return "IMU" in self.motion_mode

    @property
    def uses_sffms(self) -> bool:
        return "SFFMS" in self.motion_mode

    def width(self, n: int) -> int:
        return max(1, n // self.scale_factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_sizes"] = list(self.fc_sizes)
        d["conv_filters"] = list(self.conv_filters)
        d["imu_scale"] = list(self.imu_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    """A 64x64, three-level configuration small enough to train on a CPU."""
    base = dict(input_size=64, hypothesis_count=4, motion_mode="IMU", imu_rows=50,
                conv_filters=(32, 64, 128), scale_factor=8, imu_scale=(1.0, 9.81))
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True, eq=False)
class MotionInput:
    imu_window: np.ndarray | None = None
    sffms: np.ndarray | None = None

    def __post_init__(self):
        if self.imu_window is not None:
            imu = np.asarray(self.imu_window, dtype=np.float64)
            if imu.ndim != 2 or imu.shape[1] != 6:
                raise ShapeError(f"IMU window must be rows x 6, got {imu.shape}")
            if not np.all(np.isfinite(imu)):
                raise ShapeError("IMU window contains non-finite values")
            object.__setattr__(self, "imu_window", imu)
        if self.sffms is not None:
            code = np.asarray(self.sffms, dtype=np.float64)
            if code.shape != (SFFMS_SIZE,) or np.count_nonzero(code) != 1 or code.sum() != 1.0:
                raise ShapeError(f"SFFMS code must be a length-{SFFMS_SIZE} one-hot vector")
            object.__setattr__(self, "sffms", code)


@dataclass
class HypothesisSet:
    affine: list
    shifts: list
    grids: list
    global_features: np.ndarray
    bottleneck: np.ndarray

    def __len__(self):
        return len(self.grids)


@dataclass
class ParamSpec:
    name: str
    shape: tuple
    pathway: str | int
    init: str  # "he", "zero", "affine_weight", "affine_bias", "shift_weight"
    fan_in: int = 1


def _fc_stack_specs(prefix, in_dim, sizes):
    specs = []
    for i, out in enumerate(sizes):
        specs.append(ParamSpec(f"{prefix}.fc{i}.W", (in_dim, out), ad.SHARED, "he", in_dim))
        specs.append(ParamSpec(f"{prefix}.fc{i}.b", (out,), ad.SHARED, "zero"))
        in_dim = out
    return specs, in_dim


def parameter_specs(config: ModelConfig) -> list:
    """Every parameter's name, shape, pathway tag and initializer, without allocating."""
    w = config.width
    fc = [w(s) for s in config.fc_sizes]
    filters = [w(f) for f in config.conv_filters]
    k = config.kernel_size
    specs = []
    global_dim = 0
    if config.uses_imu:
        s, d = _fc_stack_specs("global.imu", config.imu_rows * 6, fc)
        specs += s
        global_dim += d
    if config.uses_sffms:
        s, d = _fc_stack_specs("global.sffms", SFFMS_SIZE, fc)
        specs += s
        global_dim += d
    cin = 1
    for i, f in enumerate(filters):
        specs.append(ParamSpec(f"local.enc{i}.K", (f, cin, k, k), ad.SHARED, "he", cin * k * k))
        specs.append(ParamSpec(f"local.enc{i}.b", (f,), ad.SHARED, "zero"))
        cin = f
    deep = config.input_size // 2 ** len(filters)
    flat = filters[-1] * deep * deep
    bridge = w(config.bridge_fc)
    specs.append(ParamSpec("local.bridge.W", (flat + global_dim, bridge), ad.SHARED, "he",
                           flat + global_dim))
    specs.append(ParamSpec("local.bridge.b", (bridge,), ad.SHARED, "zero"))
    specs.append(ParamSpec("local.project.W", (bridge, flat), ad.SHARED, "he", bridge))
    specs.append(ParamSpec("local.project.b", (flat,), ad.SHARED, "zero"))
    cin = filters[-1]
    for i, f in enumerate(reversed(filters)):
        # transposed-conv kernels are stored (in, out, k, k)
        specs.append(ParamSpec(f"local.dec{i}.K", (cin, f, k, k), ad.SHARED, "he", cin * k * k))
        specs.append(ParamSpec(f"local.dec{i}.b", (f,), ad.SHARED, "zero"))
        cin = f
    for h in range(config.hypothesis_count):
        specs.append(ParamSpec(f"head{h}.affine.W", (global_dim, 6), h, "affine_weight"))
        specs.append(ParamSpec(f"head{h}.affine.b", (6,), h, "affine_bias"))
        specs.append(ParamSpec(f"head{h}.shift.K", (2, cin, 1, 1), h, "zero"))
        specs.append(ParamSpec(f"head{h}.shift.b", (2,), h, "zero"))
    return specs


def layer_shapes(config: ModelConfig) -> dict:
    """Spatial/feature sizes along the network, for shape-contract checks."""
    w = config.width
    filters = [w(f) for f in config.conv_filters]
    sizes = [config.input_size // 2 ** (i + 1) for i in range(len(filters))]
    global_dim = w(config.fc_sizes[-1]) * (int(config.uses_imu) + int(config.uses_sffms))
    return {
        "encoder": [(f, s, s) for f, s in zip(filters, sizes)],
        "global_dim": global_dim,
        "bridge": w(config.bridge_fc),
        "decoder": [(f, s * 2, s * 2) for f, s in zip(reversed(filters), reversed(sizes))],
        "shift": (config.input_size, config.input_size, 2),
    }


class Model:
    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def shared_parameters(self):
        return [p for p in self.params.values() if p.pathway == ad.SHARED]

    def hypothesis_parameters(self, h: int):
        return [p for p in self.params.values() if p.pathway == h]

    def state(self) -> dict:
        return {name: p.value for name, p in self.params.items()}

    def clone(self) -> "Model":
        params = {n: ad.Parameter(n, p.value.copy(), p.pathway, p.trainable)
                  for n, p in self.params.items()}
        return Model(self.config, params)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for spec in parameter_specs(config):
        if spec.init == "he":
            value = rng.standard_normal(spec.shape) * np.sqrt(2.0 / spec.fan_in)
        elif spec.init == "affine_weight":
            value = rng.standard_normal(spec.shape) * config.head_noise
        elif spec.init == "affine_bias":
            value = IDENTITY_THETA.copy()
        else:
            value = np.zeros(spec.shape)
        params[spec.name] = ad.Parameter(spec.name, value.astype(dtype), spec.pathway)
    return Model(config, params)


# ---------------------------------------------------------------------------

@dataclass
class GraphOutputs:
    """Graph nodes from one batched forward pass."""

    thetas: list
    shifts: list
    grids: list
    global_features: ad.Node
    bottleneck: ad.Node
    extras: dict = field(default_factory=dict)


def _fc_stack(prefix, x, params, count):
    for i in range(count):
        x = ad.relu(ad.fully_connected(x, params[f"{prefix}.fc{i}.W"], params[f"{prefix}.fc{i}.b"]))
    return x


def forward_graph(model: Model, source: np.ndarray, imu: np.ndarray | None = None,
                  sffms: np.ndarray | None = None) -> GraphOutputs:
    """Batched forward: ``source`` (B, S, S), ``imu`` (B, rows, 6), ``sffms`` (B, 20)."""
    cfg = model.config
    p = model.params
    dtype = np.dtype(cfg.dtype)
    source = np.asarray(source)
    if source.ndim != 3 or source.shape[1:] != (cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"source batch must be (B, {cfg.input_size}, {cfg.input_size}), got {source.shape}")
    bsz = source.shape[0]
    n_fc = len(cfg.fc_sizes)
    parts = []
    if cfg.uses_imu:
        if imu is None:
            raise ShapeError("motion mode needs an IMU window")
        imu = np.asarray(imu, dtype=np.float64)
        if imu.shape != (bsz, cfg.imu_rows, 6):
            raise ShapeError(f"IMU batch must be ({bsz}, {cfg.imu_rows}, 6), got {imu.shape}")
        gs, ac = cfg.imu_scale
        scaled = imu / np.array([gs, gs, gs, ac, ac, ac])
        parts.append(_fc_stack("global.imu", ad.constant(scaled.reshape(bsz, -1).astype(dtype)), p, n_fc))
    if cfg.uses_sffms:
        if sffms is None:
            raise ShapeError("motion mode needs an SFFMS code")
        sffms = np.asarray(sffms)
        if sffms.shape != (bsz, SFFMS_SIZE):
            raise ShapeError(f"SFFMS batch must be ({bsz}, {SFFMS_SIZE}), got {sffms.shape}")
        parts.append(_fc_stack("global.sffms", ad.constant(sffms.astype(dtype)), p, n_fc))
    g = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    x = ad.constant(source.astype(dtype)[:, None])
    levels = len(cfg.conv_filters)
    for i in range(levels):
        x = ad.relu(ad.conv2d(x, p[f"local.enc{i}.K"], p[f"local.enc{i}.b"], stride=2))
    bottleneck = x
    deep_shape = x.shape[1:]
    x = ad.reshape(x, (bsz, -1))
    x = ad.relu(ad.fully_connected(ad.concat([x, g], axis=1), p["local.bridge.W"], p["local.bridge.b"]))
    x = ad.relu(ad.fully_connected(x, p["local.project.W"], p["local.project.b"]))
    x = ad.reshape(x, (bsz,) + deep_shape)
    for i in range(levels):
        x = ad.relu(ad.conv_transpose2d(x, p[f"local.dec{i}.K"], p[f"local.dec{i}.b"], stride=2))

    size = cfg.input_size
    thetas, shifts, grids = [], [], []
    for h in range(cfg.hypothesis_count):
        theta = ad.reshape(ad.fully_connected(g, p[f"head{h}.affine.W"], p[f"head{h}.affine.b"]),
                           (bsz, 2, 3))
        shift = ad.transpose(ad.conv2d(x, p[f"head{h}.shift.K"], p[f"head{h}.shift.b"], stride=1),
                             (0, 2, 3, 1))
        grid = ad.add(ad.affine_grid_node(theta, size, size), shift)
        thetas.append(theta)
        shifts.append(shift)
        grids.append(grid)
    return GraphOutputs(thetas, shifts, grids, g, bottleneck)


def _as_array(img):
    return img.data if isinstance(img, geometry.Image) else np.asarray(img)


def forward(model: Model, source, motion: MotionInput) -> HypothesisSet:
    src = _as_array(source)
    imu = None if motion.imu_window is None else motion.imu_window[None]
    code = None if motion.sffms is None else motion.sffms[None]
    out = forward_graph(model, src[None], imu, code)
    return HypothesisSet(
        affine=[geometry.AffineParams(t.value[0]) for t in out.thetas],
        shifts=[geometry.ShiftField(s.value[0]) for s in out.shifts],
        grids=[geometry.SampleGrid(gr.value[0]) for gr in out.grids],
        global_features=out.global_features.value[0],
        bottleneck=out.bottleneck.value[0],
    )


def reconstruct(hyps: HypothesisSet, target) -> list:
    if not isinstance(target, geometry.Image):
        target = geometry.Image(target)
    for grid in hyps.grids:
        if (grid.height, grid.width) != (target.height, target.width):
            raise ShapeError(
                f"target {target.height}x{target.width} does not match grid {grid.height}x{grid.width}")
    return [geometry.bilinear_sample(target, grid) for grid in hyps.grids]


def export_flow(hyps: HypothesisSet, winner: int) -> geometry.FlowField:
    if not 0 <= winner < len(hyps.grids):
        raise ContractError(f"winner index {winner} out of range for {len(hyps.grids)} hypotheses")
    return geometry.grid_to_flow(hyps.grids[winner])
