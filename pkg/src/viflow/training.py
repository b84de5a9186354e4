"""Winner-take-all training with selective backpropagation, Adam, and checkpoints.

For every exemplar each hypothesis reconstructs the source by sampling the
target; the hypothesis with the lowest squared-Euclidean loss wins.  The batch
loss is the mean winning loss.  Gradients reach the shared trunk and the
winners' heads only; the optimizer touches nothing else, so a head that won no
exemplar of a batch keeps its parameters and moment buffers bitwise intact.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from viflow import autodiff as ad
from viflow import geometry, io
from viflow.errors import ConfigError, ContractError, DivergenceError, FormatError, ShapeError
from viflow.evaluation import evaluate_model, photometric_losses
from viflow.geometry import Image
from viflow.model import Model, ModelConfig, forward_graph

VIFW_MAGIC = b"VIFW"
VIFW_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 5000
    seed: int = 0
    eval_interval: int = 500
    # cap on held-out exemplars per periodic evaluation (0 = whole split)
    eval_limit: int = 0
    clip_grad_norm: bool = False
    clip_value: float = 10.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0 or self.eval_interval < 1 or self.eval_limit < 0:
            raise ConfigError("max_steps must be >= 0 and eval_interval >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam hyperparameters out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# winner selection

@dataclass(frozen=True)
class WtaOutcome:
    winner: int
    losses: tuple
    loss: float


def _wta(losses) -> WtaOutcome:
    losses = np.asarray(losses, dtype=np.float64)
    winner = int(np.argmin(losses))  # first minimum: ties go to the lowest index
    return WtaOutcome(winner, tuple(float(v) for v in losses), float(losses[winner]))


def wta_select(reconstructions, source: Image) -> WtaOutcome:
    if len(reconstructions) == 0:
        raise ContractError("wta_select needs at least one reconstruction")
    src = source.data if isinstance(source, Image) else np.asarray(source)
    recons = []
    for r in reconstructions:
        r = r.data if isinstance(r, Image) else np.asarray(r)
        if r.shape != src.shape:
            raise ShapeError(f"reconstruction {r.shape} does not match source {src.shape}")
        recons.append(np.asarray(r, dtype=np.float64))
    return _wta(photometric_losses(np.stack(recons), np.asarray(src, dtype=np.float64)))


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: Model) -> "AdamState":
        state = cls()
        for name, p in model.params.items():
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
            state.t[name] = 0
        return state


def adam_update(params: dict, grads: dict, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999,
                eps=1e-8, names=None) -> None:
    """In-place bias-corrected Adam step for ``names`` (default: every gradient given).

    Step counts are kept per parameter, so a parameter that sits out some
    steps still gets the correct bias correction when it next moves.
    """
    for name in (grads if names is None else names):
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.value.shape}")
        t = state.t.get(name, 0) + 1
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        dtype = p.value.dtype
        p.value = (p.value - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dtype)
        state.m[name] = m.astype(dtype)
        state.v[name] = v.astype(dtype)
        state.t[name] = t


# ---------------------------------------------------------------------------
# one step

@dataclass
class StepMetrics:
    loss: float
    winners: list
    outcomes: list
    histogram: list
    grad_norm: float
    update_norm: float


def batch_losses(model: Model, sources, targets, imu=None, sffms=None):
    """Forward a batch; returns (graph outputs, per-exemplar WtaOutcomes)."""
    out = forward_graph(model, sources, imu, sffms)
    targets = np.asarray(targets, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    n = len(out.grids)
    grids = np.stack([g.value for g in out.grids], axis=1)
    outcomes = []
    for b in range(len(sources)):
        recons = geometry.bilinear_kernel(np.broadcast_to(targets[b], (n,) + targets[b].shape),
                                          grids[b]).out
        outcomes.append(_wta(photometric_losses(recons, sources[b])))
    return out, outcomes


def train_step(model: Model, batch, state: AdamState, config: TrainConfig = TrainConfig()) -> StepMetrics:
    """One WTA update on ``batch`` = (sources, targets, imu, sffms)."""
    sources, targets, imu, sffms = batch
    bsz = len(sources)
    out, outcomes = batch_losses(model, sources, targets, imu, sffms)
    for h, grid in enumerate(out.grids):
        if not np.all(np.isfinite(grid.value)):
            raise DivergenceError(f"hypothesis {h} produced a non-finite sampling grid")
    winners = [o.winner for o in outcomes]
    mean_loss = float(np.mean([o.loss for o in outcomes]))
    if not np.isfinite(mean_loss):
        raise DivergenceError(
            f"non-finite training loss {mean_loss}; per-exemplar losses {[o.losses for o in outcomes]}")
    chosen = ad.select_rows(out.grids, winners)
    recon = ad.bilinear_sample_node(ad.constant(np.asarray(targets, dtype=np.float64)), chosen)
    loss = ad.scale(ad.euclidean_loss(recon, np.asarray(sources, dtype=np.float64)), 1.0 / bsz)
    admit = {ad.SHARED} | set(winners)
    grads = ad.backward(loss, admit=admit)
    names = [n for n, p in model.params.items() if p.trainable and p.pathway in admit]
    grad_norm = float(np.sqrt(sum(np.sum(np.square(grads[n], dtype=np.float64)) for n in names)))
    if not np.isfinite(grad_norm):
        raise DivergenceError(f"non-finite gradient norm at loss {mean_loss}")
    table = {n: grads[n] for n in names}
    if config.clip_grad_norm and grad_norm > config.clip_value:
        table = {n: g * (config.clip_value / grad_norm) for n, g in table.items()}
    before = {n: model.params[n].value.copy() for n in names}
    adam_update(model.params, table, state, config.learning_rate, config.beta1, config.beta2,
                config.eps, names)
    update_norm = float(np.sqrt(sum(
        np.sum((model.params[n].value.astype(np.float64) - before[n]) ** 2) for n in names)))
    hist = np.bincount(winners, minlength=model.config.hypothesis_count).tolist()
    return StepMetrics(mean_loss, winners, outcomes, hist, grad_norm, update_norm)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainingReport:
    records: list
    losses: list
    winner_counts: list
    steps: int
    state: AdamState | None = None

    @property
    def final(self) -> dict:
        return self.records[-1]


def _batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]
        if n < batch_size:
            yield order


def _eval_record(model, dataset, config, step, recent_losses, recent_winners):
    record = {"step": step, "train_loss": float(np.mean(recent_losses)) if recent_losses else None}
    record["train_winners"] = np.bincount(
        np.asarray(recent_winners, dtype=np.int64), minlength=model.config.hypothesis_count).tolist()
    if "test" in dataset.splits and len(dataset.split("test")):
        split = dataset.split("test")
        if config.eval_limit and len(split) > config.eval_limit:
            split = split.subset(range(config.eval_limit))
        result = evaluate_model(model, split)
        record["test_epe"] = result.epe.to_dict()
        record["identity_epe"] = result.identity.to_dict()
        record["test_winners"] = result.winner_histogram(model.config.hypothesis_count)
    return record


def train(model: Model, dataset, config: TrainConfig = TrainConfig(), report_path=None,
          state: AdamState | None = None, start_step: int = 0, log=None,
          step_hook=None) -> TrainingReport:
    """Run ``config.max_steps`` WTA steps over shuffled batches of the "train" split.

    ``step_hook(step, metrics, model)`` runs after every update when given.
    """
    split = dataset.split("train")
    if len(split) == 0:
        raise ContractError("training split is empty")
    state = AdamState.for_model(model) if state is None else state
    rng = np.random.default_rng(config.seed)
    batches = _batches(len(split), config.batch_size, rng)
    # skip already-consumed batches so a resumed run sees the same data order
    for _ in range(start_step):
        next(batches)
    records, losses, winner_counts = [], [], []
    recent_l, recent_w = [], []
    sink = open(report_path, "w") if report_path else None
    try:
        def emit(step):
            rec = _eval_record(model, dataset, config, step, recent_l, recent_w)
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
                sink.flush()
            if log:
                log(rec)
            recent_l.clear()
            recent_w.clear()

        emit(start_step)
        for step in range(start_step + 1, start_step + config.max_steps + 1):
            idx = next(batches)
            batch = (split.sources[idx], split.targets[idx], split.imu_batch(idx), split.sffms_batch(idx))
            metrics = train_step(model, batch, state, config)
            if step_hook:
                step_hook(step, metrics, model)
            losses.append(metrics.loss)
            winner_counts.append(metrics.histogram)
            recent_l.append(metrics.loss)
            recent_w.extend(metrics.winners)
            if step % config.eval_interval == 0 or step == start_step + config.max_steps:
                emit(step)
    finally:
        if sink:
            sink.close()
    return TrainingReport(records, losses, winner_counts, start_step + config.max_steps, state)


# ---------------------------------------------------------------------------
# checkpoints

def encode_checkpoint(model: Model, state: AdamState | None = None, train_config: TrainConfig | None = None,
                      step: int = 0) -> bytes:
    meta = {"model": model.config.to_dict(), "step": step}
    if train_config is not None:
        meta["train"] = train_config.to_dict()
    tensors = [(name, p.value) for name, p in model.params.items()]
    if state is not None:
        meta["adam_steps"] = {n: int(state.t[n]) for n in model.params}
        tensors += [(f"adam.m:{n}", state.m[n]) for n in model.params]
        tensors += [(f"adam.v:{n}", state.v[n]) for n in model.params]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [VIFW_MAGIC, struct.pack("<II", VIFW_VERSION, len(blob)), blob]
    for name, value in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + io.pack_tensor_body(value))
    return b"".join(parts)


def decode_checkpoint(data: bytes):
    """Returns (model, AdamState or None, meta dict)."""
    r = io.Reader(data)
    magic = r.take(4, "magic")
    if magic != VIFW_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected 'VIFW'", 0)
    (version,) = r.unpack("<I", "version")
    if version != VIFW_VERSION:
        raise FormatError(f"unsupported VIFW version {version}", 4)
    (length,) = r.unpack("<I", "config length")
    start = r.pos
    try:
        meta = json.loads(r.take(length, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"config blob is not valid JSON: {exc}", start) from None
    tensors = {}
    while not r.exhausted:
        at = r.pos
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8", errors="replace")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", at)
        tensors[name] = io.read_tensor_body(r, name)
    try:
        config = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"checkpoint model config unusable: {exc}", start) from None
    from viflow.model import parameter_specs

    params = {}
    for spec in parameter_specs(config):
        if spec.name not in tensors:
            raise FormatError(f"checkpoint lacks tensor {spec.name!r}", len(data))
        value = tensors[spec.name]
        if value.shape != spec.shape:
            raise FormatError(f"tensor {spec.name!r} has shape {value.shape}, expected {spec.shape}",
                              len(data))
        params[spec.name] = ad.Parameter(spec.name, value.astype(config.dtype), spec.pathway)
    state = None
    if "adam_steps" in meta:
        state = AdamState()
        missing = [n for n in params if f"adam.m:{n}" not in tensors or f"adam.v:{n}" not in tensors]
        if missing:
            raise FormatError(f"checkpoint lacks optimizer moments for {missing[0]!r}", len(data))
        for name in params:
            state.m[name] = tensors[f"adam.m:{name}"].astype(config.dtype)
            state.v[name] = tensors[f"adam.v:{name}"].astype(config.dtype)
            state.t[name] = int(meta["adam_steps"][name])
    return Model(config, params), state, meta


def save_checkpoint(path, model: Model, state: AdamState | None = None,
                    train_config: TrainConfig | None = None, step: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model, state, train_config, step))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
