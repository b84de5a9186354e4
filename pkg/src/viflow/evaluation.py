"""Endpoint-error statistics, runtime, efficiency quotient and residual analysis."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from viflow import geometry
from viflow.errors import ContractError, ShapeError
from viflow.geometry import FlowField, Image

DEFAULT_THRESHOLD = 0.1
DEFAULT_MIN_SIZE = 16


@dataclass(frozen=True)
class EpeStats:
    mean: float
    std: float
    median: float
    count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "median": self.median, "count": self.count}


def stats_from_errors(errors) -> EpeStats:
    """Population mean/std and lower-middle median of a flat error sample."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ContractError("no valid pixels to evaluate")
    ordered = np.sort(errors)
    return EpeStats(
        mean=float(np.mean(errors)),
        std=float(np.std(errors)),
        median=float(ordered[(errors.size - 1) // 2]),
        count=int(errors.size),
    )


def endpoint_errors(pred: FlowField, gt: FlowField) -> np.ndarray:
    if pred.vectors.shape != gt.vectors.shape:
        raise ShapeError(f"flow shapes differ: {pred.vectors.shape} vs {gt.vectors.shape}")
    valid = pred.valid & gt.valid
    diff = pred.vectors[valid] - gt.vectors[valid]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def epe_stats(pred: FlowField, gt: FlowField) -> EpeStats:
    return stats_from_errors(endpoint_errors(pred, gt))


def identity_baseline(gt: FlowField) -> EpeStats:
    zero = FlowField(np.zeros_like(gt.vectors))
    return epe_stats(zero, gt)


def perf_runtime_quotient(aepe: float, runtime_ms: float) -> float:
    """AEPE divided by inverse runtime, scaled by 0.01 (lower is better)."""
    if not runtime_ms > 0:
        raise ContractError(f"runtime must be positive, got {runtime_ms}")
    return aepe / (1.0 / runtime_ms) * 0.01


def timed_median(fn, repetitions: int, warmup: int = 3, clock=time.perf_counter) -> float:
    """Median wall-clock milliseconds of ``fn()`` after ``warmup`` untimed calls."""
    if repetitions < 1:
        raise ContractError("repetitions must be >= 1")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        t0 = clock()
        fn()
        samples.append((clock() - t0) * 1000.0)
    return float(statistics.median(samples))


def measure_runtime(model, exemplar, repetitions: int = 11) -> float:
    """Median milliseconds of one forward pass plus flow export."""
    from viflow.model import export_flow, forward

    def run():
        hyps = forward(model, exemplar.source, exemplar.motion)
        export_flow(hyps, 0)

    return timed_median(run, repetitions)


# ---------------------------------------------------------------------------
# residuals and anomaly regions

@dataclass(frozen=True, eq=False)
class ResidualMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or not np.all(np.isfinite(data)) or data.min(initial=0.0) < 0:
            raise ShapeError("residual map must be a finite, non-negative 2-D array")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


def residual_map(source: Image, reconstruction: Image, valid=None) -> ResidualMap:
    """Per-pixel |reconstruction - source|; pixels outside ``valid`` read 0."""
    if source.data.shape != reconstruction.data.shape:
        raise ShapeError(
            f"source {source.data.shape} and reconstruction {reconstruction.data.shape} differ")
    res = np.abs(reconstruction.data.astype(np.float64) - source.data.astype(np.float64))
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != res.shape:
            raise ShapeError("validity mask does not match residual shape")
        res = np.where(valid, res, 0.0)
    return ResidualMap(res)


@dataclass(frozen=True)
class AnomalyRoi:
    # bounding box as (row0, col0, row1, col1), end-exclusive
    bbox: tuple
    pixel_count: int
    mean_residual: float
    x_extent: int
    y_extent: int
    pixels: tuple = field(repr=False, default=())

    def to_dict(self) -> dict:
        return {"bbox": list(self.bbox), "pixel_count": self.pixel_count,
                "mean_residual": self.mean_residual, "x_extent": self.x_extent,
                "y_extent": self.y_extent, "kind": classify_roi(self)}


_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def anomaly_blobs(residual: ResidualMap, threshold: float = DEFAULT_THRESHOLD,
                  min_size: int = DEFAULT_MIN_SIZE) -> list:
    """4-connected components of super-threshold residual pixels, largest first."""
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    hot = residual.data > threshold
    labels, count = ndimage.label(hot, structure=_FOUR_CONNECTED)
    rois = []
    for index, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        rows, cols = np.nonzero(labels[sl] == index)
        if rows.size < min_size:
            continue
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        rois.append(AnomalyRoi(
            bbox=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
            pixel_count=int(rows.size),
            mean_residual=float(residual.data[rows, cols].mean()),
            x_extent=sl[1].stop - sl[1].start,
            y_extent=sl[0].stop - sl[0].start,
            pixels=tuple(zip(rows.tolist(), cols.tolist())),
        ))
    rois.sort(key=lambda r: (-r.pixel_count, r.bbox))
    return rois


def classify_roi(roi: AnomalyRoi, band_width: int = 3) -> str:
    """"band" when the region is thin along x or y (edge-like model error), else "blob"."""
    return "band" if min(roi.x_extent, roi.y_extent) <= band_width else "blob"


# ---------------------------------------------------------------------------
# visualisation

def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """HSV colour coding: hue from direction, saturation from magnitude, value 1.

    Hue is ``(atan2(v, u) + pi) / (2 pi)``; saturation is magnitude divided by
    ``max_magnitude`` (default: the largest valid magnitude), clipped to 1.
    Invalid pixels are black.
    """
    u, v = flow.vectors[..., 0], flow.vectors[..., 1]
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag[flow.valid].max()) if flow.valid.any() else 1.0
    hue = (np.arctan2(v, u) + np.pi) / (2.0 * np.pi)
    sat = np.clip(mag / max(max_magnitude, 1e-12), 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(hue))
    return np.where(flow.valid[..., None], rgb, 0.0)


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        out[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return out


# ---------------------------------------------------------------------------
# batched model evaluation

@dataclass
class ModelEvaluation:
    epe: EpeStats
    identity: EpeStats
    winners: np.ndarray
    per_exemplar_mean: np.ndarray

    def winner_histogram(self, hypothesis_count: int) -> list:
        return np.bincount(self.winners, minlength=hypothesis_count).tolist()


def photometric_losses(recons: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Squared-Euclidean reconstruction loss per hypothesis: (N, H, W) vs (H, W) -> (N,)."""
    diff = recons - source[None]
    return np.array([np.sum(d * d) for d in diff])


def predict_batch(model, sources, targets, imu=None, sffms=None):
    """Per-exemplar winning flow (B, H, W, 2), winners and losses (B, N)."""
    from viflow.model import forward_graph

    out = forward_graph(model, sources, imu, sffms)
    targets = np.asarray(targets, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    grids = np.stack([g.value for g in out.grids], axis=1)  # (B, N, H, W, 2)
    bsz, n = grids.shape[:2]
    losses = np.empty((bsz, n))
    for b in range(bsz):
        recons = geometry.bilinear_kernel(np.broadcast_to(targets[b], (n,) + targets[b].shape),
                                          grids[b]).out
        losses[b] = photometric_losses(recons, sources[b])
    winners = np.argmin(losses, axis=1)  # first minimum on ties
    chosen = grids[np.arange(bsz), winners]
    h, w = chosen.shape[1:3]
    flow = np.empty_like(chosen)
    flow[..., 0] = (chosen[..., 0] + 1.0) * 0.5 * (w - 1) - np.arange(w)[None, None, :]
    flow[..., 1] = (chosen[..., 1] + 1.0) * 0.5 * (h - 1) - np.arange(h)[None, :, None]
    return flow, winners, losses


def evaluate_model(model, split, batch_size: int = 32) -> ModelEvaluation:
    """Held-out EPE pooled over every GT-valid pixel of ``split``."""
    errors, ident, winners, per_ex = [], [], [], []
    for start in range(0, len(split), batch_size):
        sl = slice(start, start + batch_size)
        flow, win, _ = predict_batch(model, split.sources[sl], split.targets[sl],
                                     split.imu_batch(sl), split.sffms_batch(sl))
        gt = split.flows[sl].astype(np.float64)
        valid = split.valid[sl]
        err = np.sqrt(np.sum((flow - gt) ** 2, axis=-1))
        errors.append(err[valid])
        ident.append(np.sqrt(np.sum(gt ** 2, axis=-1))[valid])
        winners.append(win)
        per_ex.extend(float(e[v].mean()) if v.any() else float("nan") for e, v in zip(err, valid))
    return ModelEvaluation(
        epe=stats_from_errors(np.concatenate(errors)),
        identity=stats_from_errors(np.concatenate(ident)),
        winners=np.concatenate(winners),
        per_exemplar_mean=np.array(per_ex),
    )
