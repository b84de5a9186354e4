"""Grids, affine warps, bilinear sampling and ground-truth flow reprojection.

Normalized coordinates follow the align-corners convention: -1 is the centre
of the first pixel and +1 the centre of the last, so
``x_pix = (x + 1) / 2 * (W - 1)``.  Samples whose normalized coordinate lies
outside [-1, 1] read as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from viflow.errors import (
    InvalidDimensionError,
    InvalidParameterError,
    InvalidPoseError,
    ShapeError,
)

_POSE_TOL = 1e-9


def _frozen(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Image:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.size == 0:
            raise ShapeError(f"image must be a non-empty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidParameterError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise InvalidParameterError(
                f"image values must lie in [0, 1], got [{data.min()}, {data.max()}]")
        dtype = data.dtype if data.dtype in (np.float32, np.float64) else np.float64
        object.__setattr__(self, "data", _frozen(data, dtype))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class DepthMap:
    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.size == 0:
            raise ShapeError(f"depth map must be a non-empty 2-D array, got shape {data.shape}")
        ok = np.isfinite(data) & (data > 0)
        if self.valid is not None:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != data.shape:
                raise ShapeError("validity mask shape does not match depth map")
            ok &= valid
        object.__setattr__(self, "data", _frozen(np.where(ok, data, 0.0)))
        object.__setattr__(self, "valid", _frozen(ok, bool))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class AffineParams:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape == (6,):
            theta = theta.reshape(2, 3)
        if theta.shape != (2, 3):
            raise ShapeError(f"affine parameters must be 2x3, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise InvalidParameterError("affine parameters must be finite")
        object.__setattr__(self, "theta", _frozen(theta))

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


@dataclass(frozen=True, eq=False)
class SampleGrid:
    """Per-pixel (x, y) sampling locations in normalized coordinates."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[2] != 2:
            raise ShapeError(f"grid must have shape HxWx2, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise InvalidParameterError("grid contains non-finite coordinates")
        object.__setattr__(self, "coords", _frozen(coords))

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    def in_bounds(self) -> np.ndarray:
        x, y = self.coords[..., 0], self.coords[..., 1]
        return (x >= -1) & (x <= 1) & (y >= -1) & (y <= 1)


@dataclass(frozen=True, eq=False)
class ShiftField:
    deltas: np.ndarray

    def __post_init__(self):
        deltas = np.asarray(self.deltas, dtype=np.float64)
        if deltas.ndim != 3 or deltas.shape[2] != 2:
            raise ShapeError(f"shift field must have shape HxWx2, got {deltas.shape}")
        if not np.all(np.isfinite(deltas)):
            raise InvalidParameterError("shift field contains non-finite values")
        object.__setattr__(self, "deltas", _frozen(deltas))

    @property
    def height(self) -> int:
        return self.deltas.shape[0]

    @property
    def width(self) -> int:
        return self.deltas.shape[1]


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel (u, v) displacement in pixels plus a validity mask."""

    vectors: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 3 or vectors.shape[2] != 2:
            raise ShapeError(f"flow must have shape HxWx2, got {vectors.shape}")
        if self.valid is None:
            valid = np.ones(vectors.shape[:2], dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != vectors.shape[:2]:
                raise ShapeError("flow validity mask shape does not match flow")
        valid = valid & np.all(np.isfinite(vectors), axis=2)
        vectors = np.where(valid[..., None], vectors, 0.0)
        object.__setattr__(self, "vectors", _frozen(vectors))
        object.__setattr__(self, "valid", _frozen(valid, bool))

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidParameterError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Homogeneous 4x4 rigid transform."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidPoseError(f"pose must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidPoseError("pose contains non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidPoseError(f"pose bottom row must be [0,0,0,1], got {m[3]}")
        r = m[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > _POSE_TOL:
            raise InvalidPoseError("rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _POSE_TOL:
            raise InvalidPoseError("rotation block determinant is not +1")
        object.__setattr__(self, "matrix", _frozen(m))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation) -> "PoseSE3":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "PoseSE3":
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = -self.rotation.T @ self.translation
        return PoseSE3(m)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(_reorthonormalize(self.matrix @ other.matrix))


def _reorthonormalize(m):
    # products of many valid poses drift past the 1e-9 tolerance otherwise
    u, _, vt = np.linalg.svd(m[:3, :3])
    out = m.copy()
    out[:3, :3] = u @ vt
    out[3] = [0.0, 0.0, 0.0, 1.0]
    return out


# ---------------------------------------------------------------------------
# array kernels (shared with the differentiable ops, which need the
# intermediates for their backward passes)

def base_coords(height: int, width: int) -> np.ndarray:
    if height < 2 or width < 2:
        raise InvalidDimensionError(f"grid dimensions must be >= 2, got {height}x{width}")
    xs = 2.0 * np.arange(width, dtype=np.float64) / (width - 1) - 1.0
    ys = 2.0 * np.arange(height, dtype=np.float64) / (height - 1) - 1.0
    out = np.empty((height, width, 2))
    out[..., 0] = xs[None, :]
    out[..., 1] = ys[:, None]
    return out


def affine_coords(theta: np.ndarray, height: int, width: int) -> np.ndarray:
    """Apply ``theta`` of shape (..., 2, 3) to the base grid -> (..., H, W, 2)."""
    base = base_coords(height, width)
    theta = np.asarray(theta, dtype=np.float64)
    t = theta[..., None, None, :, :]
    x, y = base[..., 0], base[..., 1]
    out = np.empty(theta.shape[:-2] + (height, width, 2))
    out[..., 0] = t[..., 0, 0] * x + t[..., 0, 1] * y + t[..., 0, 2]
    out[..., 1] = t[..., 1, 0] * x + t[..., 1, 1] * y + t[..., 1, 2]
    return out


@dataclass
class _SampleCache:
    out: np.ndarray
    inside: np.ndarray
    idx: tuple
    weights: tuple
    values: tuple


def bilinear_kernel(img: np.ndarray, grid: np.ndarray) -> _SampleCache:
    """Sample ``img`` (..., H, W) at ``grid`` (..., Ho, Wo, 2).

    Leading dimensions of both arguments must agree.
    """
    img = np.asarray(img, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    h, w = img.shape[-2:]
    lead = img.shape[:-2]
    if grid.shape[:-3] != lead or grid.shape[-1] != 2:
        raise ShapeError(f"grid shape {grid.shape} incompatible with image shape {img.shape}")
    ho, wo = grid.shape[-3:-1]
    n = int(np.prod(lead, dtype=np.int64))
    flat = img.reshape(n, h * w)
    g = grid.reshape(n, ho * wo, 2)
    x, y = g[..., 0], g[..., 1]
    inside = (x >= -1.0) & (x <= 1.0) & (y >= -1.0) & (y <= 1.0)
    xp = np.where(inside, (x + 1.0) * 0.5 * (w - 1), 0.0)
    yp = np.where(inside, (y + 1.0) * 0.5 * (h - 1), 0.0)
    x0 = np.clip(np.floor(xp).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yp).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xp - x0
    wy = yp - y0
    i00, i01 = y0 * w + x0, y0 * w + x1
    i10, i11 = y1 * w + x0, y1 * w + x1
    v00 = np.take_along_axis(flat, i00, axis=1)
    v01 = np.take_along_axis(flat, i01, axis=1)
    v10 = np.take_along_axis(flat, i10, axis=1)
    v11 = np.take_along_axis(flat, i11, axis=1)
    out = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11)
    out = np.where(inside, out, 0.0)
    return _SampleCache(
        out=out.reshape(lead + (ho, wo)),
        inside=inside,
        idx=(i00, i01, i10, i11),
        weights=(wx, wy),
        values=(v00, v01, v10, v11),
    )


def bilinear_grad_grid(cache: _SampleCache, img_shape, gout: np.ndarray) -> np.ndarray:
    h, w = img_shape[-2:]
    n = cache.inside.shape[0]
    g = gout.reshape(n, -1)
    wx, wy = cache.weights
    v00, v01, v10, v11 = cache.values
    dx = ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10)) * (0.5 * (w - 1))
    dy = ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01)) * (0.5 * (h - 1))
    out = np.zeros(cache.inside.shape + (2,))
    out[..., 0] = np.where(cache.inside, g * dx, 0.0)
    out[..., 1] = np.where(cache.inside, g * dy, 0.0)
    return out.reshape(gout.shape + (2,))


def bilinear_grad_image(cache: _SampleCache, img_shape, gout: np.ndarray) -> np.ndarray:
    h, w = img_shape[-2:]
    n = cache.inside.shape[0]
    g = np.where(cache.inside, gout.reshape(n, -1), 0.0)
    wx, wy = cache.weights
    offsets = (np.arange(n, dtype=np.int64) * (h * w))[:, None]
    contrib = (
        (cache.idx[0], (1.0 - wx) * (1.0 - wy)),
        (cache.idx[1], wx * (1.0 - wy)),
        (cache.idx[2], (1.0 - wx) * wy),
        (cache.idx[3], wx * wy),
    )
    acc = np.zeros(n * h * w)
    for idx, weight in contrib:
        acc += np.bincount((idx + offsets).ravel(), weights=(g * weight).ravel(), minlength=n * h * w)
    return acc.reshape(img_shape)


# ---------------------------------------------------------------------------
# public operations

def make_base_grid(height: int, width: int) -> SampleGrid:
    return SampleGrid(base_coords(height, width))


def affine_grid(theta: AffineParams | np.ndarray, height: int, width: int) -> SampleGrid:
    if not isinstance(theta, AffineParams):
        theta = AffineParams(theta)
    return SampleGrid(affine_coords(theta.theta, height, width))


def compose_shifts(global_grid: SampleGrid, local: ShiftField) -> SampleGrid:
    if global_grid.coords.shape != local.deltas.shape:
        raise ShapeError(
            f"grid {global_grid.coords.shape[:2]} and shift field {local.deltas.shape[:2]} differ")
    return SampleGrid(global_grid.coords + local.deltas)


def bilinear_sample(image: Image, grid: SampleGrid) -> Image:
    out = bilinear_kernel(image.data, grid.coords).out
    # convex weights can overshoot 1 by an ulp
    return Image(np.clip(out, 0.0, 1.0))


def grid_to_flow(grid: SampleGrid, valid: np.ndarray | None = None) -> FlowField:
    h, w = grid.height, grid.width
    c = grid.coords
    u = (c[..., 0] + 1.0) * 0.5 * (w - 1) - np.arange(w)[None, :]
    v = (c[..., 1] + 1.0) * 0.5 * (h - 1) - np.arange(h)[:, None]
    return FlowField(np.stack([u, v], axis=-1), valid)


def flow_to_grid(flow: FlowField) -> SampleGrid:
    h, w = flow.height, flow.width
    if h < 2 or w < 2:
        raise InvalidDimensionError(f"flow dimensions must be >= 2, got {h}x{w}")
    f = flow.vectors
    x = (np.arange(w)[None, :] + f[..., 0]) * 2.0 / (w - 1) - 1.0
    y = (np.arange(h)[:, None] + f[..., 1]) * 2.0 / (h - 1) - 1.0
    return SampleGrid(np.stack([x, y], axis=-1))


def relative_pose(h_wc_t0: PoseSE3, h_wc_t1: PoseSE3) -> PoseSE3:
    """``inv(h_wc_t0) @ h_wc_t1``, taken literally.

    Note the direction: the result maps camera-t1 coordinates into camera-t0
    coordinates.  :func:`camera_motion` gives the transform that carries
    camera-t0 points into the camera-t1 frame.
    """
    for p in (h_wc_t0, h_wc_t1):
        if not isinstance(p, PoseSE3):
            raise InvalidPoseError(f"expected PoseSE3, got {type(p).__name__}")
    return h_wc_t0.inverse() @ h_wc_t1


def camera_motion(h_wc_t0: PoseSE3, h_wc_t1: PoseSE3) -> PoseSE3:
    """Transform taking points in the t0 camera frame to the t1 camera frame."""
    return relative_pose(h_wc_t1, h_wc_t0)


def backproject(k: CameraIntrinsics, u, v, depth):
    """Pixel coordinates and z-depth -> camera-frame points (..., 3)."""
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    xc = (u - k.cx) / k.fx * depth
    yc = (v - k.cy) / k.fy * depth
    return np.stack([xc, yc, depth], axis=-1)


def project(k: CameraIntrinsics, points):
    """Camera-frame points (..., 3) -> (u, v, z)."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * points[..., 0] / z + k.cx
        v = k.fy * points[..., 1] / z + k.cy
    return u, v, z


def reproject_points(k: CameraIntrinsics, u, v, depth, h_wc_t0: PoseSE3, h_wc_t1: PoseSE3):
    """Carry pixels with known depth from the t0 view into the t1 view.

    Returns ``(u1, v1, z1)`` where ``z1`` is the depth in the t1 camera.
    """
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    m = camera_motion(h_wc_t0, h_wc_t1).matrix
    xn = (u - k.cx) / k.fx
    yn = (v - k.cy) / k.fy
    # work on rays scaled by 1/depth so an identity motion reproduces every pixel exactly
    rays = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        moved = rays @ m[:3, :3].T + m[:3, 3] / depth[..., None]
        x1 = moved[..., 0] / moved[..., 2]
        y1 = moved[..., 1] / moved[..., 2]
    return u + k.fx * (x1 - xn), v + k.fy * (y1 - yn), depth * moved[..., 2]


def ground_truth_flow(
    k: CameraIntrinsics,
    depth_t0: DepthMap,
    h_wc_t0: PoseSE3,
    h_wc_t1: PoseSE3,
    depth_t1: DepthMap | None = None,
    occlusion_tol: float = 0.01,
) -> FlowField:
    """Dense flow from the t0 frame into the t1 frame induced by camera motion.

    Pixels are invalid when their depth is invalid, when they land behind the
    t1 camera or outside the t1 image.  If ``depth_t1`` is given, pixels whose
    reprojected depth exceeds the t1 depth at the landing point by more than
    ``occlusion_tol`` (relative) are flagged as occluded.
    """
    if not isinstance(k, CameraIntrinsics):
        raise InvalidParameterError("intrinsics must be a CameraIntrinsics")
    h, w = depth_t0.height, depth_t0.width
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    u1, v1, z1 = reproject_points(k, uu, vv, depth_t0.data, h_wc_t0, h_wc_t1)
    valid = depth_t0.valid & (z1 > 0) & np.isfinite(u1) & np.isfinite(v1)
    valid &= (u1 >= 0) & (u1 <= w - 1) & (v1 >= 0) & (v1 <= h - 1)
    if depth_t1 is not None:
        if (depth_t1.height, depth_t1.width) != (h, w):
            raise ShapeError("depth maps at t0 and t1 differ in size")
        ui = np.clip(np.rint(np.where(valid, u1, 0)).astype(int), 0, w - 1)
        vi = np.clip(np.rint(np.where(valid, v1, 0)).astype(int), 0, h - 1)
        d1 = depth_t1.data[vi, ui]
        ok1 = depth_t1.valid[vi, ui]
        valid &= ok1 & (z1 <= d1 * (1.0 + occlusion_tol))
    flow = np.stack([u1 - uu, v1 - vv], axis=-1)
    return FlowField(np.where(valid[..., None], flow, 0.0), valid)


def center_crop(image: Image, size: int) -> Image:
    h, w = image.height, image.width
    if size < 1 or size > min(h, w):
        raise InvalidDimensionError(f"crop size {size} does not fit a {h}x{w} image")
    r0 = (h - size) // 2
    c0 = (w - size) // 2
    return Image(image.data[r0:r0 + size, c0:c0 + size])
