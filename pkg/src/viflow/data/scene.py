"""Layered planar scenes and their rendering.

Every layer is a plane of constant world depth (world z) carrying a periodic
texture; a layer may be bounded to a rectangle and may translate within its
plane over time (an independently moving patch).  A pixel shows the nearest
layer its viewing ray hits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from viflow.errors import RenderError
from viflow.geometry import CameraIntrinsics, DepthMap, Image, PoseSE3


@dataclass(frozen=True)
class Layer:
    depth: float
    texture: int = 0
    # (x0, x1, y0, y1) in world metres; None is an unbounded plane
    extent: tuple | None = None
    velocity: tuple = (0.0, 0.0)
    texture_offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError(f"layer depth must be positive, got {self.depth}")

    @property
    def moving(self) -> bool:
        return any(v != 0.0 for v in self.velocity)


@dataclass
class Scene:
    textures: list
    layers: list
    texel_size: float = 0.1
    max_patch_speed: float = 2.0

    def __post_init__(self):
        for layer in self.layers:
            if not 0 <= layer.texture < len(self.textures):
                raise ValueError(f"layer references missing texture {layer.texture}")
            if np.hypot(*layer.velocity) > self.max_patch_speed:
                raise ValueError("moving patch exceeds the configured speed bound")


def periodic_texture(rng, size: int = 256, scales=((8.0, 0.6), (2.5, 0.4)), lo=0.1, hi=0.9) -> Image:
    """Tileable smooth noise: white noise low-passed in the Fourier domain."""
    freq = np.fft.fftfreq(size)
    f2 = freq[:, None] ** 2 + freq[None, :] ** 2
    out = np.zeros((size, size))
    for sigma, weight in scales:
        noise = np.fft.fft2(rng.standard_normal((size, size)))
        # Gaussian of std sigma texels has spectrum exp(-2 pi^2 sigma^2 f^2)
        layer = np.real(np.fft.ifft2(noise * np.exp(-2.0 * np.pi ** 2 * sigma ** 2 * f2)))
        out += weight * layer / layer.std()
    out = (out - out.min()) / (out.max() - out.min())
    return Image(lo + (hi - lo) * out)


def checker_texture(size: int = 64, period: float = 12.0, contrast: float = 0.8) -> Image:
    """Smooth high-contrast checker pattern (product of sinusoids)."""
    t = np.arange(size) * 2.0 * np.pi / period
    pattern = np.sin(t)[:, None] * np.sin(t)[None, :]
    return Image(0.5 + 0.5 * contrast * pattern)


def _sample_wrap(texture: np.ndarray, tx: np.ndarray, ty: np.ndarray) -> np.ndarray:
    h, w = texture.shape
    x0 = np.floor(tx)
    y0 = np.floor(ty)
    fx = tx - x0
    fy = ty - y0
    x0 = x0.astype(np.int64) % w
    y0 = y0.astype(np.int64) % h
    x1 = (x0 + 1) % w
    y1 = (y0 + 1) % h
    return ((1 - fy) * ((1 - fx) * texture[y0, x0] + fx * texture[y0, x1])
            + fy * ((1 - fx) * texture[y1, x0] + fx * texture[y1, x1]))


def render_frame(scene: Scene, pose: PoseSE3, k: CameraIntrinsics, size, time: float = 0.0,
                 return_layers: bool = False):
    """Render the camera view at ``pose`` (camera-to-world) and ``time``.

    Returns ``(Image, DepthMap)``, plus the per-pixel layer index map when
    ``return_layers`` is set.
    """
    h, w = (size, size) if np.isscalar(size) else size
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    rays_c = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)
    rays_w = rays_c @ pose.rotation.T
    centre = pose.translation
    best = np.full((h, w), np.inf)
    which = np.full((h, w), -1, dtype=np.int64)
    hits = []
    for index, layer in enumerate(scene.layers):
        dz = rays_w[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (layer.depth - centre[2]) / dz
        ok = np.isfinite(lam) & (lam > 0)
        px = centre[0] + lam * rays_w[..., 0]
        py = centre[1] + lam * rays_w[..., 1]
        ox = layer.velocity[0] * time
        oy = layer.velocity[1] * time
        if layer.extent is not None:
            x0, x1, y0, y1 = layer.extent
            ok &= (px >= x0 + ox) & (px < x1 + ox) & (py >= y0 + oy) & (py < y1 + oy)
        closer = ok & (lam < best)
        best = np.where(closer, lam, best)
        which = np.where(closer, index, which)
        hits.append((px - ox, py - oy))
    if np.any(which < 0):
        raise RenderError(f"{int(np.sum(which < 0))} pixels see no scene layer")
    image = np.zeros((h, w))
    for index, layer in enumerate(scene.layers):
        sel = which == index
        if not sel.any():
            continue
        px, py = hits[index]
        tex = scene.textures[layer.texture].data
        tx = (px[sel] - layer.texture_offset[0]) / scene.texel_size
        ty = (py[sel] - layer.texture_offset[1]) / scene.texel_size
        image[sel] = _sample_wrap(tex, tx, ty)
    out = (Image(np.clip(image, 0.0, 1.0)), DepthMap(best))
    return out + (which,) if return_layers else out


@dataclass(frozen=True)
class SceneConfig:
    background_depth: float = 6.0
    foreground_layers: int = 1
    foreground_depth: tuple = (3.0, 4.5)
    foreground_size: tuple = (1.0, 2.5)
    texture_size: int = 256
    texel_size: float = 0.1
    moving_patch: bool = False
    patch_depth: float = 4.0
    patch_size: float = 1.2
    patch_speed: float = 1.5
    max_patch_speed: float = 2.0


def make_scene(rng, config: SceneConfig = SceneConfig()) -> Scene:
    textures = [periodic_texture(rng, config.texture_size)]
    layers = [Layer(config.background_depth, 0,
                    texture_offset=tuple(rng.uniform(0, 100, 2)))]
    for _ in range(config.foreground_layers):
        depth = rng.uniform(*config.foreground_depth)
        sx, sy = rng.uniform(*config.foreground_size, size=2)
        cx, cy = rng.uniform(-1.0, 1.0, size=2)
        layers.append(Layer(depth, 0, extent=(cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2),
                            texture_offset=tuple(rng.uniform(0, 100, 2))))
    if config.moving_patch:
        textures.append(checker_texture())
        angle = rng.uniform(0, 2 * np.pi)
        vel = (config.patch_speed * np.cos(angle), config.patch_speed * np.sin(angle))
        half = config.patch_size / 2
        cx, cy = rng.uniform(-0.4, 0.4, size=2)
        layers.append(Layer(config.patch_depth, len(textures) - 1,
                            extent=(cx - half, cx + half, cy - half, cy + half), velocity=vel))
    return Scene(textures, layers, config.texel_size, config.max_patch_speed)
