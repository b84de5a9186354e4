"""Finite-difference gradient suite over every differentiable op.

Multilinear ops (dense, convolution, transposed convolution, the squared
loss) are checked with a step of 1e-4: their central differences are exact up
to roundoff, and a larger step keeps roundoff well below the 1e-6 bar.  The
spatial-transformer ops are piecewise polynomial; their sample points are kept
at least 1e-3 px away from integer coordinates so a 1e-6 step never crosses a
cell boundary.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from viflow import autodiff as ad

MULTILINEAR_TOL = 1e-6
SAMPLING_TOL = 1e-4


@dataclass(frozen=True)
class GradCase:
    name: str
    # rng -> (fn mapping input nodes to an output node, list of input arrays)
    build: Callable
    step: float
    tol: float


@dataclass(frozen=True)
class GradResult:
    name: str
    max_error: float
    tol: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _off_integer_grid(rng, shape, h, w, margin=1e-3):
    """Normalized coordinates inside (-1, 1) whose pixel positions avoid integers."""
    px = rng.uniform(0.0, w - 1, size=shape)
    py = rng.uniform(0.0, h - 1, size=shape)
    for p in (px, py):
        frac = p - np.floor(p)
        p += np.where(frac < margin, margin, 0.0) - np.where(frac > 1 - margin, margin, 0.0)
    return np.stack([px * 2.0 / (w - 1) - 1.0, py * 2.0 / (h - 1) - 1.0], axis=-1)


def _fc(rng):
    return (lambda x, w, b: ad.fully_connected(x, w, b),
            [rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)])


def _conv(stride):
    def build(rng):
        size = int(rng.integers(4, 8))
        return (lambda x, k, b: ad.conv2d(x, k, b, stride=stride),
                [rng.standard_normal((2, 2, size, size)), rng.standard_normal((3, 2, 3, 3)),
                 rng.standard_normal(3)])
    return build


def _deconv(rng):
    size = int(rng.integers(2, 5))
    return (lambda x, k, b: ad.conv_transpose2d(x, k, b, stride=2),
            [rng.standard_normal((2, 3, size, size)), rng.standard_normal((3, 2, 5, 5)),
             rng.standard_normal(2)])


def _loss(rng):
    target = rng.uniform(size=(2, 5, 5))
    return (lambda a: ad.euclidean_loss(a, target), [rng.uniform(size=(2, 5, 5))])


def _relu(rng):
    x = rng.standard_normal((4, 6))
    x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep away from the kink
    return (ad.relu, [x])


def _affine_grid(rng):
    theta = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]) + 0.1 * rng.standard_normal((2, 2, 3))
    return (lambda t: ad.affine_grid_node(t, 6, 7), [theta])


def _sample_grid(rng):
    h, w = 6, 7
    image = rng.uniform(size=(2, h, w))
    grid = _off_integer_grid(rng, (2, 5, 4), h, w)
    return (lambda g: ad.bilinear_sample_node(ad.constant(image), g), [grid])


def _sample_image(rng):
    h, w = 6, 7
    grid = _off_integer_grid(rng, (2, 5, 4), h, w)
    # a few points outside the image exercise the zero rule
    grid[0, 0, 0] = (1.5, 0.2)
    return (lambda im: ad.bilinear_sample_node(im, ad.constant(grid)), [rng.uniform(size=(2, h, w))])


def _warp_chain(rng):
    """theta -> affine grid -> bilinear sample of a smooth ramp, the transformer path end to end."""
    h, w = 8, 8
    yy, xx = np.mgrid[0:h, 0:w]
    image = 0.05 * xx + 0.03 * yy + 0.01 * xx * yy
    theta = np.array([[0.9, 0.05, 0.013], [-0.04, 0.85, 0.021]]) + 0.01 * rng.standard_normal((2, 3))
    return (lambda t: ad.bilinear_sample_node(ad.constant(image), ad.affine_grid_node(t, h, w)),
            [theta])


def _structural(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 2))
    choice = rng.integers(0, 2, size=3)

    def fn(x, y):
        joined = ad.concat([x, y], axis=1)
        moved = ad.transpose(ad.reshape(joined, (3, 2, 3)), (2, 0, 1))
        picked = ad.select_rows([moved, ad.scale(moved, -2.0)], np.resize(choice, 3))
        return ad.add(picked, ad.scale(picked, 0.5))

    return fn, [a, b]


DEFAULT_CASES = (
    GradCase("fully_connected", _fc, 1e-4, MULTILINEAR_TOL),
    GradCase("conv2d[stride=1]", _conv(1), 1e-4, MULTILINEAR_TOL),
    GradCase("conv2d[stride=2]", _conv(2), 1e-4, MULTILINEAR_TOL),
    GradCase("conv_transpose2d", _deconv, 1e-4, MULTILINEAR_TOL),
    GradCase("euclidean_loss", _loss, 1e-4, MULTILINEAR_TOL),
    GradCase("relu", _relu, 1e-4, MULTILINEAR_TOL),
    GradCase("structural", _structural, 1e-4, MULTILINEAR_TOL),
    GradCase("affine_grid", _affine_grid, 1e-6, SAMPLING_TOL),
    GradCase("bilinear_sample[grid]", _sample_grid, 1e-6, SAMPLING_TOL),
    GradCase("bilinear_sample[image]", _sample_image, 1e-6, SAMPLING_TOL),
    GradCase("affine_warp_chain", _warp_chain, 1e-6, SAMPLING_TOL),
)


def run_case(case: GradCase, seeds: int = 20) -> GradResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        fn, inputs = case.build(rng)
        worst = max(worst, ad.grad_check(fn, inputs, step=case.step, seed=seed))
    return GradResult(case.name, worst, case.tol, seeds)


def run_suite(cases=DEFAULT_CASES, seeds: int = 20) -> list:
    return [run_case(c, seeds) for c in cases]


def format_table(results) -> str:
    lines = [f"{'op':<26}{'max rel err':>14}{'tol':>10}  status"]
    for r in results:
        lines.append(f"{r.name:<26}{r.max_error:>14.3e}{r.tol:>10.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
