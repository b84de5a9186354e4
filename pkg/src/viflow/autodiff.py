"""A small reverse-mode differentiation engine over numpy arrays.

Graphs are built eagerly: every op computes its value immediately and returns
a :class:`Node` that remembers its parents and a closure producing the
parents' gradients.  :func:`backward` walks the graph in reverse topological
order.  Parameters enter a graph as fresh leaf nodes each time they are used,
so one parameter may appear several times in a graph; its gradients are
summed into a table keyed by parameter name.

Only the operations the flow network needs are provided.  There is no
broadcasting beyond bias addition.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from viflow import geometry
from viflow.errors import ContractError, ShapeError

SHARED = "shared"

_ids = itertools.count()


class Node:
    __slots__ = ("id", "op", "parents", "value", "grad", "backward_fn", "param", "requires_grad")

    def __init__(self, op, value, parents=(), backward_fn=None, param=None, requires_grad=False):
        self.id = next(_ids)
        self.op = op
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.param = param
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    pathway: str | int = SHARED
    trainable: bool = True

    def node(self) -> Node:
        return Node("param", self.value, param=self, requires_grad=self.trainable)


@dataclass
class Gradients:
    """Result of :func:`backward`: per-parameter gradient table."""

    params: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params


def constant(value) -> Node:
    return Node("const", np.asarray(value))


def variable(value) -> Node:
    """A non-parameter leaf that receives a gradient (used by grad checks)."""
    return Node("var", np.asarray(value, dtype=np.float64), requires_grad=True)


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, Parameter):
        return x.node()
    return constant(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops

def relu(x) -> Node:
    x = _as_node(x)
    mask = x.value > 0
    value = np.where(mask, x.value, 0).astype(x.value.dtype, copy=False)
    return Node("relu", value, (x,), lambda g: (g * mask,))


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return Node("add", a.value + b.value, (a, b), lambda g: (g, g))


def scale(x, factor: float) -> Node:
    x = _as_node(x)
    return Node("scale", x.value * factor, (x,), lambda g: (g * factor,))


def reshape(x, shape) -> Node:
    x = _as_node(x)
    try:
        value = x.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    old = x.shape
    return Node("reshape", value, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Node:
    x = _as_node(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Node("transpose", np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = -1) -> Node:
    xs = [_as_node(x) for x in xs]
    if not xs:
        raise ShapeError("concat: no inputs")
    ndim = xs[0].value.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for rank {ndim}")
    ax = axis % ndim
    for x in xs:
        if x.value.ndim != ndim or any(
                x.shape[d] != xs[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Node("concat", np.concatenate([x.value for x in xs], axis=ax), xs, back)


def select_rows(xs: Sequence, choice) -> Node:
    """Row ``b`` of the output is row ``b`` of ``xs[choice[b]]``."""
    xs = [_as_node(x) for x in xs]
    choice = np.asarray(choice, dtype=np.int64)
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ShapeError("select_rows: inputs differ in shape")
    if choice.shape != (shape[0],) or choice.min() < 0 or choice.max() >= len(xs):
        raise ShapeError("select_rows: bad choice vector")
    value = np.empty_like(xs[0].value)
    for i, x in enumerate(xs):
        rows = choice == i
        value[rows] = x.value[rows]

    def back(g):
        out = []
        for i in range(len(xs)):
            gi = np.zeros_like(g)
            rows = choice == i
            gi[rows] = g[rows]
            out.append(gi)
        return tuple(out)

    return Node("select_rows", value, xs, back)


# ---------------------------------------------------------------------------
# dense layers

def fully_connected(x, weight, bias) -> Node:
    x, weight, bias = _as_node(x), _as_node(weight), _as_node(bias)
    xv, wv = x.value, weight.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0] or bias.shape != (wv.shape[1],):
        raise ShapeError(
            f"fully_connected: x {xv.shape}, W {wv.shape}, b {bias.shape} are incompatible")
    value = xv @ wv + bias.value

    def back(g):
        x2 = xv.reshape(-1, xv.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wv.T, x2.T @ g2, g2.sum(axis=0)

    return Node("fully_connected", value, (x, weight, bias), back)


def _same_padding(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _im2col(xp, k, stride, ho, wo):
    # xp: (B, C, Hp, Wp) -> (B, C*k*k, ho*wo)
    b, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (B, C, ho, wo, k, k) -> (B, C, k, k, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, ho * wo)


def _col2im(cols, shape_p, k, stride, ho, wo):
    b, c, hp, wp = shape_p
    cols = cols.reshape(b, c, k, k, ho, wo)
    out = np.zeros(shape_p, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _conv_geometry(h, w, k, stride):
    ho, pt, pb = _same_padding(h, k, stride)
    wo, pl, pr = _same_padding(w, k, stride)
    return ho, wo, (pt, pb, pl, pr)


def conv2d(x, kernels, bias, stride: int = 1) -> Node:
    """Cross-correlation with "same" zero padding; output size ceil(in / stride).

    ``x`` is (B, Cin, H, W); ``kernels`` is (Cout, Cin, k, k).
    """
    x, kernels, bias = _as_node(x), _as_node(kernels), _as_node(bias)
    xv, kv = x.value, kernels.value
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if xv.ndim != 4 or kv.ndim != 4 or kv.shape[2] != kv.shape[3]:
        raise ShapeError(f"conv2d: bad ranks x {xv.shape}, kernels {kv.shape}")
    bsz, cin, h, w = xv.shape
    cout, kcin, k, _ = kv.shape
    if kcin != cin or bias.shape != (cout,):
        raise ShapeError(f"conv2d: channel mismatch x {xv.shape}, kernels {kv.shape}, bias {bias.shape}")
    ho, wo, (pt, pb, pl, pr) = _conv_geometry(h, w, k, stride)
    xp = np.pad(xv, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = kv.reshape(cout, -1)
    value = (w2 @ cols).reshape(bsz, cout, ho, wo) + bias.value[None, :, None, None]

    def back(g):
        g2 = g.reshape(bsz, cout, ho * wo)
        dw = np.einsum("bop,bqp->oq", g2, cols).reshape(kv.shape)
        dcols = w2.T @ g2
        dxp = _col2im(dcols, xp.shape, k, stride, ho, wo)
        dx = dxp[:, :, pt:pt + h, pl:pl + w]
        return dx, dw, g.sum(axis=(0, 2, 3))

    return Node("conv2d", value, (x, kernels, bias), back)


def conv_transpose2d(x, kernels, bias, stride: int = 1) -> Node:
    """Adjoint of :func:`conv2d` whose input had spatial size ``in * stride``.

    ``x`` is (B, Ca, h, w); ``kernels`` is (Ca, Cb, k, k), i.e. the kernel
    array of the conv2d mapping Cb channels to Ca.  Output is
    (B, Cb, h * stride, w * stride).
    """
    x, kernels, bias = _as_node(x), _as_node(kernels), _as_node(bias)
    xv, kv = x.value, kernels.value
    if stride < 1:
        raise ShapeError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    if xv.ndim != 4 or kv.ndim != 4 or kv.shape[2] != kv.shape[3]:
        raise ShapeError(f"conv_transpose2d: bad ranks x {xv.shape}, kernels {kv.shape}")
    bsz, ca, hi, wi = xv.shape
    kca, cb, k, _ = kv.shape
    if kca != ca or bias.shape != (cb,):
        raise ShapeError(
            f"conv_transpose2d: channel mismatch x {xv.shape}, kernels {kv.shape}, bias {bias.shape}")
    h, w = hi * stride, wi * stride
    ho, wo, (pt, pb, pl, pr) = _conv_geometry(h, w, k, stride)
    assert (ho, wo) == (hi, wi)
    shape_p = (bsz, cb, h + pt + pb, w + pl + pr)
    w2 = kv.reshape(ca, -1)
    x2 = xv.reshape(bsz, ca, hi * wi)
    cols = np.einsum("aq,bap->bqp", w2, x2)
    outp = _col2im(cols, shape_p, k, stride, ho, wo)
    value = outp[:, :, pt:pt + h, pl:pl + w] + bias.value[None, :, None, None]

    def back(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        gcols = _im2col(gp, k, stride, ho, wo)
        dx = (w2 @ gcols).reshape(xv.shape)
        dw = np.einsum("bap,bqp->aq", x2, gcols).reshape(kv.shape)
        return dx, dw, g.sum(axis=(0, 2, 3))

    return Node("conv_transpose2d", value, (x, kernels, bias), back)


# ---------------------------------------------------------------------------
# spatial transformer ops

def affine_grid_node(theta, height: int, width: int) -> Node:
    """``theta`` (..., 2, 3) -> sampling grid (..., H, W, 2), computed in float64."""
    theta = _as_node(theta)
    if theta.value.shape[-2:] != (2, 3):
        raise ShapeError(f"affine_grid_node: theta must end in (2, 3), got {theta.shape}")
    value = geometry.affine_coords(theta.value, height, width)
    base = geometry.base_coords(height, width)
    ones = np.ones((height, width))
    basis = np.stack([base[..., 0], base[..., 1], ones], axis=-1).reshape(-1, 3)
    lead = theta.value.shape[:-2]

    def back(g):
        g2 = g.reshape(lead + (height * width, 2))
        return (np.swapaxes(g2, -1, -2) @ basis,)

    return Node("affine_grid", value, (theta,), back)


def bilinear_sample_node(image, grid) -> Node:
    """Sample ``image`` (..., H, W) at ``grid`` (..., Ho, Wo, 2); zero outside [-1, 1]."""
    image, grid = _as_node(image), _as_node(grid)
    if grid.value.ndim < 3 or grid.value.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample_node: grid must end in 2, got {grid.shape}")
    cache = geometry.bilinear_kernel(image.value, grid.value)
    img_shape = image.shape

    def back(g):
        return (geometry.bilinear_grad_image(cache, img_shape, g),
                geometry.bilinear_grad_grid(cache, img_shape, g))

    return Node("bilinear_sample", cache.out, (image, grid), back)


# ---------------------------------------------------------------------------
# losses

def euclidean_loss(a, b) -> Node:
    """Sum of squared differences against a constant target."""
    a = _as_node(a)
    target = b.value if isinstance(b, Node) else np.asarray(b)
    if a.shape != target.shape:
        raise ShapeError(f"euclidean_loss: shapes {a.shape} and {target.shape} differ")
    diff = a.value - target
    return Node("euclidean_loss", np.asarray(np.sum(diff * diff)), (a,), lambda g: (2.0 * g * diff,))


def weighted_sum(x, weights) -> Node:
    x = _as_node(x)
    weights = np.asarray(weights)
    if weights.shape != x.shape:
        raise ShapeError("weighted_sum: weight shape mismatch")
    return Node("weighted_sum", np.asarray(np.sum(x.value * weights)), (x,), lambda g: (g * weights,))


# ---------------------------------------------------------------------------
# reverse pass

def _topological(root: Node):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def _admitted(node: Node, admit) -> bool:
    if not node.requires_grad:
        return False
    if node.param is None:
        return True
    return admit is None or node.param.pathway in admit


def backward(loss: Node, admit=None) -> Gradients:
    """Accumulate d(loss)/d(leaf) for every leaf reachable from ``loss``.

    ``admit`` optionally restricts which parameter pathway tags receive
    gradient; parameters with other tags keep an all-zero gradient and the
    subgraphs feeding only them are not visited.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    admit = None if admit is None else set(admit)
    order = _topological(loss)
    needed = {}
    for node in order:
        if node.parents:
            needed[node.id] = any(needed[p.id] for p in node.parents)
        else:
            needed[node.id] = _admitted(node, admit)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value, dtype=np.float64)
    table = {}
    for node in reversed(order):
        if node.grad is None or not needed[node.id]:
            continue
        if node.backward_fn is None:
            if node.param is not None:
                g = node.grad.astype(node.param.value.dtype, copy=False)
                if node.param.name in table:
                    table[node.param.name] = table[node.param.name] + g
                else:
                    table[node.param.name] = g
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if not needed[parent.id]:
                continue
            g = np.asarray(g).astype(parent.value.dtype, copy=False) \
                if np.issubdtype(parent.value.dtype, np.floating) else np.asarray(g)
            parent.grad = g if parent.grad is None else parent.grad + g
    # masked or unreachable parameters get explicit zero buffers
    for node in order:
        if node.param is not None and node.param.name not in table:
            table[node.param.name] = np.zeros_like(node.param.value)
    return Gradients(table)


# ---------------------------------------------------------------------------
# finite-difference checking

def grad_check(fn: Callable[..., Node], inputs: Sequence[np.ndarray], step: float = 1e-6,
               seed: int = 0) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``fn`` maps input nodes to an output node; non-scalar outputs are reduced
    with fixed random weights so every output element participates.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    probe = fn(*[constant(a) for a in inputs])
    weights = rng.standard_normal(probe.shape) if probe.value.size != 1 else None

    def scalar(nodes):
        out = fn(*nodes)
        return out if weights is None else weighted_sum(out, weights)

    leaves = [variable(a) for a in inputs]
    loss = scalar(leaves)
    backward(loss)
    worst = 0.0
    for leaf, base in zip(leaves, inputs):
        analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(scalar([constant(a) for a in inputs]).value)
            flat[i] = orig - step
            fm = float(scalar([constant(a) for a in inputs]).value)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
