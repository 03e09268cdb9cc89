"""Reverse-mode automatic differentiation over dense float64 arrays.

A small define-by-run tape: every operation returns a :class:`Node` holding
the forward value and vector-Jacobian callbacks into its parents.  The op set
is deliberately minimal -- dense layers, elementwise nonlinearities and the
arithmetic needed to push gradients through a fixed-step ODE solver and
reparameterized Gaussian sampling.  No broadcasting beyond numpy semantics,
no higher-order derivatives, no GPU.

Ops accept plain arrays/floats anywhere a ``Node`` is accepted; non-Node
arguments are treated as constants and receive no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError, StateError

Array = np.ndarray

ACTIVATIONS = ("identity", "silu", "tanh", "softplus")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) with explicit seeding.

    Children spawned from the returned generator (``rng.spawn(n)``) are
    statistically independent, so episode- and sample-level parallelism can
    split streams without coordination.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return rng.spawn(n)


class Node:
    """A value in the computation graph.

    ``parents`` holds ``(parent, vjp)`` pairs; ``vjp`` maps the adjoint of
    this node to the adjoint contribution for that parent.  ``adjoint`` is
    populated by :func:`backward` and has the same shape as ``value``.
    """

    __slots__ = ("value", "parents", "adjoint")

    def __init__(self, value, parents=()):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=float)
        self.parents = parents
        self.adjoint = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):  # pragma: no cover
        return f"Node(shape={self.value.shape}, leaf={not self.parents})"


def constant(x) -> Node:
    """Wrap an array as a leaf node (identical to a parameter leaf; the
    caller decides which leaves it reads gradients from)."""
    return Node(np.asarray(x, dtype=float))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def value_of(x) -> Array:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def _toposort(output: Node) -> list[Node]:
    # Iterative post-order DFS; graphs routinely exceed Python's recursion
    # limit (hundreds of chained solver steps).
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, int]] = [(output, 0)]
    seen.add(id(output))
    while stack:
        node, i = stack.pop()
        parents = node.parents
        if i < len(parents):
            stack.append((node, i + 1))
            parent = parents[i][0]
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)
    return order  # parents come before children


def backward(output: Node, seed=None) -> None:
    """Populate ``adjoint`` on every node reachable from ``output``.

    ``seed`` must match the output shape (defaults to ones).  Adjoints of the
    reachable subgraph are reset first, so repeated calls are deterministic
    and leaves may be shared between independent graphs.
    """
    seed_arr = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=float)
    if seed_arr.shape != output.value.shape:
        raise DimensionError(
            f"seed shape {seed_arr.shape} does not match output shape {output.value.shape}"
        )
    order = _toposort(output)
    for node in order:
        node.adjoint = None
    output.adjoint = seed_arr
    for node in reversed(order):  # children before parents
        g = node.adjoint
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.adjoint is None:
                parent.adjoint = np.array(contrib, dtype=float, copy=True)
            else:
                parent.adjoint += contrib


def grad_of(node: Node) -> Array:
    """Adjoint of a node after a backward sweep."""
    if node.adjoint is None:
        raise StateError("gradient requested before backward() ran over this node")
    return node.adjoint


def gradients(output: Node, leaves: dict[str, Node], seed=None) -> dict[str, Array]:
    backward(output, seed)
    return {name: (leaf.adjoint if leaf.adjoint is not None else np.zeros_like(leaf.value))
            for name, leaf in leaves.items()}


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def _unbroadcast(grad: Array, shape: tuple) -> Array:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _binary(a, b, value, da: Callable, db: Callable) -> Node:
    parents = []
    if isinstance(a, Node):
        sa = a.value.shape
        parents.append((a, lambda g, _f=da, _s=sa: _unbroadcast(_f(g), _s)))
    if isinstance(b, Node):
        sb = b.value.shape
        parents.append((b, lambda g, _f=db, _s=sb: _unbroadcast(_f(g), _s)))
    return Node(value, tuple(parents))


def add(a, b) -> Node:
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av + bv, lambda g: g, lambda g: g)


def sub(a, b) -> Node:
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av - bv, lambda g: g, lambda g: -g)


def mul(a, b) -> Node:
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b) -> Node:
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av / bv, lambda g: g / bv, lambda g: -g * av / (bv * bv))


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, ((a, lambda g: -g),))


def scale(c: float, a) -> Node:
    a = as_node(a)
    return Node(c * a.value, ((a, lambda g: c * g),))


def matmul(a, b) -> Node:
    """Matrix product for 2-D x 2-D, 1-D x 2-D and 2-D x 1-D operands."""
    av, bv = value_of(a), value_of(b)
    val = av @ bv

    def da(g):
        if av.ndim == 1:
            return g @ bv.T if bv.ndim == 2 else g * bv
        return (np.outer(g, bv) if bv.ndim == 1 else g @ bv.T)

    def db(g):
        if bv.ndim == 1:
            return av.T @ g if av.ndim == 2 else g * av
        return (np.outer(av, g) if av.ndim == 1 else av.T @ g)

    return _binary(a, b, val, da, db)


def exp(a) -> Node:
    a = as_node(a)
    ev = np.exp(a.value)
    return Node(ev, ((a, lambda g: g * ev),))


def log(a) -> Node:
    a = as_node(a)
    return Node(np.log(a.value), ((a, lambda g: g / a.value),))


def square(a) -> Node:
    a = as_node(a)
    return Node(a.value * a.value, ((a, lambda g: 2.0 * g * a.value),))


def sqrt(a) -> Node:
    a = as_node(a)
    sv = np.sqrt(a.value)
    return Node(sv, ((a, lambda g: 0.5 * g / sv),))


def tanh(a) -> Node:
    a = as_node(a)
    tv = np.tanh(a.value)
    return Node(tv, ((a, lambda g: g * (1.0 - tv * tv)),))


def logistic(a) -> Node:
    a = as_node(a)
    sv = _sigmoid(a.value)
    return Node(sv, ((a, lambda g: g * sv * (1.0 - sv)),))


def silu(a) -> Node:
    a = as_node(a)
    sv = _sigmoid(a.value)
    val = a.value * sv
    return Node(val, ((a, lambda g: g * (sv + val * (1.0 - sv))),))


def softplus(a) -> Node:
    a = as_node(a)
    val = np.logaddexp(0.0, a.value)
    sv = _sigmoid(a.value)
    return Node(val, ((a, lambda g: g * sv),))


def maximum(a, b) -> Node:
    av, bv = value_of(a), value_of(b)
    mask = av >= bv  # ties route to the first argument
    return _binary(a, b, np.where(mask, av, bv),
                   lambda g: g * mask, lambda g: g * ~mask)


def clip(a, lower, upper) -> Node:
    """Elementwise clamp with the exact subgradient: 1 strictly inside the
    interval, 0 outside (values at the bound count as outside when they were
    moved there)."""
    a = as_node(a)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    val = np.clip(a.value, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)
    return Node(val, ((a, lambda g: g * inside),))


def sum_all(a) -> Node:
    a = as_node(a)
    shape = a.value.shape
    return Node(np.asarray(a.value.sum()), ((a, lambda g: np.broadcast_to(g, shape)),))


def sum_axis(a, axis: int, keepdims: bool = False) -> Node:
    a = as_node(a)
    shape = a.value.shape
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return Node(val, ((a, vjp),))


def mean_axis(a, axis: int, keepdims: bool = False) -> Node:
    a = as_node(a)
    n = a.value.shape[axis]
    return scale(1.0 / n, sum_axis(a, axis, keepdims))


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    return Node(a.value.reshape(shape), ((a, lambda g: g.reshape(old)),))


def broadcast_to(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    return Node(np.broadcast_to(a.value, shape).copy(),
                ((a, lambda g: _unbroadcast(g, old)),))


def concat_cols(parts: Sequence) -> Node:
    """Concatenate along the last axis (all parts 1-D, or all 2-D with equal
    leading dimension)."""
    vals = [value_of(p) for p in parts]
    val = np.concatenate(vals, axis=-1)
    parents = []
    off = 0
    for p, v in zip(parts, vals):
        w = v.shape[-1]
        if isinstance(p, Node):
            lo, hi = off, off + w
            parents.append((p, lambda g, _lo=lo, _hi=hi: g[..., _lo:_hi]))
        off += w
    return Node(val, tuple(parents))


def concat_rows(parts: Sequence) -> Node:
    vals = [np.atleast_2d(value_of(p)) for p in parts]
    val = np.concatenate(vals, axis=0)
    parents = []
    off = 0
    for p, v in zip(parts, vals):
        n = v.shape[0]
        if isinstance(p, Node):
            lo, hi = off, off + n
            orig = p.value.shape
            parents.append((p, lambda g, _lo=lo, _hi=hi, _s=orig: g[_lo:_hi].reshape(_s)))
        off += n
    return Node(val, tuple(parents))


def select_cols(a, start: int, stop: int) -> Node:
    a = as_node(a)
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return out

    return Node(a.value[..., start:stop], ((a, vjp),))


def gather_rows(a, idx) -> Node:
    a = as_node(a)
    idx = np.asarray(idx)
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return Node(a.value[idx], ((a, vjp),))


def axpy(y, a, x) -> Node:
    """Fused ``y + a * x`` with ``a`` a scalar (node or float); the workhorse
    of Runge-Kutta stage combinations."""
    yv, xv = value_of(y), value_of(x)
    av = value_of(a) if isinstance(a, Node) else float(a)
    val = yv + av * xv
    parents = []
    if isinstance(y, Node):
        parents.append((y, lambda g: g))
    if isinstance(a, Node):
        sh = a.value.shape
        parents.append((a, lambda g: _unbroadcast(g * xv, sh)))
    if isinstance(x, Node):
        parents.append((x, lambda g: g * av))
    return Node(val, tuple(parents))


def lincomb(pairs: Sequence[tuple[float, object]]) -> Node:
    """Fused ``sum(c_i * x_i)`` with float coefficients."""
    val = None
    parents = []
    for c, x in pairs:
        xv = value_of(x)
        val = c * xv if val is None else val + c * xv
        if isinstance(x, Node):
            parents.append((x, lambda g, _c=c: _c * g))
    return Node(val, tuple(parents))


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act_forward(name: str, z: Array) -> tuple[Array, Array]:
    """Return (activation(z), activation'(z))."""
    if name == "identity":
        return z, np.ones_like(z)
    if name == "tanh":
        t = np.tanh(z)
        return t, 1.0 - t * t
    if name == "silu":
        s = _sigmoid(z)
        y = z * s
        return y, s + y * (1.0 - s)
    if name == "softplus":
        return np.logaddexp(0.0, z), _sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    """One dense layer ``activation(W x + b)`` with persistent leaf nodes so
    gradients accumulate correctly when the layer is applied repeatedly
    inside a single graph (e.g. at every solver stage)."""

    weights: Array
    bias: Array
    activation: str = "identity"
    w_node: Node = field(init=False, repr=False)
    b_node: Node = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError("weights must be (out, in), bias (out,)")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise DimensionError("weights and bias disagree on output width")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer parameters must be finite")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.w_node = Node(self.weights)
        self.b_node = Node(self.bias)

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]


def dense_op(x, w: Node, b: Node, activation: str = "identity") -> Node:
    """Fused ``activation(x W^T + b)`` with weight/bias supplied as leaf
    nodes; one graph node per layer application."""
    x = as_node(x)
    xv = x.value
    if xv.shape[-1] != w.value.shape[1]:
        raise DimensionError(
            f"input width {xv.shape[-1]} != layer input width {w.value.shape[1]}"
        )
    z = xv @ w.value.T + b.value
    val, dact = _act_forward(activation, z)

    def dx(g):
        return (g * dact) @ w.value

    def dw(g):
        gz = g * dact
        if xv.ndim == 1:
            return np.outer(gz, xv)
        return gz.reshape(-1, gz.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])

    def db(g):
        gz = g * dact
        return gz if gz.ndim == 1 else gz.reshape(-1, gz.shape[-1]).sum(axis=0)

    return Node(val, ((x, dx), (w, dw), (b, db)))


def dense_forward(layer: DenseLayer, x) -> Node:
    """Apply a dense layer to a vector or a batch of row vectors.

    Differentiable w.r.t. the input and the layer parameters (read gradients
    from ``layer.w_node.adjoint`` / ``layer.b_node.adjoint`` after backward).
    """
    return dense_op(x, layer.w_node, layer.b_node, layer.activation)


def mlp_forward(layers: Sequence[DenseLayer], x) -> Node:
    out = as_node(x)
    for layer in layers:
        out = dense_forward(layer, out)
    return out


# ---------------------------------------------------------------------------
# Gaussian helpers
# ---------------------------------------------------------------------------

@dataclass
class DiagonalGaussian:
    """Diagonal Gaussian with mean/std as arrays or tape nodes."""

    mean: object
    std: object

    def __post_init__(self):
        if value_of(self.mean).shape != value_of(self.std).shape:
            raise DimensionError("mean and std must have identical shapes")

    @property
    def dim(self) -> int:
        return int(value_of(self.mean).shape[-1])

    def mean_value(self) -> Array:
        return value_of(self.mean)

    def std_value(self) -> Array:
        return value_of(self.std)


def sample_gaussian_reparam(dist: DiagonalGaussian, noise) -> Node:
    """``mean + std * noise`` with externally supplied standard-normal noise;
    differentiable w.r.t. mean and std."""
    if np.any(value_of(dist.std) <= 0.0):
        raise ValueError("std must be strictly positive")
    noise_v = value_of(noise)
    if noise_v.shape[-1] != value_of(dist.mean).shape[-1]:
        raise DimensionError("noise width does not match distribution dimension")
    return add(dist.mean, mul(dist.std, noise_v))


def kl_diag_gaussians(q: DiagonalGaussian, p: DiagonalGaussian) -> Node:
    """KL(q || p) for diagonal Gaussians (scalar node, >= 0)."""
    if q.dim != p.dim:
        raise DimensionError("q and p must have the same dimension")
    var_q = square(as_node(q.std))
    var_p = square(as_node(p.std))
    ratio = div(var_q, var_p)
    mean_term = div(square(sub(p.mean, q.mean)), var_p)
    log_term = sub(log(var_p), log(var_q))
    total = add(add(ratio, mean_term), add(log_term, -1.0))
    return scale(0.5, sum_all(total))


# ---------------------------------------------------------------------------
# finite-difference gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    max_rel_error: float
    per_parameter_errors: dict[str, float]


def grad_check(function, point, step: float = 1e-5) -> GradReport:
    """Compare reverse-mode gradients of a scalar function against central
    finite differences.

    ``function`` maps a dict of leaf nodes (or a single node when ``point``
    is an array) to a scalar node.  Relative error uses the denominator
    ``max(|ad|, |fd|, 1e-6 * scale)`` where ``scale`` is the largest finite
    difference magnitude over all parameters, so elements that are tiny
    relative to the overall gradient do not dominate the report.
    """
    single = not isinstance(point, dict)
    points = {"x": np.asarray(point, dtype=float)} if single else {
        k: np.asarray(v, dtype=float) for k, v in point.items()
    }

    def call(arrs: dict[str, Array]) -> tuple[float, dict[str, Node]]:
        leaves = {k: Node(v) for k, v in arrs.items()}
        out = function(leaves["x"]) if single else function(leaves)
        if out.value.size != 1:
            raise DimensionError("grad_check requires a scalar-valued function")
        val = float(out.value.reshape(()))
        if not math.isfinite(val):
            raise EvaluationError("function value is not finite")
        return val, leaves, out

    _, leaves, out = call(points)
    backward(out, np.ones_like(out.value))
    ad = {k: (leaves[k].adjoint if leaves[k].adjoint is not None
              else np.zeros_like(points[k])) for k in points}

    fd = {k: np.zeros_like(v) for k, v in points.items()}
    for name, base in points.items():
        flat = base.ravel()
        for i in range(flat.size):
            for sign in (+1.0, -1.0):
                shifted = {k: v.copy() for k, v in points.items()}
                shifted[name].ravel()[i] = flat[i] + sign * step
                v, _, _ = call(shifted)
                fd[name].ravel()[i] += sign * v / (2.0 * step)

    scale_fd = max((np.max(np.abs(v)) if v.size else 0.0) for v in fd.values())
    floor = max(1e-6 * scale_fd, 1e-12)
    per_param = {}
    for name in points:
        denom = np.maximum(np.maximum(np.abs(ad[name]), np.abs(fd[name])), floor)
        err = np.abs(ad[name] - fd[name]) / denom
        per_param[name] = float(err.max()) if err.size else 0.0
    return GradReport(max(per_param.values()), per_param)
