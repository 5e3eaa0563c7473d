"""Reverse-mode automatic differentiation over the float64 kernels.

A forward pass records a dynamic graph of ``Node`` objects; ``backward``
walks it once in reverse topological order and accumulates adjoints into
every requires-grad leaf.  Gradients sum across uses and across backward
calls; the caller zeroes them explicitly between optimizer steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import ConvSpec, ShapeError


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (non-scalar loss, reuse after release)."""


class Node:
    """One value in the recorded graph.

    ``value`` is a float64 ndarray; ``_backward`` (when set) receives this
    node's adjoint and pushes contributions into the parents via ``_accum``.
    """

    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "_released")

    def __init__(self, value, parents=(), backward=None, requires_grad=None):
        self.value = kernels.as_f64(value)
        self.parents = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self._backward = backward if requires_grad else None
        self.grad = None
        self._released = False

    @property
    def shape(self):
        return self.value.shape

    def detach(self):
        """Constant node sharing this value; gradients do not flow past it."""
        return Node(self.value, requires_grad=False)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter(Node):
    """A named trainable leaf with persistent gradient and Adam state."""

    __slots__ = ("name", "m", "v", "t")

    def __init__(self, value, name=""):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.t = 0

    def zero_grad(self):
        self.grad[...] = 0.0


def constant(value):
    return Node(value, requires_grad=False)


def _as_node(x):
    return x if isinstance(x, Node) else constant(np.asarray(x, dtype=np.float64))


def _accum(node, g):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _unbroadcast(g, shape):
    """Sum an adjoint back down to ``shape`` along broadcast (extent-1) axes."""
    if g.shape == shape:
        return g
    if len(shape) < g.ndim:  # 0-d scalar operand
        return g.sum().reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Propagate d(loss)/d(node) through the graph below ``loss``.

    ``loss`` must hold a single scalar.  The traversed graph is released
    afterwards; calling backward on the same loss again raises GraphError.
    Leaves that do not participate keep whatever gradient they already hold
    (zeros for freshly zeroed Parameters).
    """
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if loss._released:
        raise GraphError("graph already released; rebuild the forward pass")

    # iterative post-order topological sort over requires-grad subgraph
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        if node._released:
            raise GraphError("graph contains a node from an already-released tape")
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        # release interior references so activations free promptly; keep leaves
        if node.parents:
            node._backward = None
            node.parents = ()
            node.grad = None
            node._released = True
    loss._released = True


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _as_node(a), _as_node(b)
    val = kernels.zip_binary(a.value, b.value, "add")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return Node(val, (a, b), bwd)


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    val = kernels.zip_binary(a.value, b.value, "sub")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return Node(val, (a, b), bwd)


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    val = kernels.zip_binary(a.value, b.value, "mul")

    def bwd(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return Node(val, (a, b), bwd)


def div(a, b):
    a, b = _as_node(a), _as_node(b)
    val = kernels.zip_binary(a.value, b.value, "div")

    def bwd(g):
        _accum(a, _unbroadcast(g / b.value, a.value.shape))
        _accum(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return Node(val, (a, b), bwd)


def neg(a):
    a = _as_node(a)
    return Node(-a.value, (a,), lambda g: _accum(a, -g))


def absolute(a):
    a = _as_node(a)
    sign = np.sign(a.value)
    return Node(np.abs(a.value), (a,), lambda g: _accum(a, g * sign))


def exp(a):
    a = _as_node(a)
    val = np.exp(a.value)
    return Node(val, (a,), lambda g: _accum(a, g * val))


def log(a):
    a = _as_node(a)
    val = kernels.map_unary(a.value, "log")
    return Node(val, (a,), lambda g: _accum(a, g / a.value))


def sqrt(a):
    a = _as_node(a)
    val = kernels.map_unary(a.value, "sqrt")

    def bwd(g):
        _accum(a, g * 0.5 / val)

    return Node(val, (a,), bwd)


def sigmoid(a):
    a = _as_node(a)
    val = kernels.sigmoid(a.value)
    return Node(val, (a,), lambda g: _accum(a, g * val * (1.0 - val)))


def tanh(a):
    a = _as_node(a)
    val = np.tanh(a.value)
    return Node(val, (a,), lambda g: _accum(a, g * (1.0 - val * val)))


def leaky_relu(a, slope=0.2):
    a = _as_node(a)
    val = kernels.map_unary(a.value, "leaky_relu", slope=slope)
    deriv = np.where(a.value >= 0, 1.0, slope)
    return Node(val, (a,), lambda g: _accum(a, g * deriv))


def softplus(a):
    a = _as_node(a)
    val = kernels.softplus(a.value)
    sig = kernels.sigmoid(a.value)
    return Node(val, (a,), lambda g: _accum(a, g * sig))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(a, axes):
    if axes is None:
        return tuple(range(a.value.ndim))
    if isinstance(axes, int):
        return (axes,)
    return tuple(sorted(set(int(x) for x in axes)))


def reduce_sum(a, axes=None, keepdims=False):
    a = _as_node(a)
    axes = _norm_axes(a, axes)
    val = kernels.reduce(a.value, axes, "sum", keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.value.shape))

    return Node(val, (a,), bwd)


def reduce_mean(a, axes=None, keepdims=False):
    a = _as_node(a)
    axes = _norm_axes(a, axes)
    count = float(np.prod([a.value.shape[i] for i in axes])) if axes else 1.0
    val = kernels.reduce(a.value, axes, "mean", keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.value.shape) / count)

    return Node(val, (a,), bwd)


def reduce_max(a, axes=None, keepdims=False):
    a = _as_node(a)
    axes = _norm_axes(a, axes)
    val = kernels.reduce(a.value, axes, "max", keepdims=keepdims)

    def bwd(g):
        vk = val if keepdims else np.expand_dims(val, axes)
        gk = g if keepdims else np.expand_dims(g, axes)
        mask = (a.value == vk).astype(np.float64)
        ties = mask.sum(axis=axes, keepdims=True)
        # ties share the adjoint equally (deterministic subgradient choice)
        _accum(a, mask * (gk / ties))

    return Node(val, (a,), bwd)


def reshape(a, shape):
    a = _as_node(a)
    old = a.value.shape
    val = a.value.reshape(shape)
    return Node(val, (a,), lambda g: _accum(a, g.reshape(old)))


def concat(parts):
    parts = [_as_node(p) for p in parts]
    val = kernels.concat_channels(*[p.value for p in parts])
    widths = [p.value.shape[1] for p in parts]

    def bwd(g):
        ofs = 0
        for p, w in zip(parts, widths):
            _accum(p, np.ascontiguousarray(g[:, ofs:ofs + w]))
            ofs += w

    return Node(val, tuple(parts), bwd)


# ---------------------------------------------------------------------------
# structured ops


def conv3d(x, w, b, spec: ConvSpec):
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    val = kernels.conv3d(x.value, w.value, b.value, spec)

    def bwd(g):
        gx, gw, gb = kernels.conv3d_backward(
            x.value, w.value, spec, g,
            need=(x.requires_grad, w.requires_grad, b.requires_grad),
        )
        if gx is not None:
            _accum(x, gx)
        if gw is not None:
            _accum(w, gw)
        if gb is not None:
            _accum(b, gb)

    return Node(val, (x, w, b), bwd)


def upsample_nearest3d(x, factors):
    x = _as_node(x)
    val = kernels.upsample_nearest3d(x.value, factors)
    return Node(val, (x,),
                lambda g: _accum(x, kernels.upsample_nearest3d_backward(g, factors)))


# ---------------------------------------------------------------------------
# modules and the optimizer


class Module:
    """Minimal container: attributes that are Parameters, Modules, or lists
    of Modules are walked in insertion order for stable parameter paths."""

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for key, attr in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(attr, Parameter):
                out.append((path, attr))
            elif isinstance(attr, Module):
                out.extend(attr.named_parameters(path))
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{path}.{i}"))
                    elif isinstance(item, Parameter):
                        out.append((f"{path}.{i}", item))
        return out

    def bind_names(self, prefix=""):
        """Assign each parameter its path name; call once after construction."""
        for path, p in self.named_parameters(prefix):
            p.name = path

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0,1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


class OptimError(RuntimeError):
    """Raised when an optimizer step cannot be applied (non-finite gradient)."""


class Adam:
    """Adam with bias correction; state lives on the Parameters themselves."""

    def __init__(self, params, config: OptimizerConfig = OptimizerConfig()):
        self.params = list(params)
        self.config = config

    def step(self):
        c = self.config
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise OptimError(f"non-finite gradient for parameter {p.name!r}")
            g = p.grad
            p.t += 1
            p.m = c.beta1 * p.m + (1.0 - c.beta1) * g
            p.v = c.beta2 * p.v + (1.0 - c.beta2) * (g * g)
            m_hat = p.m / (1.0 - c.beta1 ** p.t)
            v_hat = p.v / (1.0 - c.beta2 ** p.t)
            p.value -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int

    def __bool__(self):
        return self.passed


def grad_check(f, inputs, eps=1e-5, tol=1e-4, max_coords=None, seed=0):
    """Compare backward() against central finite differences.

    ``f`` maps a list of Nodes to a scalar Node and must be deterministic.
    ``inputs`` are ndarrays; every coordinate is checked unless ``max_coords``
    caps the per-input sample (chosen by a seeded RNG for reproducibility).
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    inputs = [kernels.as_f64(x).copy() for x in inputs]

    def eval_at(arrs):
        nodes = [Node(a, requires_grad=True) for a in arrs]
        out = f(nodes)
        val = float(out.value.reshape(()))
        if not math.isfinite(val):
            raise ValueError("grad_check: function evaluated to a non-finite value")
        return val, nodes, out

    _, nodes, out = eval_at(inputs)
    backward(out)
    analytic = [n.grad if n.grad is not None else np.zeros_like(n.value) for n in nodes]

    rng = np.random.default_rng(seed)
    max_err = 0.0
    checked = 0
    for i, base in enumerate(inputs):
        flat = base.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idxs = rng.choice(flat.size, size=max_coords, replace=False)
            idxs.sort()
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + eps
            fp, _, _ = eval_at(inputs)
            flat[j] = orig - eps
            fm, _, _ = eval_at(inputs)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * eps)
            ana = analytic[i].reshape(-1)[j]
            denom = max(abs(ana), abs(numeric), 1e-8)
            max_err = max(max_err, abs(ana - numeric) / denom)
            checked += 1
    return GradCheckReport(max_rel_error=max_err, passed=max_err <= tol, checked=checked)
