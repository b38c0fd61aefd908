"""Define-then-run reverse-mode differentiation over float64 numpy arrays.

A graph is built from :func:`leaf` / :func:`const` nodes and the op
constructors below (``Node`` also overloads ``+ - * @``). Leaves are bound by
name at evaluation time, so one graph can be evaluated, differentiated and
finite-differenced against many bindings.

>>> x = leaf("x")
>>> loss = sqnorm(x)
>>> gradients(loss, {"x": np.array([1.0, -2.0])}, {"x"})["x"]
array([ 2., -4.])
"""
import functools
import itertools

import numpy as np

from . import kernels
from .errors import NonFiniteError, ShapeError

LN_EPS = 1e-5

_ids = itertools.count()


class Node:
    __slots__ = ("op", "inputs", "attrs", "id")

    def __init__(self, op, inputs=(), **attrs):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.id = next(_ids)

    def __repr__(self):
        if self.op == "leaf":
            return f"<leaf {self.attrs['name']!r}>"
        return f"<{self.op} #{self.id}>"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __truediv__(self, c):
        return scale(self, 1.0 / c)


def _wrap(x):
    return x if isinstance(x, Node) else const(x)


# -- graph construction -----------------------------------------------------

def leaf(name):
    return Node("leaf", name=name)


def const(value):
    return Node("const", value=np.asarray(value, dtype=np.float64))


def add(a, b):
    return Node("add", (a, b))


def sub(a, b):
    return Node("sub", (a, b))


def mul(a, b):
    return Node("mul", (a, b))


def scale(a, c):
    return Node("scale", (a,), c=float(c))


def matmul(a, b):
    return Node("matmul", (a, b))


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    return Node("transpose", (a,), axes=None if axes is None else tuple(axes))


def reshape(a, shape):
    return Node("reshape", (a,), shape=tuple(shape))


def concat(nodes, axis=0):
    return Node("concat", tuple(nodes), axis=axis)


def gather(a, index, axis=-2):
    """Select rows ``index`` along ``axis`` (rows = second-to-last by default)."""
    return Node("gather", (a,), index=np.asarray(index, dtype=np.intp), axis=axis)


def scatter(a, index, size, axis=-2):
    """Inverse of :func:`gather`: place rows at ``index`` in a zero array of ``size`` rows."""
    return Node("scatter", (a,), index=np.asarray(index, dtype=np.intp), size=int(size), axis=axis)


def sum_(a, axis=None, keepdims=False):
    return Node("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return Node("mean", (a,), axis=axis, keepdims=keepdims)


def layernorm(x, gamma, beta, eps=LN_EPS):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    return Node("layernorm", (x, gamma, beta), eps=float(eps))


def softmax(x):
    return Node("softmax", (x,))


def logsumexp(x, mask=None):
    """Stabilised log-sum-exp over the last axis, restricted to ``mask`` entries."""
    if mask is not None:
        mask = np.asarray(mask, dtype=np.bool_)
    return Node("logsumexp", (x,), mask=mask)


def gelu(x):
    return Node("gelu", (x,))


def exp(x):
    return Node("exp", (x,))


def log(x):
    return Node("log", (x,))


def sqnorm(x):
    return Node("sqnorm", (x,))


def dropout(x, p, seed, train=True):
    """Inverted dropout; the mask is a pure function of ``seed`` and the input shape."""
    if not train or p == 0.0:
        return x
    return Node("dropout", (x,), p=float(p), seed=int(seed))


# -- forward / backward rules -----------------------------------------------

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _as2d(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def _fwd_add(v, a):
    return v[0] + v[1], None


def _bwd_add(g, v, out, ctx, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _fwd_sub(v, a):
    return v[0] - v[1], None


def _bwd_sub(g, v, out, ctx, a):
    return _unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)


def _fwd_mul(v, a):
    return v[0] * v[1], None


def _bwd_mul(g, v, out, ctx, a):
    return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)


def _fwd_scale(v, a):
    return v[0] * a["c"], None


def _bwd_scale(g, v, out, ctx, a):
    return (g * a["c"],)


def _fwd_matmul(v, a):
    x, y = v
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ValueError(f"matmul {x.shape} @ {y.shape}")
    return np.matmul(x, y), None


def _bwd_matmul(g, v, out, ctx, a):
    x, y = v
    gx = np.matmul(g, np.swapaxes(y, -1, -2))
    gy = np.matmul(np.swapaxes(x, -1, -2), g)
    return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)


def _axes(x, axes):
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    return axes


def _fwd_transpose(v, a):
    return np.transpose(v[0], _axes(v[0], a["axes"])), None


def _bwd_transpose(g, v, out, ctx, a):
    return (np.transpose(g, np.argsort(_axes(v[0], a["axes"]))),)


def _fwd_reshape(v, a):
    return v[0].reshape(a["shape"]), None


def _bwd_reshape(g, v, out, ctx, a):
    return (g.reshape(v[0].shape),)


def _fwd_concat(v, a):
    return np.concatenate(v, axis=a["axis"]), None


def _bwd_concat(g, v, out, ctx, a):
    cuts = np.cumsum([x.shape[a["axis"]] for x in v])[:-1]
    return tuple(np.split(g, cuts, axis=a["axis"]))


def _fwd_gather(v, a):
    return np.take(v[0], a["index"], axis=a["axis"]), None


def _bwd_gather(g, v, out, ctx, a):
    gx = np.zeros_like(v[0])
    axis = a["axis"] % gx.ndim
    sl = [slice(None)] * gx.ndim
    sl[axis] = a["index"]
    np.add.at(gx, tuple(sl), g)
    return (gx,)


def _fwd_scatter(v, a):
    x = v[0]
    axis = a["axis"] % x.ndim
    shape = list(x.shape)
    shape[axis] = a["size"]
    y = np.zeros(shape)
    sl = [slice(None)] * x.ndim
    sl[axis] = a["index"]
    y[tuple(sl)] = x
    return y, None


def _bwd_scatter(g, v, out, ctx, a):
    return (np.take(g, a["index"], axis=a["axis"]),)


def _fwd_sum(v, a):
    return np.asarray(v[0].sum(axis=a["axis"], keepdims=a["keepdims"]), dtype=np.float64), None


def _expand(g, x, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape).copy()


def _bwd_sum(g, v, out, ctx, a):
    return (_expand(g, v[0], a["axis"], a["keepdims"]),)


def _fwd_mean(v, a):
    return np.asarray(v[0].mean(axis=a["axis"], keepdims=a["keepdims"]), dtype=np.float64), None


def _bwd_mean(g, v, out, ctx, a):
    x = v[0]
    n = x.size if a["axis"] is None else np.prod([x.shape[i] for i in np.atleast_1d(a["axis"])])
    return (_expand(g, x, a["axis"], a["keepdims"]) / n,)


def _fwd_layernorm(v, a):
    x, gamma, beta = v
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(f"layernorm params {gamma.shape}/{beta.shape} for input {x.shape}")
    y, xhat, rstd = kernels.layernorm_fwd(_as2d(x), gamma, beta, a["eps"])
    return y.reshape(x.shape), (xhat, rstd)


def _bwd_layernorm(g, v, out, ctx, a):
    xhat, rstd = ctx
    dx, dgamma, dbeta = kernels.layernorm_bwd(_as2d(g), xhat, rstd, v[1])
    return dx.reshape(v[0].shape), dgamma, dbeta


def _fwd_softmax(v, a):
    return kernels.softmax_fwd(_as2d(v[0])).reshape(v[0].shape), None


def _bwd_softmax(g, v, out, ctx, a):
    return (kernels.softmax_bwd(_as2d(g), _as2d(out)).reshape(g.shape),)


def _fwd_logsumexp(v, a):
    x = v[0]
    mask = a["mask"]
    if mask is None:
        mask = np.ones(x.shape, dtype=np.bool_)
    elif mask.shape != x.shape:
        raise ValueError(f"logsumexp mask {mask.shape} for input {x.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("logsumexp row with no unmasked entries")
    out, w = kernels.logsumexp_fwd(_as2d(x), np.ascontiguousarray(mask.reshape(-1, x.shape[-1])))
    return out.reshape(x.shape[:-1]), w.reshape(x.shape)


def _bwd_logsumexp(g, v, out, ctx, a):
    return (g[..., None] * ctx,)


def _fwd_gelu(v, a):
    y, t = kernels.gelu_fwd(_as2d(v[0]))
    return y.reshape(v[0].shape), t


def _bwd_gelu(g, v, out, ctx, a):
    return (kernels.gelu_bwd(_as2d(g), _as2d(v[0]), ctx).reshape(g.shape),)


def _fwd_exp(v, a):
    return np.exp(v[0]), None


def _bwd_exp(g, v, out, ctx, a):
    return (g * out,)


def _fwd_log(v, a):
    if np.any(v[0] <= 0):
        raise FloatingPointError("log of non-positive value")
    return np.log(v[0]), None


def _bwd_log(g, v, out, ctx, a):
    return (g / v[0],)


def _fwd_sqnorm(v, a):
    return np.asarray(np.sum(v[0] * v[0])), None


def _bwd_sqnorm(g, v, out, ctx, a):
    return (2.0 * g * v[0],)


@functools.lru_cache(maxsize=256)
def _keep_mask(seed, shape, p):
    keep = (np.random.default_rng(seed).random(shape) >= p) / (1.0 - p)
    keep.flags.writeable = False
    return keep


def _fwd_dropout(v, a):
    keep = _keep_mask(a["seed"], v[0].shape, a["p"])
    return v[0] * keep, keep


def _bwd_dropout(g, v, out, ctx, a):
    return (g * ctx,)


_RULES = {
    name: (globals()[f"_fwd_{name}"], globals()[f"_bwd_{name}"])
    for name in ("add", "sub", "mul", "scale", "matmul", "transpose", "reshape", "concat",
                 "gather", "scatter", "sum", "mean", "layernorm", "softmax", "logsumexp",
                 "gelu", "exp", "log", "sqnorm", "dropout")
}


# -- evaluation -------------------------------------------------------------

def topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for inp in reversed(node.inputs):
            if inp.id not in seen:
                stack.append((inp, False))
    return order


def leaf_names(root):
    return sorted({n.attrs["name"] for n in topo_order(root) if n.op == "leaf"})


def _forward(node, args):
    fwd = _RULES[node.op][0]
    try:
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            out, ctx = fwd(args, node.attrs)
    except FloatingPointError as exc:
        raise NonFiniteError(f"{node!r}: {exc}") from None
    except ValueError as exc:
        shapes = [x.shape for x in args]
        raise ShapeError(f"{node!r} with input shapes {shapes}: {exc}") from None
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{node!r} produced a non-finite value")
    return out, ctx


class Tape:
    """Forward values (and backward contexts) of every node reachable from ``root``."""

    def __init__(self, root, bindings):
        self.root = root
        self.bindings = bindings
        self.order = topo_order(root)
        self.values = {}
        self.ctx = {}
        for node in self.order:
            if node.op == "leaf":
                name = node.attrs["name"]
                if name not in bindings:
                    raise KeyError(f"unbound leaf {name!r}")
                val = np.asarray(bindings[name], dtype=np.float64)
                if not np.all(np.isfinite(val)):
                    raise NonFiniteError(f"non-finite binding for leaf {name!r}")
                self.values[node.id] = val
                continue
            if node.op == "const":
                self.values[node.id] = node.attrs["value"]
                continue
            out, ctx = _forward(node, [self.values[i.id] for i in node.inputs])
            self.values[node.id] = out
            self.ctx[node.id] = ctx
        self._cones = {}

    def value(self, node=None):
        return self.values[(node or self.root).id]

    def _cone(self, leaf_name):
        """Nodes (in forward order) whose value depends on ``leaf_name``."""
        if leaf_name not in self._cones:
            hit = set()
            for node in self.order:
                if (node.op == "leaf" and node.attrs["name"] == leaf_name) or any(
                        i.id in hit for i in node.inputs):
                    hit.add(node.id)
            self._cones[leaf_name] = [n for n in self.order if n.id in hit]
        return self._cones[leaf_name]

    def rerun(self, leaf_name, value):
        """Root value with ``leaf_name`` rebound to ``value``; only its downstream cone is
        recomputed and the tape itself is left untouched."""
        local = {}
        for node in self._cone(leaf_name):
            if node.op == "leaf":
                local[node.id] = np.asarray(value, dtype=np.float64)
                continue
            args = [local.get(i.id, self.values[i.id]) for i in node.inputs]
            local[node.id] = _RULES[node.op][0](args, node.attrs)[0]
        out = local.get(self.root.id, self.values[self.root.id])
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite root after rebinding {leaf_name!r}")
        return out

    def backward(self, wrt):
        """Adjoints of the scalar root with respect to the named leaves."""
        root_val = self.values[self.root.id]
        if root_val.size != 1:
            raise ShapeError(f"gradients need a scalar root, got shape {root_val.shape}")
        wrt = set(wrt)
        adj = {self.root.id: np.ones_like(root_val)}
        grads = {}
        for node in reversed(self.order):
            g = adj.pop(node.id, None)
            if g is None:
                continue
            if node.op == "leaf":
                name = node.attrs["name"]
                if name in wrt:
                    grads[name] = grads[name] + g if name in grads else g
                continue
            if node.op == "const":
                continue
            bwd = _RULES[node.op][1]
            args = [self.values[i.id] for i in node.inputs]
            in_grads = bwd(g, args, self.values[node.id], self.ctx[node.id], node.attrs)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or inp.op == "const":
                    continue
                if inp.id in adj:
                    adj[inp.id] = adj[inp.id] + gi
                else:
                    adj[inp.id] = gi
        for name in wrt:
            if name not in grads:  # leaf unreachable from the root
                grads[name] = np.zeros_like(np.asarray(self.bindings.get(name, 0.0), dtype=np.float64))
        return grads


def evaluate(root, bindings):
    return Tape(root, bindings).value()


def gradients(root, bindings, wrt):
    return Tape(root, bindings).backward(wrt)


def finite_difference(root, bindings, leaf_name, h=1e-5, coords=None):
    """Central-difference estimate of d root / d leaf.

    With ``coords`` (flat indices) only those coordinates are probed and a 1-D
    array is returned; otherwise the full leaf-shaped estimate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.asarray(bindings[leaf_name], dtype=np.float64)
    flat_idx = range(base.size) if coords is None else coords
    out = np.empty(len(flat_idx))
    tape = Tape(root, bindings)
    x = base.copy().reshape(-1)
    for n, i in enumerate(flat_idx):
        orig = x[i]
        x[i] = orig + h
        fp = float(tape.rerun(leaf_name, x.reshape(base.shape)))
        x[i] = orig - h
        fm = float(tape.rerun(leaf_name, x.reshape(base.shape)))
        x[i] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape) if coords is None else out
