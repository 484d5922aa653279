"""Dense float64 tensors plus a small reverse-mode expression graph.

Graphs are built once from named leaves, then evaluated repeatedly against
bindings (leaf name -> Tensor). ``gradients`` walks the recorded graph in
reverse; leaves created with ``requires_grad=False`` are opaque constants,
so anything computed from them (teacher outputs in particular) contributes
no gradient by construction.

Every forward result is checked for NaN/Inf; a failure raises NumericError
naming the offending node.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ShapeError

_ids = itertools.count()


class Tensor:
    """A dense float64 array with a differentiability flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Node:
    """One operation record in an expression graph."""

    __slots__ = ("id", "op", "inputs", "shape", "attrs", "label", "requires_grad")

    def __init__(self, op, inputs, shape, attrs=None, label=None, requires_grad=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.shape = tuple(int(s) for s in shape)
        self.attrs = attrs or {}
        self.label = label or f"{op}#{self.id}"
        if requires_grad is None:
            requires_grad = any(i.requires_grad for i in self.inputs)
        self.requires_grad = requires_grad

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def leaf(name: str, shape, requires_grad: bool = True) -> Node:
    """Named input slot; its value is supplied at evaluate() time."""
    n = Node("leaf", (), shape, label=name, requires_grad=requires_grad)
    n.attrs["name"] = name
    return n


def const(value, label=None) -> Node:
    arr = np.asarray(value, dtype=np.float64)
    n = Node("const", (), arr.shape, label=label, requires_grad=False)
    n.attrs["value"] = arr
    return n


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return const(x)


def _binary_shape(a: Node, b: Node, opname: str):
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} and {b.shape} "
                         f"({a.label}, {b.label})") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{opname}: broadcast of {a.shape} and {b.shape} would create "
                         f"a new shape {out}; refusing to guess ({a.label}, {b.label})")
    return out


def _unbroadcast(g: np.ndarray, shape):
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b, label=None) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node("add", (a, b), _binary_shape(a, b, "add"), label=label)


def sub(a, b, label=None) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node("sub", (a, b), _binary_shape(a, b, "sub"), label=label)


def mul(a, b, label=None) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node("mul", (a, b), _binary_shape(a, b, "mul"), label=label)


def neg(a, label=None) -> Node:
    a = _as_node(a)
    return Node("neg", (a,), a.shape, label=label)


def matmul(a: Node, b: Node, label=None) -> Node:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape} "
                         f"({a.label}, {b.label})")
    return Node("matmul", (a, b), (a.shape[0], b.shape[1]), label=label)


def relu(a: Node, label=None) -> Node:
    return Node("relu", (a,), a.shape, label=label)


def tanh(a: Node, label=None) -> Node:
    return Node("tanh", (a,), a.shape, label=label)


def exp(a: Node, label=None) -> Node:
    return Node("exp", (a,), a.shape, label=label)


def log(a: Node, label=None) -> Node:
    return Node("log", (a,), a.shape, label=label)


def sqrt(a: Node, label=None) -> Node:
    return Node("sqrt", (a,), a.shape, label=label)


def square(a: Node, label=None) -> Node:
    return Node("square", (a,), a.shape, label=label)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _reduced_shape(shape, axes, keepdims):
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def sum_(a: Node, axis=None, keepdims=False, label=None) -> Node:
    axes = _norm_axes(axis, len(a.shape))
    return Node("sum", (a,), _reduced_shape(a.shape, axes, keepdims),
                {"axes": axes, "keepdims": keepdims}, label=label)


def mean(a: Node, axis=None, keepdims=False, label=None) -> Node:
    axes = _norm_axes(axis, len(a.shape))
    return Node("mean", (a,), _reduced_shape(a.shape, axes, keepdims),
                {"axes": axes, "keepdims": keepdims}, label=label)


def softmax(a: Node, axis=-1, label=None) -> Node:
    return Node("softmax", (a,), a.shape, {"axis": axis % len(a.shape)}, label=label)


def logsumexp(a: Node, axis=-1, keepdims=False, label=None) -> Node:
    axes = (axis % len(a.shape),)
    return Node("logsumexp", (a,), _reduced_shape(a.shape, axes, keepdims),
                {"axes": axes, "keepdims": keepdims}, label=label)


def unit(a: Node, label=None) -> Node:
    """L2-normalize along the last axis; zero-norm rows are a contract error."""
    return Node("unit", (a,), a.shape, label=label)


def concat(parts, axis=0, label=None) -> Node:
    parts = [_as_node(p) for p in parts]
    nd = len(parts[0].shape)
    axis = axis % nd
    for p in parts[1:]:
        if len(p.shape) != nd or any(p.shape[i] != parts[0].shape[i]
                                     for i in range(nd) if i != axis):
            raise ShapeError(f"concat: mismatched shapes {[p.shape for p in parts]}")
    shape = list(parts[0].shape)
    shape[axis] = sum(p.shape[axis] for p in parts)
    return Node("concat", parts, shape, {"axis": axis}, label=label)


def reshape(a: Node, shape, label=None) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != int(np.prod(a.shape, dtype=np.int64)):
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape} ({a.label})")
    return Node("reshape", (a,), shape, label=label)


def transpose(a: Node, perm, label=None) -> Node:
    perm = tuple(perm)
    if sorted(perm) != list(range(len(a.shape))):
        raise ShapeError(f"transpose: bad permutation {perm} for {a.shape}")
    return Node("transpose", (a,), tuple(a.shape[p] for p in perm), {"perm": perm},
                label=label)


def slice_axis(a: Node, axis: int, start: int, stop: int, label=None) -> Node:
    axis = axis % len(a.shape)
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for axis {axis} "
                         f"of {a.shape}")
    shape = list(a.shape)
    shape[axis] = stop - start
    return Node("slice", (a,), shape, {"axis": axis, "start": start, "stop": stop},
                label=label)


def conv1d(x: Node, w: Node, bias: Node | None = None, stride: int = 1,
           padding: int = 0, label=None) -> Node:
    if len(x.shape) != 3 or len(w.shape) != 3:
        raise ShapeError(f"conv1d: expected 3-D operands, got {x.shape} and {w.shape}")
    b, cin, t = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d: input channels {cin} != weight channels {cin_w} "
                         f"({x.label}, {w.label})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} != ({cout},)")
    span = t + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(f"conv1d: length {t} with pad {padding} incompatible with "
                         f"kernel {k} stride {stride} ({x.label})")
    inputs = (x, w) if bias is None else (x, w, bias)
    return Node("conv1d", inputs, (b, cout, span // stride + 1),
                {"stride": stride, "padding": padding}, label=label)


def maxpool1d(x: Node, kernel: int, label=None) -> Node:
    b, c, t = x.shape
    if t % kernel != 0:
        raise ShapeError(f"maxpool1d: length {t} not divisible by {kernel} ({x.label})")
    return Node("maxpool1d", (x,), (b, c, t // kernel), {"kernel": kernel}, label=label)


def batchnorm_train(x: Node, gamma: Node, beta: Node, axes, eps=1e-5, label=None) -> Node:
    axes = _norm_axes(axes, len(x.shape))
    pshape = _reduced_shape(x.shape, axes, keepdims=False)
    if gamma.shape != pshape or beta.shape != pshape:
        raise ShapeError(f"batchnorm: parameter shape {gamma.shape} does not match "
                         f"non-reduced extents {pshape} of {x.shape}")
    return Node("bn_train", (x, gamma, beta), x.shape, {"axes": axes, "eps": eps},
                label=label)


def batchnorm_eval(x: Node, gamma: Node, beta: Node, rmean: Node, rvar: Node,
                   axes, eps=1e-5, label=None) -> Node:
    axes = _norm_axes(axes, len(x.shape))
    if rmean.requires_grad or rvar.requires_grad:
        raise ContractError("batchnorm_eval: running statistics must not require grad")
    return Node("bn_eval", (x, gamma, beta, rmean, rvar), x.shape,
                {"axes": axes, "eps": eps}, label=label)


def cosine(a: Node, b: Node, label=None) -> Node:
    """Cosine similarity along the last axis (composite of unit, mul, sum)."""
    return sum_(mul(unit(a), unit(b)), axis=-1, label=label)


def std_over(a: Node, axis, eps=1e-12, label=None) -> Node:
    """Biased standard deviation along `axis` (composite reduction)."""
    mu = mean(a, axis=axis, keepdims=True)
    var = mean(square(sub(a, mu)), axis=axis)
    return sqrt(add(var, const(eps)), label=label)


# ---------------------------------------------------------------------------
# Graph

class ExprGraph:
    """Topologically ordered view of the expression tree rooted at `root`."""

    def __init__(self, root: Node):
        self.root = root
        self.nodes = self._toposort(root)
        self.leaves: dict[str, Node] = {}
        for n in self.nodes:
            if n.op == "leaf":
                name = n.attrs["name"]
                if name in self.leaves and self.leaves[name] is not n:
                    raise ContractError(f"duplicate leaf name {name!r} in graph")
                self.leaves[name] = n
        self._values = None
        self._aux = None
        self._bindings = None

    @staticmethod
    def _toposort(root):
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
            for inp in node.inputs:
                if inp.id not in seen:
                    stack.append((inp, False))
        return order

    def value_of(self, node: Node) -> np.ndarray:
        """Cached forward value of an interior node from the last evaluate()."""
        if self._values is None:
            raise ContractError("evaluate() has not been run on this graph")
        return self._values[node.id]

    def aux_of(self, node: Node):
        """Auxiliary forward cache of a node (e.g. batch-norm statistics)."""
        if self._aux is None:
            raise ContractError("evaluate() has not been run on this graph")
        return self._aux[node.id]


def evaluate(graph: ExprGraph, bindings: dict) -> Tensor:
    """Run the forward pass; caches every intermediate for gradients()."""
    bound = {}
    for name, node in graph.leaves.items():
        if name not in bindings:
            raise ContractError(f"leaf {name!r} is not bound")
        v = bindings[name]
        arr = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
        if arr.shape != node.shape:
            raise ShapeError(f"binding for leaf {name!r} has shape {arr.shape}, "
                             f"declared {node.shape}")
        bound[name] = arr

    values, aux = {}, {}
    for node in graph.nodes:
        if node.op == "leaf":
            out = bound[node.attrs["name"]]
        elif node.op == "const":
            out = node.attrs["value"]
        else:
            args = [values[i.id] for i in node.inputs]
            out = _FORWARD[node.op](node, args, aux)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite values produced by node {node.label}")
        values[node.id] = out
    graph._values = values
    graph._aux = aux
    graph._bindings = bound
    return Tensor(values[graph.root.id])


def gradients(graph: ExprGraph, wrt) -> dict[str, Tensor]:
    """d(root)/d(leaf) for each requested leaf; unreached leaves get zeros."""
    if graph._values is None:
        raise ContractError("gradients() requires a prior evaluate() on this graph")
    if graph.root.shape != ():
        raise ContractError(f"gradients() requires a scalar root, got shape "
                            f"{graph.root.shape}")
    for name in wrt:
        if name not in graph.leaves:
            raise ContractError(f"unknown leaf {name!r}")

    values, aux = graph._values, graph._aux
    adjoint = {graph.root.id: np.ones((), dtype=np.float64)}
    for node in reversed(graph.nodes):
        if node.op in ("leaf", "const"):
            continue
        g = adjoint.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        args = [values[i.id] for i in node.inputs]
        grads = _BACKWARD[node.op](node, g, args, values, aux)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in adjoint:
                adjoint[inp.id] = adjoint[inp.id] + gi
            else:
                adjoint[inp.id] = gi

    out = {}
    for name in wrt:
        node = graph.leaves[name]
        g = adjoint.get(node.id)
        out[name] = Tensor(np.zeros(node.shape) if g is None else np.asarray(g))
    return out


def finite_difference_check(graph: ExprGraph, leaf_name: str, epsilon: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8). The graph
    must have been evaluated; its bindings are restored before returning.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ContractError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    if graph._bindings is None:
        raise ContractError("finite_difference_check requires a prior evaluate()")
    if leaf_name not in graph.leaves:
        raise ContractError(f"unknown leaf {leaf_name!r}")

    base = dict(graph._bindings)
    evaluate(graph, base)
    analytic = gradients(graph, {leaf_name})[leaf_name].data
    x0 = base[leaf_name]

    worst = 0.0
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] = x0[idx] + epsilon
        f_plus = float(evaluate(graph, {**base, leaf_name: xp}).data)
        xm = x0.copy()
        xm[idx] = x0[idx] - epsilon
        f_minus = float(evaluate(graph, {**base, leaf_name: xm}).data)
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)

    evaluate(graph, base)
    return worst


# ---------------------------------------------------------------------------
# Forward implementations

def _fw_add(node, args, aux):
    return args[0] + args[1]


def _fw_sub(node, args, aux):
    return args[0] - args[1]


def _fw_mul(node, args, aux):
    return args[0] * args[1]


def _fw_neg(node, args, aux):
    return -args[0]


def _fw_matmul(node, args, aux):
    return args[0] @ args[1]


def _fw_relu(node, args, aux):
    return np.maximum(args[0], 0.0)


def _fw_tanh(node, args, aux):
    return np.tanh(args[0])


def _fw_exp(node, args, aux):
    return np.exp(args[0])


def _fw_log(node, args, aux):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(args[0])


def _fw_sqrt(node, args, aux):
    with np.errstate(invalid="ignore"):
        return np.sqrt(args[0])


def _fw_square(node, args, aux):
    return args[0] * args[0]


def _fw_sum(node, args, aux):
    return args[0].sum(axis=node.attrs["axes"], keepdims=node.attrs["keepdims"])


def _fw_mean(node, args, aux):
    return args[0].mean(axis=node.attrs["axes"], keepdims=node.attrs["keepdims"])


def _fw_softmax(node, args, aux):
    x = args[0]
    ax = node.attrs["axis"]
    y = np.exp(x - x.max(axis=ax, keepdims=True))
    y /= y.sum(axis=ax, keepdims=True)
    aux[node.id] = y
    return y


def _fw_logsumexp(node, args, aux):
    x = args[0]
    (ax,) = node.attrs["axes"]
    m = x.max(axis=ax, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=ax, keepdims=True)
    aux[node.id] = e / s
    out = m + np.log(s)
    if not node.attrs["keepdims"]:
        out = out.reshape(node.shape)
    return out


def _fw_unit(node, args, aux):
    x = args[0]
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if norms.min() <= 1e-12:
        raise ContractError(f"unit: zero-norm vector at node {node.label}")
    y = x / norms
    aux[node.id] = (y, norms)
    return y


def _fw_concat(node, args, aux):
    return np.concatenate(args, axis=node.attrs["axis"])


def _fw_reshape(node, args, aux):
    return args[0].reshape(node.shape)


def _fw_transpose(node, args, aux):
    return args[0].transpose(node.attrs["perm"])


def _fw_slice(node, args, aux):
    sl = [slice(None)] * len(args[0].shape)
    sl[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
    return args[0][tuple(sl)]


def _fw_conv1d(node, args, aux):
    x, w = args[0], args[1]
    pad = node.attrs["padding"]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    aux[node.id] = x
    y = kernels.conv1d_forward(x, w, node.attrs["stride"])
    if len(args) == 3:
        y += args[2][None, :, None]
    return y


def _fw_maxpool(node, args, aux):
    y, idx = kernels.maxpool1d_forward(args[0], node.attrs["kernel"])
    aux[node.id] = idx
    return y


def _param_bshape(xshape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(xshape))


def _fw_bn_train(node, args, aux):
    x, gamma, beta = args
    axes, eps = node.attrs["axes"], node.attrs["eps"]
    bshape = _param_bshape(x.shape, axes)
    m = x.mean(axis=axes, keepdims=True)
    xc = x - m
    v = np.mean(xc * xc, axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(v + eps)
    if node.requires_grad:
        xhat = xc
        xhat *= invstd
        aux[node.id] = (xhat, invstd, m.reshape(gamma.shape), v.reshape(gamma.shape))
        return gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    # constant branch: nothing will read the normalized activations again
    aux[node.id] = (None, invstd, m.reshape(gamma.shape), v.reshape(gamma.shape))
    xc *= gamma.reshape(bshape) * invstd
    xc += beta.reshape(bshape)
    return xc


def _fw_bn_eval(node, args, aux):
    x, gamma, beta, rm, rv = args
    axes, eps = node.attrs["axes"], node.attrs["eps"]
    bshape = _param_bshape(x.shape, axes)
    invstd = 1.0 / np.sqrt(rv.reshape(bshape) + eps)
    if node.requires_grad:
        xhat = (x - rm.reshape(bshape)) * invstd
        aux[node.id] = (xhat, invstd)
        return gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    out = x - rm.reshape(bshape)
    out *= gamma.reshape(bshape) * invstd
    out += beta.reshape(bshape)
    return out


_FORWARD = {
    "add": _fw_add, "sub": _fw_sub, "mul": _fw_mul, "neg": _fw_neg,
    "matmul": _fw_matmul, "relu": _fw_relu, "tanh": _fw_tanh, "exp": _fw_exp,
    "log": _fw_log, "sqrt": _fw_sqrt, "square": _fw_square, "sum": _fw_sum,
    "mean": _fw_mean, "softmax": _fw_softmax, "logsumexp": _fw_logsumexp,
    "unit": _fw_unit, "concat": _fw_concat, "reshape": _fw_reshape,
    "transpose": _fw_transpose, "slice": _fw_slice, "conv1d": _fw_conv1d,
    "maxpool1d": _fw_maxpool, "bn_train": _fw_bn_train, "bn_eval": _fw_bn_eval,
}


# ---------------------------------------------------------------------------
# Backward implementations. Each returns one gradient per input (or None).

def _bw_add(node, g, args, values, aux):
    return (_unbroadcast(g, node.inputs[0].shape),
            _unbroadcast(g, node.inputs[1].shape))


def _bw_sub(node, g, args, values, aux):
    return (_unbroadcast(g, node.inputs[0].shape),
            _unbroadcast(-g, node.inputs[1].shape))


def _bw_mul(node, g, args, values, aux):
    return (_unbroadcast(g * args[1], node.inputs[0].shape),
            _unbroadcast(g * args[0], node.inputs[1].shape))


def _bw_neg(node, g, args, values, aux):
    return (-g,)


def _bw_matmul(node, g, args, values, aux):
    a, b = args
    return (g @ b.T, a.T @ g)


def _bw_relu(node, g, args, values, aux):
    return (g * (args[0] > 0.0),)


def _bw_tanh(node, g, args, values, aux):
    y = values[node.id]
    return (g * (1.0 - y * y),)


def _bw_exp(node, g, args, values, aux):
    return (g * values[node.id],)


def _bw_log(node, g, args, values, aux):
    return (g / args[0],)


def _bw_sqrt(node, g, args, values, aux):
    return (g / (2.0 * values[node.id]),)


def _bw_square(node, g, args, values, aux):
    return (2.0 * g * args[0],)


def _expand_reduced(g, in_shape, axes, keepdims):
    if not keepdims:
        kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
        g = np.asarray(g).reshape(kshape)
    return np.broadcast_to(g, in_shape)


def _bw_sum(node, g, args, values, aux):
    return (_expand_reduced(g, args[0].shape, node.attrs["axes"],
                            node.attrs["keepdims"]).copy(),)


def _bw_mean(node, g, args, values, aux):
    axes = node.attrs["axes"]
    count = np.prod([args[0].shape[a] for a in axes])
    return (_expand_reduced(g, args[0].shape, axes, node.attrs["keepdims"]) / count,)


def _bw_softmax(node, g, args, values, aux):
    y = aux[node.id]
    ax = node.attrs["axis"]
    return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)


def _bw_logsumexp(node, g, args, values, aux):
    smax = aux[node.id]
    g = _expand_reduced(g, args[0].shape, node.attrs["axes"], node.attrs["keepdims"])
    return (g * smax,)


def _bw_unit(node, g, args, values, aux):
    y, norms = aux[node.id]
    return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)


def _bw_concat(node, g, args, values, aux):
    ax = node.attrs["axis"]
    sizes = [a.shape[ax] for a in args]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))


def _bw_reshape(node, g, args, values, aux):
    return (g.reshape(args[0].shape),)


def _bw_transpose(node, g, args, values, aux):
    perm = node.attrs["perm"]
    inv = np.argsort(perm)
    return (g.transpose(inv),)


def _bw_slice(node, g, args, values, aux):
    gx = np.zeros_like(args[0])
    sl = [slice(None)] * len(gx.shape)
    sl[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
    gx[tuple(sl)] = g
    return (gx,)


def _bw_conv1d(node, g, args, values, aux):
    xp = aux[node.id]
    w = args[1]
    gxp, gw = kernels.conv1d_backward(xp, w, g, node.attrs["stride"])
    pad = node.attrs["padding"]
    if pad:
        gxp = gxp[:, :, pad:-pad]
    if len(args) == 3:
        return (gxp, gw, g.sum(axis=(0, 2)))
    return (gxp, gw)


def _bw_maxpool(node, g, args, values, aux):
    return (kernels.maxpool1d_backward(g, aux[node.id], node.attrs["kernel"]),)


def _bw_bn_train(node, g, args, values, aux):
    x, gamma, beta = args
    axes = node.attrs["axes"]
    bshape = _param_bshape(x.shape, axes)
    xhat, invstd, _, _ = aux[node.id]
    n = np.prod([x.shape[a] for a in axes])
    ghat = g * gamma.reshape(bshape)
    gsum = ghat.sum(axis=axes, keepdims=True)
    gdot = (ghat * xhat).sum(axis=axes, keepdims=True)
    gx = (invstd / n) * (n * ghat - gsum - xhat * gdot)
    ggamma = (g * xhat).sum(axis=axes).reshape(gamma.shape)
    gbeta = g.sum(axis=axes).reshape(beta.shape)
    return (gx, ggamma, gbeta)


def _bw_bn_eval(node, g, args, values, aux):
    x, gamma, beta, rm, rv = args
    axes = node.attrs["axes"]
    bshape = _param_bshape(x.shape, axes)
    xhat, invstd = aux[node.id]
    gx = g * gamma.reshape(bshape) * invstd
    ggamma = (g * xhat).sum(axis=axes).reshape(gamma.shape)
    gbeta = g.sum(axis=axes).reshape(beta.shape)
    return (gx, ggamma, gbeta, None, None)


_BACKWARD = {
    "add": _bw_add, "sub": _bw_sub, "mul": _bw_mul, "neg": _bw_neg,
    "matmul": _bw_matmul, "relu": _bw_relu, "tanh": _bw_tanh, "exp": _bw_exp,
    "log": _bw_log, "sqrt": _bw_sqrt, "square": _bw_square, "sum": _bw_sum,
    "mean": _bw_mean, "softmax": _bw_softmax, "logsumexp": _bw_logsumexp,
    "unit": _bw_unit, "concat": _bw_concat, "reshape": _bw_reshape,
    "transpose": _bw_transpose, "slice": _bw_slice, "conv1d": _bw_conv1d,
    "maxpool1d": _bw_maxpool, "bn_train": _bw_bn_train, "bn_eval": _bw_bn_eval,
}
