"""Dense float64 tensors on a reverse-mode tape, with an Adam optimizer.

The tape (`Graph`) is rebuilt for every training step: leaves are created for
parameters and constants, primitives append nodes, and `Graph.backward` walks
the node list once in reverse insertion order.  Tensors are plain wrappers
around numpy arrays and are never mutated after creation; optimizer steps
produce fresh arrays.

Every primitive output is checked for NaN/Inf (a single `sum()` reduction:
any non-finite entry makes the total non-finite, so the check is exact and
cheap).  There is no implicit broadcasting except against scalars.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "AdamState",
    "adam_step",
    "apply_primitive",
    "save_params",
    "load_params",
    "ShapeMismatchError",
    "NonFiniteError",
    "PRIMITIVE_KINDS",
]


class ShapeMismatchError(ValueError):
    """Inputs do not conform to a primitive's arity or shape rules."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


def _f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A node on a Graph: an immutable float64 array plus its node id."""

    __slots__ = ("graph", "node_id", "values")

    def __init__(self, graph: "Graph", node_id: int, values: np.ndarray):
        self.graph = graph
        self.node_id = node_id
        self.values = values

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, node={self.node_id})"

    # Sugar for the common arithmetic; scalars are lifted to constant leaves.
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.graph.constant(np.float64(other))

    def __add__(self, other):
        return self.graph.apply("add", (self, self._lift(other)))

    def __radd__(self, other):
        return self.graph.apply("add", (self._lift(other), self))

    def __mul__(self, other):
        return self.graph.apply("mul", (self, self._lift(other)))

    def __rmul__(self, other):
        return self.graph.apply("mul", (self._lift(other), self))

    def __sub__(self, other):
        other = self._lift(other)
        return self + (other * -1.0)

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return self.graph.apply("matmul", (self, other))


class _Node:
    __slots__ = ("kind", "input_ids", "values", "extras", "param_name")

    def __init__(self, kind, input_ids, values, extras, param_name):
        self.kind = kind
        self.input_ids = input_ids
        self.values = values
        self.extras = extras
        self.param_name = param_name


# ---------------------------------------------------------------------------
# Primitive registry.  Forward functions validate shapes and return the output
# array; vjp functions map the upstream gradient to one gradient per input.
# ---------------------------------------------------------------------------

def _bad(kind, invals, msg):
    shapes = ", ".join(str(v.shape) for v in invals)
    raise ShapeMismatchError(f"{kind}: {msg} (input shapes: {shapes})")


def _fw_affine(invals, extras):
    x, w, b = invals
    if w.ndim != 2 or b.ndim != 1 or x.ndim < 1:
        _bad("affine", invals, "expects x (..., d_in), w (d_in, d_out), b (d_out,)")
    if x.shape[-1] != w.shape[0] or b.shape[0] != w.shape[1]:
        _bad("affine", invals, "inner dimensions do not agree")
    return x @ w + b


def _vjp_affine(invals, out, g, extras):
    x, w, b = invals
    gx = g @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gw = x2.T @ g2
    gb = g2.sum(axis=0)
    return gx, gw, gb


def _fw_sigmoid(invals, extras):
    (x,) = invals
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _vjp_sigmoid(invals, out, g, extras):
    return (g * out * (1.0 - out),)


def _fw_tanh(invals, extras):
    return np.tanh(invals[0])


def _vjp_tanh(invals, out, g, extras):
    return (g * (1.0 - out * out),)


def _fw_relu(invals, extras):
    return np.maximum(invals[0], 0.0)


def _vjp_relu(invals, out, g, extras):
    return (g * (invals[0] > 0.0),)


def _fw_softmax(invals, extras):
    (x,) = invals
    if x.ndim < 1:
        _bad("softmax", invals, "needs at least one axis")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _vjp_softmax(invals, out, g, extras):
    inner = (g * out).sum(axis=-1, keepdims=True)
    return (out * (g - inner),)


def _fw_concat(invals, extras):
    axis = extras["axis"]
    nd = invals[0].ndim
    for v in invals:
        if v.ndim != nd:
            _bad("concat", invals, "rank mismatch")
    return np.concatenate(invals, axis=axis)


def _vjp_concat(invals, out, g, extras):
    axis = extras["axis"]
    sizes = [v.shape[axis] for v in invals]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _fw_sum(invals, extras):
    axis = extras.get("axis")
    keepdims = extras.get("keepdims", False)
    return invals[0].sum(axis=axis, keepdims=keepdims)


def _vjp_sum(invals, out, g, extras):
    x = invals[0]
    axis = extras.get("axis")
    keepdims = extras.get("keepdims", False)
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _elementwise_check(kind, a, b, invals):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    _bad(kind, invals, "shapes must match exactly (scalars excepted)")


def _reduce_to(g, shape):
    # Gradient of a scalar operand that was broadcast against an array.
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def _fw_add(invals, extras):
    a, b = invals
    _elementwise_check("add", a, b, invals)
    return a + b


def _vjp_add(invals, out, g, extras):
    a, b = invals
    return _reduce_to(g, a.shape), _reduce_to(g, b.shape)


def _fw_mul(invals, extras):
    a, b = invals
    _elementwise_check("mul", a, b, invals)
    return a * b


def _vjp_mul(invals, out, g, extras):
    a, b = invals
    return _reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)


def _fw_matmul(invals, extras):
    a, b = invals
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        _bad("matmul", invals, "expects two 2-d or two 3-d (batched) operands")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        _bad("matmul", invals, "inner/batch dimensions do not agree")
    return a @ b


def _vjp_matmul(invals, out, g, extras):
    a, b = invals
    return g @ b.swapaxes(-1, -2), a.swapaxes(-1, -2) @ g


def _fw_swap_last(invals, extras):
    (x,) = invals
    if x.ndim < 2:
        _bad("swap_last", invals, "needs rank >= 2")
    return np.ascontiguousarray(x.swapaxes(-1, -2))


def _vjp_swap_last(invals, out, g, extras):
    return (np.ascontiguousarray(g.swapaxes(-1, -2)),)


def _fw_reshape(invals, extras):
    (x,) = invals
    shape = extras["shape"]
    if int(np.prod(shape)) != x.size:
        _bad("reshape", invals, f"cannot reshape to {shape}")
    return x.reshape(shape)


def _vjp_reshape(invals, out, g, extras):
    return (g.reshape(invals[0].shape),)


def _fw_slice_last(invals, extras):
    (x,) = invals
    start, stop = extras["start"], extras["stop"]
    if not (0 <= start < stop <= x.shape[-1]):
        _bad("slice_last", invals, f"range [{start}, {stop}) out of bounds")
    return np.ascontiguousarray(x[..., start:stop])


def _vjp_slice_last(invals, out, g, extras):
    x = invals[0]
    gx = np.zeros_like(x)
    gx[..., extras["start"]:extras["stop"]] = g
    return (gx,)


def _fw_exp(invals, extras):
    return np.exp(invals[0])


def _vjp_exp(invals, out, g, extras):
    return (g * out,)


def _fw_log(invals, extras):
    return np.log(invals[0])


def _vjp_log(invals, out, g, extras):
    return (g / invals[0],)


def _fw_logdet(invals, extras):
    # log-determinant of symmetric positive-definite matrices (..., n, n)
    (x,) = invals
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        _bad("logdet", invals, "expects square matrices")
    sign, ld = np.linalg.slogdet(x)
    if np.any(sign <= 0):
        raise NonFiniteError("logdet: matrix is not positive definite")
    return ld


def _vjp_logdet(invals, out, g, extras):
    inv = np.linalg.inv(invals[0])
    return (g[..., None, None] * inv.swapaxes(-1, -2),)


def _fw_gather_sub(invals, extras):
    # (B, n, n) batch of matrices -> (R, m, m) principal submatrices; row r of
    # `indices` selects the submatrix of batch element rows[r].
    (x,) = invals
    idx = extras["indices"]
    rows = extras.get("rows")
    if rows is None:
        rows = np.arange(x.shape[0])
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != rows.shape[0]:
        _bad("gather_sub", invals, "expects (B, n, n) input and (R, m) indices")
    return x[rows[:, None, None], idx[:, :, None], idx[:, None, :]]


def _vjp_gather_sub(invals, out, g, extras):
    x = invals[0]
    idx = extras["indices"]
    rows = extras.get("rows")
    if rows is None:
        rows = np.arange(x.shape[0])
    gx = np.zeros_like(x)
    np.add.at(gx, (rows[:, None, None], idx[:, :, None], idx[:, None, :]), g)
    return (gx,)


_FORWARD = {
    "affine": _fw_affine,
    "sigmoid": _fw_sigmoid,
    "tanh": _fw_tanh,
    "relu": _fw_relu,
    "softmax": _fw_softmax,
    "concat": _fw_concat,
    "sum": _fw_sum,
    "add": _fw_add,
    "mul": _fw_mul,
    "matmul": _fw_matmul,
    "swap_last": _fw_swap_last,
    "reshape": _fw_reshape,
    "slice_last": _fw_slice_last,
    "exp": _fw_exp,
    "log": _fw_log,
    "logdet": _fw_logdet,
    "gather_sub": _fw_gather_sub,
}

_VJP = {
    "affine": _vjp_affine,
    "sigmoid": _vjp_sigmoid,
    "tanh": _vjp_tanh,
    "relu": _vjp_relu,
    "softmax": _vjp_softmax,
    "concat": _vjp_concat,
    "sum": _vjp_sum,
    "add": _vjp_add,
    "mul": _vjp_mul,
    "matmul": _vjp_matmul,
    "swap_last": _vjp_swap_last,
    "reshape": _vjp_reshape,
    "slice_last": _vjp_slice_last,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "logdet": _vjp_logdet,
    "gather_sub": _vjp_gather_sub,
}

# The core public primitive set; longer spelled-out names are accepted too.
PRIMITIVE_KINDS = (
    "affine",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "concat",
    "sum",
    "add",
    "mul",
    "matmul",
)

_ALIASES = {
    "softmax-over-last-axis": "softmax",
    "elementwise-add": "add",
    "elementwise-mul": "mul",
}


class Graph:
    """Append-only tape of primitive applications.

    Nodes are visited exactly once, in reverse insertion order, during
    `backward`.  Acyclicity holds by construction: a node's inputs always
    precede it.
    """

    def __init__(self, check_finite: bool = True):
        self._nodes: list[_Node] = []
        self._params: dict[str, int] = {}
        self.check_finite = check_finite

    def __len__(self):
        return len(self._nodes)

    def _leaf(self, values, param_name=None) -> Tensor:
        values = _f64(values)
        node = _Node("leaf", (), values, None, param_name)
        self._nodes.append(node)
        return Tensor(self, len(self._nodes) - 1, values)

    def constant(self, values) -> Tensor:
        return self._leaf(values)

    def parameter(self, name: str, values) -> Tensor:
        """Leaf whose gradient is reported by `backward` under `name`."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = self._leaf(values, param_name=name)
        self._params[name] = t.node_id
        return t

    def parameters(self, values: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.parameter(k, v) for k, v in values.items()}

    def apply(self, kind: str, inputs, **extras) -> Tensor:
        kind = _ALIASES.get(kind, kind)
        fw = _FORWARD.get(kind)
        if fw is None:
            raise ValueError(f"unknown primitive kind: {kind}")
        inputs = tuple(inputs)
        for t in inputs:
            if not isinstance(t, Tensor) or t.graph is not self:
                raise ValueError(f"{kind}: all inputs must be tensors on this graph")
        invals = tuple(t.values for t in inputs)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = fw(invals, extras)
        if out.dtype != np.float64:
            out = out.astype(np.float64)
        if self.check_finite and not np.isfinite(out.sum()):
            raise NonFiniteError(
                f"{kind} produced non-finite values (output shape {out.shape})"
            )
        node = _Node(kind, tuple(t.node_id for t in inputs), out, extras or None, None)
        self._nodes.append(node)
        return Tensor(self, len(self._nodes) - 1, out)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss with respect to every named parameter.

        Parameters that do not lie on any path to the loss get a zero
        gradient of matching shape.
        """
        if not isinstance(loss, Tensor) or loss.graph is not self:
            raise ValueError("loss must be a tensor on this graph")
        if loss.values.shape != ():
            raise ShapeMismatchError(
                f"backward requires a scalar loss, got shape {loss.values.shape}"
            )
        n = len(self._nodes)
        grads: list = [None] * n
        grads[loss.node_id] = np.ones((), dtype=np.float64)
        for i in range(loss.node_id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self._nodes[i]
            if node.kind == "leaf":
                continue
            invals = tuple(self._nodes[j].values for j in node.input_ids)
            gs = _VJP[node.kind](invals, node.values, g, node.extras or {})
            for j, gj in zip(node.input_ids, gs):
                if grads[j] is None:
                    grads[j] = gj
                else:
                    grads[j] = grads[j] + gj
        out = {}
        for name, nid in self._params.items():
            g = grads[nid]
            if g is None:
                g = np.zeros_like(self._nodes[nid].values)
            out[name] = np.asarray(g, dtype=np.float64)
        return out


def apply_primitive(graph: Graph, kind: str, inputs, **extras) -> Tensor:
    """Record one primitive on `graph`; see PRIMITIVE_KINDS for the core set."""
    return graph.apply(kind, inputs, **extras)


# -- convenience wrappers used throughout the model code ---------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x.graph.apply("affine", (x, w, b))


def sigmoid(x: Tensor) -> Tensor:
    return x.graph.apply("sigmoid", (x,))


def tanh(x: Tensor) -> Tensor:
    return x.graph.apply("tanh", (x,))


def relu(x: Tensor) -> Tensor:
    return x.graph.apply("relu", (x,))


def softmax(x: Tensor) -> Tensor:
    return x.graph.apply("softmax", (x,))


def concat(tensors, axis: int = -1) -> Tensor:
    return tensors[0].graph.apply("concat", tuple(tensors), axis=axis)


def sumall(x: Tensor) -> Tensor:
    return x.graph.apply("sum", (x,))


def sumax(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    return x.graph.apply("sum", (x,), axis=axis, keepdims=keepdims)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.graph.apply("matmul", (a, b))


def swap_last(x: Tensor) -> Tensor:
    return x.graph.apply("swap_last", (x,))


def reshape(x: Tensor, shape) -> Tensor:
    return x.graph.apply("reshape", (x,), shape=tuple(shape))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    return x.graph.apply("slice_last", (x,), start=start, stop=stop)


def exp(x: Tensor) -> Tensor:
    return x.graph.apply("exp", (x,))


def log(x: Tensor) -> Tensor:
    return x.graph.apply("log", (x,))


def logdet_psd(x: Tensor) -> Tensor:
    return x.graph.apply("logdet", (x,))


def gather_sub(x: Tensor, indices: np.ndarray, rows: np.ndarray | None = None) -> Tensor:
    if rows is not None:
        rows = np.asarray(rows, dtype=np.intp)
    return x.graph.apply(
        "gather_sub", (x,), indices=np.asarray(indices, dtype=np.intp), rows=rows
    )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Moment estimates and step counter for Adam with bias correction."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update.  Returns a fresh parameter dict; `state` is advanced
    in place.  A parameter with no entry in `grads` is treated as having a
    zero gradient (its moments still decay).
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}"
            )
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_params[name] = p - step
    return new_params, state


# ---------------------------------------------------------------------------
# Flat binary parameter files: magic "SFG1", then for each tensor (sorted by
# name): u64 name length, name bytes (utf-8), u64 rank, u64 dims, f64 values.
# All integers and floats little-endian.
# ---------------------------------------------------------------------------

_MAGIC = b"SFG1"


def save_params(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(arr.astype("<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        while True:
            head = f.read(8)
            if not head:
                break
            (nlen,) = struct.unpack("<Q", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", f.read(8))
            dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").astype(np.float64)
            params[name] = data.reshape(dims)
    return params
