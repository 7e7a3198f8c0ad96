"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op produces a :class:`Tensor` node holding its value, its parents and a
closure that pushes the output gradient back to the parents. Nodes receive a
monotonically increasing id at creation, so sorting the ancestors of an
output by id gives a valid topological order without an explicit tape.

Only the primitives the MNIST CNN and the attack objectives need are
provided. Broadcasting is limited to adding a bias along the trailing axis
(dense) or the channel axis (conv).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "GraphStateError",
    "as_tensor",
    "grad",
    "forward",
    "backward",
    "finite_diff_grad",
    "relu",
    "exp",
    "matmul",
    "dense",
    "conv2d",
    "maxpool2x2",
    "log_softmax",
    "softmax",
    "pick",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class GraphStateError(RuntimeError):
    """Graph used out of order (e.g. backward before forward)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> Tensor:
        return tsum(self, axis)

    def mean(self) -> Tensor:
        return tsum(self) * (1.0 / self.data.size)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> Tensor:
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor(value)
    out.op = op
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# -- elementwise / structural ops ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape or b.ndim == 0:
        bias_axes = None
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        bias_axes = "last"
    elif b.ndim == 1 and a.ndim == 4 and a.shape[1] == b.shape[0]:
        bias_axes = "channel"
    else:
        raise ShapeError(f"add: cannot combine shapes {a.shape} and {b.shape}")
    if bias_axes == "channel":
        value = a.data + b.data[None, :, None, None]
    else:
        value = a.data + b.data

    def backward_fn(g):
        _acc(a, g)
        if not b.requires_grad:
            return
        if b.ndim == 0:
            _acc(b, np.asarray(g.sum()))
        elif bias_axes == "last":
            _acc(b, g.reshape(-1, b.shape[0]).sum(axis=0))
        elif bias_axes == "channel":
            _acc(b, g.sum(axis=(0, 2, 3)))
        else:
            _acc(b, g)

    return _node(value, "add", (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape or b.ndim == 0 or a.ndim == 0, "mul",
           f"expected equal shapes or a scalar, got {a.shape} and {b.shape}")
    value = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            ga = g * b.data
            _acc(a, np.asarray(ga.sum()) if a.ndim == 0 else ga)
        if b.requires_grad:
            gb = g * a.data
            _acc(b, np.asarray(gb.sum()) if b.ndim == 0 else gb)

    return _node(value, "mul", (a, b), backward_fn)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    value = a.data.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.shape))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(np.asarray(value), "sum", (a,), backward_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc

    def backward_fn(g):
        _acc(a, g.reshape(a.shape))

    return _node(value, "reshape", (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # gradient at exactly 0 is 0

    def backward_fn(g):
        _acc(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), "relu", (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        value = np.exp(a.data)

    def backward_fn(g):
        _acc(a, g * value)

    return _node(value, "exp", (a,), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0], "matmul",
           f"expected (n,k)@(k,m), got {a.shape} @ {b.shape}")
    value = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _node(value, "matmul", (a, b), backward_fn)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer ``x @ w + b`` with ``w`` of shape (in, out)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check(x.ndim == 2 and w.ndim == 2 and x.shape[1] == w.shape[0], "dense",
           f"input {x.shape} does not match weight {w.shape}")
    _check(b.shape == (w.shape[1],), "dense", f"bias {b.shape} does not match weight {w.shape}")
    return add(matmul(x, w), b)


# -- convolution / pooling ----------------------------------------------------


def _im2col(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # (n, c, out_h, out_w, k, k) -> (n*out_h*out_w, c*k*k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, same-padding 2-D convolution (cross-correlation).

    x: (N, C, H, W); w: (O, C, k, k) with odd k; b: (O,).
    """
    x, w = as_tensor(x), as_tensor(w)
    _check(x.ndim == 4, "conv2d", f"input must be NCHW, got shape {x.shape}")
    _check(w.ndim == 4 and w.shape[2] == w.shape[3] and w.shape[2] % 2 == 1, "conv2d",
           f"weight must be (O, C, k, k) with odd k, got {w.shape}")
    _check(x.shape[1] == w.shape[1], "conv2d",
           f"expected {w.shape[1]} input channels, got {x.shape[1]}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, k, h, wd)
    wmat = w.data.reshape(o, c * k * k)
    value = (cols @ wmat.T).reshape(n, h, wd, o).transpose(0, 3, 1, 2)

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        if w.requires_grad:
            _acc(w, (g2.T @ cols).reshape(w.shape))
        if x.requires_grad:
            # col2im in channel-last layout keeps the scatter-adds cheap
            wkkc = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
            dcols = (g2 @ wkkc).reshape(n, h, wd, k, k, c)
            dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c))
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
            _acc(x, dxp[:, p:p + h, p:p + wd, :].transpose(0, 3, 1, 2))

    out = _node(np.ascontiguousarray(value), "conv2d", (x, w), backward_fn)
    if b is not None:
        out = add(out, b)
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the first window entry in row-major order."""
    x = as_tensor(x)
    _check(x.ndim == 4 and x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0, "maxpool2x2",
           f"expected NCHW with even H, W, got {x.shape}")
    n, c, h, w = x.shape
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    value = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        routed = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _acc(x, routed.reshape(n, c, h, w))

    return _node(value, "maxpool2x2", (x,), backward_fn)


# -- classification heads -----------------------------------------------------


def log_softmax(z: Tensor) -> Tensor:
    z = as_tensor(z)
    _check(z.ndim == 2, "log_softmax", f"expected (batch, classes), got {z.shape}")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(value)

    def backward_fn(g):
        _acc(z, g - probs * g.sum(axis=1, keepdims=True))

    return _node(value, "log_softmax", (z,), backward_fn)


def softmax(z) -> np.ndarray:
    """Plain softmax over the last axis (no graph)."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def pick(a: Tensor, index) -> Tensor:
    """Select ``a[i, index[i]]`` for each row."""
    index = np.asarray(index, dtype=np.int64)
    _check(a.ndim == 2 and index.shape == (a.shape[0],), "pick",
           f"index of shape {index.shape} does not match rows of {a.shape}")
    rows = np.arange(a.shape[0])
    value = a.data[rows, index]

    def backward_fn(g):
        full = np.zeros(a.shape)
        full[rows, index] = g
        _acc(a, full)

    return _node(value, "pick", (a,), backward_fn)


# -- differentiation ----------------------------------------------------------


def _topo(out: Tensor) -> list[Tensor]:
    seen = {id(out): out}
    stack = [out]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._id)


def grad(out: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``out`` with respect to each tensor in ``wrt``.

    Tensors in ``wrt`` that ``out`` does not depend on get a zero gradient.
    """
    wrt = list(wrt)
    if out.data.size != 1:
        raise GraphStateError(f"backward needs a scalar output, got shape {out.shape}")
    nodes = _topo(out)
    for node in nodes:
        node.grad = None
    out.grad = np.ones_like(out.data)
    for node in reversed(nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    result = [t.grad if t.grad is not None else np.zeros(t.shape) for t in wrt]
    for node in nodes:
        node.grad = None
    return result


class Graph:
    """A re-runnable computation built from a function of named inputs.

    ``fn`` receives one Tensor per named input (as keyword arguments) and
    returns the output Tensor. Each :meth:`forward` rebuilds the node list;
    :meth:`backward` differentiates the last forward pass.
    """

    def __init__(self, fn: Callable[..., Tensor]):
        self.fn = fn
        self.inputs: dict[str, Tensor] = {}
        self.output: Tensor | None = None
        self.nodes: list[Tensor] = []

    def forward(self, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
        self.inputs = {k: Tensor(v, requires_grad=True, name=k) for k, v in inputs.items()}
        try:
            out = self.fn(**self.inputs)
        except TypeError as exc:
            raise ShapeError(f"graph inputs {sorted(inputs)} not accepted: {exc}") from exc
        self.output = as_tensor(out)
        self.nodes = _topo(self.output)
        return self.output.data

    def backward(self, wrt: Iterable[str | Tensor] | None = None) -> dict:
        if self.output is None:
            raise GraphStateError("backward called before forward")
        keys = list(self.inputs) if wrt is None else list(wrt)
        tensors = [self.inputs[k] if isinstance(k, str) else k for k in keys]
        grads = grad(self.output, tensors)
        return {(k if isinstance(k, str) else k._id): g for k, g in zip(keys, grads)}


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    return graph.forward(inputs)


def backward(graph: Graph, wrt: Iterable[str | Tensor] | None = None) -> dict:
    return graph.backward(wrt)


def finite_diff_grad(lossfn: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(lossfn(x))
        flat[i] = orig - h
        down = float(lossfn(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite loss probing coordinate {i}")
        gflat[i] = (up - down) / (2 * h)
    return g
