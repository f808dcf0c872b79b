"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a :class:`Tensor` node that remembers its parents and a
closure pushing the upstream gradient back to them.  ``Tensor.backward``
orders the reachable nodes topologically and runs the closures once each in
reverse order.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


def _as_array(x: ArrayLike) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: "Tensor", b: "Tensor") -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not broadcast") from None


class Tensor:
    """A node in the computation graph.

    ``data`` is a float64 ndarray; ``grad`` stays ``None`` until a backward
    pass reaches the node.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        op: str = "leaf",
    ):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.op = op
        self.name = name
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op!r}, shape={self.shape}{label})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item(): tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> List["Tensor"]:
        """Backpropagate from this scalar; returns nodes in topological order."""
        if self.data.size != 1:
            raise ShapeError(f"backward(): output of op {self.op!r} has shape {self.shape}, expected a scalar")
        order = topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        return order

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = ensure_tensor(other)
        _broadcast_shape("add", self, other)
        out = Tensor(self.data + other.data, _parents=(self, other), op="add")

        def backward(g: np.ndarray) -> None:
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, _parents=(self,), op="neg")
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = ensure_tensor(other)
        _broadcast_shape("sub", self, other)
        out = Tensor(self.data - other.data, _parents=(self, other), op="sub")

        def backward(g: np.ndarray) -> None:
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(-g, other.shape))

        out._backward = backward
        return out

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return ensure_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = ensure_tensor(other)
        _broadcast_shape("mul", self, other)
        out = Tensor(self.data * other.data, _parents=(self, other), op="mul")

        def backward(g: np.ndarray) -> None:
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = ensure_tensor(other)
        _broadcast_shape("div", self, other)
        out = Tensor(self.data / other.data, _parents=(self, other), op="div")

        def backward(g: np.ndarray) -> None:
            self._accumulate(_unbroadcast(g / other.data, self.shape))
            other._accumulate(_unbroadcast(-g * self.data / (other.data * other.data), other.shape))

        out._backward = backward
        return out

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return ensure_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("pow: only constant exponents are supported")
        p = float(exponent)
        out = Tensor(self.data**p, _parents=(self,), op="pow")
        out._backward = lambda g: self._accumulate(g * p * self.data ** (p - 1.0))
        return out

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, ensure_tensor(other))

    # -- unary math ---------------------------------------------------------

    def exp(self) -> "Tensor":
        value = np.exp(self.data)
        out = Tensor(value, _parents=(self,), op="exp")
        out._backward = lambda g: self._accumulate(g * value)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), _parents=(self,), op="log")
        out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def sqrt(self) -> "Tensor":
        value = np.sqrt(self.data)
        out = Tensor(value, _parents=(self,), op="sqrt")
        out._backward = lambda g: self._accumulate(g * 0.5 / value)
        return out

    def relu(self) -> "Tensor":
        mask = self.data > 0
        out = Tensor(np.where(mask, self.data, 0.0), _parents=(self,), op="relu")
        out._backward = lambda g: self._accumulate(g * mask)
        return out

    # -- shape and reductions ---------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            value = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {self.shape} as {shape}") from None
        out = Tensor(value, _parents=(self,), op="reshape")
        out._backward = lambda g: self._accumulate(g.reshape(self.shape))
        return out

    def sum(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), op="sum")

        def backward(g: np.ndarray) -> None:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        out._backward = backward
        return out

    def mean(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        value = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(value, _parents=(self,), op="softmax")

        def backward(g: np.ndarray) -> None:
            self._accumulate(value * (g - (g * value).sum(axis=axis, keepdims=True)))

        out._backward = backward
        return out

    def log_softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        value = shifted - lse
        out = Tensor(value, _parents=(self,), op="log_softmax")

        def backward(g: np.ndarray) -> None:
            self._accumulate(g - np.exp(value) * g.sum(axis=axis, keepdims=True))

        out._backward = backward
        return out

    def l2_norm(self, axis: int = -1, keepdims: bool = True) -> "Tensor":
        """Euclidean norm along ``axis`` floored at ``NORM_FLOOR``."""
        raw = np.sqrt((self.data * self.data).sum(axis=axis, keepdims=True))
        active = raw > NORM_FLOOR
        norm = np.where(active, raw, NORM_FLOOR)
        value = norm if keepdims else np.squeeze(norm, axis=axis)
        out = Tensor(value, _parents=(self,), op="l2_norm")

        def backward(g: np.ndarray) -> None:
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.where(active, g * self.data / norm, 0.0))

        out._backward = backward
        return out


def ensure_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def constant(x: ArrayLike) -> Tensor:
    return Tensor(x, op="const")


def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root``, every node after all of its inputs."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


# -- free-standing primitives ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), op="matmul")

    def backward(g: np.ndarray) -> None:
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner products of two [N, C] tensors -> [N]."""
    if a.shape != b.shape:
        raise ShapeError(f"dot: row shapes differ, {a.shape} vs {b.shape}")
    return (a * b).sum(axis=-1)


def logaddexp(a: Tensor, b: ArrayLike) -> Tensor:
    b = ensure_tensor(b)
    _broadcast_shape("logaddexp", a, b)
    value = np.logaddexp(a.data, b.data)
    out = Tensor(value, _parents=(a, b), op="logaddexp")

    def backward(g: np.ndarray) -> None:
        a._accumulate(_unbroadcast(g * np.exp(a.data - value), a.shape))
        b._accumulate(_unbroadcast(g * np.exp(b.data - value), b.shape))

    out._backward = backward
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, padding: int = 1) -> Tensor:
    """Stride-1 2-D convolution (cross-correlation), zero padding ``padding``.

    x: [N, Cin, H, W]; w: [Cout, Cin, kh, kw]; b: [Cout].
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    value = np.zeros((n, cout, oh, ow))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + oh, j : j + ow]
            value += np.einsum("nchw,oc->nohw", patch, w.data[:, :, i, j], optimize=True)
    parents: Tuple[Tensor, ...] = (x, w)
    if b is not None:
        value += b.data.reshape(1, cout, 1, 1)
        parents = (x, w, b)
    out = Tensor(value, _parents=parents, op="conv2d")

    def backward(g: np.ndarray) -> None:
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + oh, j : j + ow]
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch, optimize=True)
                gxp[:, :, i : i + oh, j : j + ow] += np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
        x._accumulate(gxp[:, :, padding : padding + h, padding : padding + wd])
        w._accumulate(gw)
        if b is not None:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = backward
    return out


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh < 1 or ow < 1:
        raise ShapeError(f"avg_pool2d: {size}x{size} window does not fit input {x.shape}")
    cropped = x.data[:, :, : oh * size, : ow * size]
    value = cropped.reshape(n, c, oh, size, ow, size).mean(axis=(3, 5))
    out = Tensor(value, _parents=(x,), op="avg_pool2d")

    def backward(g: np.ndarray) -> None:
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        full = np.zeros_like(x.data)
        full[:, :, : oh * size, : ow * size] = up
        x._accumulate(full)

    out._backward = backward
    return out


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean and unit variance."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    return centered / (var + eps).sqrt()


# -- graph evaluation -------------------------------------------------------


class Graph:
    """A differentiable computation with named inputs.

    ``builder`` maps keyword Tensors to either a Tensor or a dict of Tensors.
    When it returns a dict, the entry under ``output`` is the differentiated
    scalar.  ``nodes`` holds the topological order of the most recent trace.
    """

    def __init__(self, builder: Callable[..., Union[Tensor, Dict[str, Tensor]]], output: str = "loss"):
        self.builder = builder
        self.output = output
        self.nodes: List[Tensor] = []

    def __call__(self, **inputs: Tensor) -> Dict[str, Tensor]:
        result = self.builder(**inputs)
        if isinstance(result, Tensor):
            return {self.output: result}
        if self.output not in result:
            raise KeyError(f"graph builder did not produce output {self.output!r}")
        return result


def evaluate_with_grad(
    graph: Graph,
    inputs: Mapping[str, ArrayLike],
    wrt: Optional[Iterable[str]] = None,
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Run ``graph`` forward and return (outputs, gradients of the scalar output).

    ``wrt`` names the inputs to differentiate; all inputs by default.
    """
    wrt = list(inputs) if wrt is None else list(wrt)
    missing = [k for k in wrt if k not in inputs]
    if missing:
        raise KeyError(f"gradient requested for unbound inputs: {missing}")
    leaves = {k: Tensor(v, requires_grad=k in wrt, name=k) for k, v in inputs.items()}
    outputs = graph(**leaves)
    root = outputs[graph.output]
    graph.nodes = root.backward()
    grads = {}
    for k in wrt:
        g = leaves[k].grad
        grads[k] = np.zeros_like(leaves[k].data) if g is None else g
    return {k: v.data for k, v in outputs.items()}, grads


def finite_diff_grad(f: Callable[[np.ndarray], float], x: ArrayLike, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = _as_array(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if math.isnan(fp) or math.isnan(fm):
            raise FloatingPointError(f"function returned NaN at probe coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
