"""Dense numeric core: float arrays with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 by default; float64 is used by the
gradient-check harness). Each op records the closure backward needs; calling
``backward`` on a scalar loss accumulates dLoss/dLeaf into every reachable
leaf that has requires_grad set. Graph execution is single-threaded.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericFault, ShapeError

DEFAULT_DTYPE = np.float32

_checked = False


def set_checked(enabled: bool) -> None:
    """Enable checked mode: any NaN/Inf produced by an op raises NumericFault."""
    global _checked
    _checked = enabled


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(DEFAULT_DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense array plus the bookkeeping reverse-mode needs."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    # -- operator sugar --

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def transpose(self, ax1: int = -2, ax2: int = -1):
        return transpose(self, ax1, ax2)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return tsum(self)

    def backward(self) -> None:
        """Accumulate dSelf/dLeaf into every reachable requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents and node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    # pg may be a view of g; never mutate stored arrays in place.
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _checked and not np.all(np.isfinite(data)):
        raise NumericFault(f"{op}: produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    out._op = op
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), backward, "matmul")


def transpose(a: Tensor, ax1: int = -2, ax2: int = -1) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(data, (a,), backward, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = np.reshape(a.data, shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    if not data.flags["C_CONTIGUOUS"]:
        data = np.ascontiguousarray(data)

    def backward(g):
        return (np.reshape(g, a.shape),)

    return _make(data, (a,), backward, "reshape")


def tsum(a: Tensor) -> Tensor:
    data = a.data.sum(dtype=a.dtype).reshape(())

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(data, (a,), backward, "sum")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dimension, numerically stabilized."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def backward(g):
        n = x.shape[-1]
        dxhat = g * gain.data
        dx = (
            inv_std
            / n
            * (n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        )
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return dx.astype(x.dtype), ggain, gbias

    return _make(data, (x, gain, bias), backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x2 = x.data * x.data
    inner = _GELU_C * (x.data + _GELU_A * x.data * x2)
    t = np.tanh(inner)
    data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner
        return (g * dx,)

    return _make(data, (x,), backward, "gelu")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of `table` selected by an integer id array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids.min() if ids.min() < 0 else ids.max()
        raise ShapeError(f"embedding_lookup: id {bad} out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, (table,), backward, "embedding_lookup")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over targets != ignore_index.

    logits: [N, V]; targets: int [N].
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} needs targets of shape ({logits.shape[0]},), got {targets.shape}"
        )
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ShapeError("cross_entropy: every target is ignore_index")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = logp[valid, targets[valid]]
    data = np.asarray(-picked.mean(), dtype=logits.dtype).reshape(())

    def backward(g):
        p = np.exp(logp)
        grad = np.zeros_like(logits.data)
        grad[valid] = p[valid]
        grad[valid, targets[valid]] -= 1.0
        grad *= np.asarray(g, dtype=logits.dtype) / n_valid
        return (grad,)

    return _make(data, (logits,), backward, "cross_entropy")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout: p={p} must be in [0,1)")
    if p == 0.0:
        return x
    if rng is None:
        raise ShapeError("dropout: p > 0 requires an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = 1.0 / (1.0 - p)
    data = x.data * keep * scale

    def backward(g):
        return (g * keep * scale,)

    return _make(data, (x,), backward, "dropout")


def take_at(x: Tensor, index: int, axis: int = 1) -> Tensor:
    """Select one index along `axis`, dropping that axis (e.g. the CLS position)."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"take_at: axis {axis} out of range for shape {x.shape}")
    if not 0 <= index < x.shape[axis]:
        raise ShapeError(f"take_at: index {index} out of range for shape {x.shape}")
    data = np.take(x.data, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        slicer = [slice(None)] * x.data.ndim
        slicer[axis] = index
        gx[tuple(slicer)] = g
        return (gx,)

    return _make(data, (x,), backward, "take_at")


# -- optimizer --


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction; t is the post-increment step."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a named parameter dict; state is exposed for checkpointing."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                grad = np.zeros_like(p.data)
            elif _checked and not np.all(np.isfinite(grad)):
                raise NumericFault(f"adam: non-finite gradient for parameter {name!r}")
            adam_step(p.data, grad, self.m[name], self.v[name], self.t, self.lr, self.beta1, self.beta2, self.eps)
