"""Dense float64 tensors with reverse-mode automatic differentiation.

The op menu is exactly what the two networks in this toolkit need: dense
algebra, 1D convolution/pooling, batch norm, channel attention plumbing,
softmax losses.  Forward passes record a tape unless gradients are globally
disabled (see :func:`no_grad`); ``backward`` replays it in reverse
topological order and accumulates into leaf ``grad`` buffers.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np


class TensorError(ValueError):
    pass


class ShapeMismatch(TensorError):
    pass


class NoTape(TensorError):
    """backward() called on a value with no recorded graph."""


class NonFiniteValue(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class IndivisibleChannels(TensorError):
    pass


class InvalidProbability(TensorError):
    pass


# Tape recording is per-thread so parallel rollout workers stay independent.
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference mode) inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.isfinite(a).all():
        raise NonFiniteValue(f"{what} produced NaN/Inf")


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor init")
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"

    # Operator sugar used when assembling losses.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TensorError("tensor/tensor division is not part of the op menu")
        return mul(self, 1.0 / float(scalar))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _in_graph(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _op(data: np.ndarray, parents: tuple, backward, name: str) -> Tensor:
    """Create an op result, recording the tape if gradients are live."""
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    if grad_enabled() and any(_in_graph(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into leaf grads.

    Leaf gradients accumulate across calls; zero them between steps.
    """
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None and not loss._parents:
        raise NoTape("loss has no recorded graph (forward ran in inference mode?)")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not _in_graph(p):
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                # Copy: an op may hand the same array to several parents.
                grads[id(p)] = np.array(pg)

    for node in topo:
        if node.requires_grad:
            _check_finite(node.grad, "backward")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise & reductions


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _op(data, (a, b), bwd, "add")


def residual_add(x: Tensor, f_x: Tensor) -> Tensor:
    """Elementwise skip connection; shapes must match exactly."""
    if x.shape != f_x.shape:
        raise ShapeMismatch(f"residual shapes {x.shape} vs {f_x.shape}")
    return add(x, f_x)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _op(data, (a, b), bwd, "mul")


def square(a: Tensor) -> Tensor:
    def bwd(g):
        return (2.0 * a.data * g,)

    return _op(a.data * a.data, (a,), bwd, "square")


def log(a: Tensor) -> Tensor:
    def bwd(g):
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _op(data, (a,), bwd, "log")  # log(0) -> NonFiniteValue via the finite check


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return _op(data, (a,), bwd, "exp")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _op(data, (a,), bwd, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))), np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _op(data, (a,), bwd, "sigmoid")


def tsum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _op(np.asarray(data), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis) / n


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        return (g.reshape(a.shape),)

    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _op(data, (a,), bwd, "reshape")


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            g.take(range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _op(data, tuple(tensors), bwd, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _op(data, (a, b), bwd, "matmul")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeMismatch(f"gather_rows on {a.shape} with idx {idx.shape}")
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx]

    def bwd(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return (out,)

    return _op(data, (a,), bwd, "gather_rows")


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to 1."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _op(data, (a,), bwd, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse

    def bwd(g):
        return (g - np.exp(data) * g.sum(axis=-1, keepdims=True),)

    return _op(data, (a,), bwd, "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray, class_weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean negative log-likelihood over a batch of logits."""
    labels = np.asarray(labels, dtype=np.int64)
    ls = log_softmax(logits)
    picked = gather_rows(ls, labels)
    if class_weights is None:
        return -tmean(picked)
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    total = float(w.sum())
    if total <= 0:
        raise TensorError("class weights select nothing")
    return mul(tsum(mul(picked, Tensor(-w))), 1.0 / total)


# ---------------------------------------------------------------------------
# structured ops: conv / pool / norm / attention plumbing


def _rank3(a: Tensor) -> tuple[Tensor, bool]:
    if a.data.ndim == 2:
        return reshape(a, (1,) + a.shape), True
    if a.data.ndim == 3:
        return a, False
    raise ShapeMismatch(f"expected [C,L] or [N,C,L], got {a.shape}")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "same") -> Tensor:
    """Stride-1 1D cross-correlation.

    ``padding="same"`` zero-pads (K-1)/2 per side and requires odd K (the
    classifier's 3/5/7 kernels); ``"valid"`` applies no padding and accepts
    any K (the policy networks' kernel-4 conv).  Accepts [C,L] or [N,C,L].
    """
    x3, squeeze = _rank3(x)
    if w.data.ndim != 3:
        raise ShapeMismatch(f"kernel must be [C_out,C_in,K], got {w.shape}")
    n, c_in, length = x3.shape
    c_out, c_in_w, k = w.shape
    if c_in_w != c_in:
        raise ShapeMismatch(f"kernel expects {c_in_w} input channels, got {c_in}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeMismatch(f"same-padding conv needs odd kernel, got K={k}")
        pad = (k - 1) // 2
        l_out = length
    elif padding == "valid":
        pad = 0
        l_out = length - k + 1
        if l_out < 1:
            raise ShapeMismatch(f"kernel K={k} longer than input L={length}")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    xp = np.pad(x3.data, ((0, 0), (0, 0), (pad, pad))) if pad else x3.data
    cols = np.empty((n, l_out, c_in, k))
    for i in range(k):
        cols[:, :, :, i] = xp[:, :, i : i + l_out].transpose(0, 2, 1)
    cols_mat = cols.reshape(n * l_out, c_in * k)
    w_mat = w.data.reshape(c_out, c_in * k)
    out = (cols_mat @ w_mat.T).reshape(n, l_out, c_out).transpose(0, 2, 1)
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeMismatch(f"bias shape {b.shape} != ({c_out},)")
        out = out + b.data[None, :, None]

    def bwd(g):
        g_mat = g.transpose(0, 2, 1).reshape(n * l_out, c_out)
        dw = (g_mat.T @ cols_mat).reshape(c_out, c_in, k)
        db = g_mat.sum(axis=0) if b is not None else None
        dcols = (g_mat @ w_mat).reshape(n, l_out, c_in, k)
        dxp = np.zeros((n, c_in, length + 2 * pad))
        for i in range(k):
            dxp[:, :, i : i + l_out] += dcols[:, :, :, i].transpose(0, 2, 1)
        dx = dxp[:, :, pad : pad + length] if pad else dxp
        if b is not None:
            return dx, dw, db
        return dx, dw

    parents = (x3, w) if b is None else (x3, w, b)
    res = _op(out, parents, bwd, "conv1d")
    return reshape(res, res.shape[1:]) if squeeze else res


def max_pool1d(x: Tensor, k: int = 2) -> Tensor:
    """Stride-1 max pool, right-padded so the output keeps the input width."""
    x3, squeeze = _rank3(x)
    n, c, length = x3.shape
    if k < 1 or k > length:
        raise ShapeMismatch(f"pool kernel {k} invalid for length {length}")
    xp = np.pad(x3.data, ((0, 0), (0, 0), (0, k - 1)), constant_values=-np.inf)
    windows = np.stack([xp[:, :, i : i + length] for i in range(k)])  # (k, N, C, L)
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def bwd(g):
        dxp = np.zeros((n, c, length + k - 1))
        for i in range(k):
            dxp[:, :, i : i + length] += g * (arg == i)
        return (dxp[:, :, :length],)

    res = _op(out, (x3,), bwd, "max_pool1d")
    return reshape(res, res.shape[1:]) if squeeze else res


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,L] -> [N,C] channel means (the squeeze step of channel attention)."""
    x3, squeeze = _rank3(x)
    n, c, length = x3.shape
    out = x3.data.mean(axis=2)

    def bwd(g):
        return (np.repeat(g[:, :, None], length, axis=2) / length,)

    res = _op(out, (x3,), bwd, "global_avg_pool")
    return reshape(res, (c,)) if squeeze else res


def scale_channels(x: Tensor, gates: Tensor) -> Tensor:
    """Multiply each channel of [N,C,L] by a per-channel gate [N,C]."""
    x3, squeeze = _rank3(x)
    g2 = reshape(gates, (1,) + gates.shape) if gates.data.ndim == 1 else gates
    if g2.shape != x3.shape[:2]:
        raise ShapeMismatch(f"gates {gates.shape} do not match channels of {x.shape}")
    out = x3.data * g2.data[:, :, None]

    def bwd(g):
        return g * g2.data[:, :, None], (g * x3.data).sum(axis=2)

    res = _op(out, (x3, g2), bwd, "scale_channels")
    return reshape(res, res.shape[1:]) if squeeze else res


def channel_shuffle(x: Tensor, groups: int = 3) -> Tensor:
    """Interleave channel groups: position (g, i) in a (groups, C/g) view
    moves to (i, g).  A fixed, invertible permutation of channels."""
    x3, squeeze = _rank3(x)
    c = x3.shape[1]
    if c % groups != 0:
        raise IndivisibleChannels(f"{c} channels not divisible into {groups} groups")
    perm = np.arange(c).reshape(groups, c // groups).T.reshape(-1)
    out = x3.data[:, perm, :]
    inv = np.argsort(perm)

    def bwd(g):
        return (g[:, inv, :],)

    res = _op(out, (x3,), bwd, "channel_shuffle")
    return reshape(res, res.shape[1:]) if squeeze else res


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """The channel order channel_shuffle applies, for inspection/tests."""
    if channels % groups != 0:
        raise IndivisibleChannels(f"{channels} channels not divisible into {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization for [N,F] or [N,C,L] inputs.

    Training mode normalizes by batch statistics and folds them into the
    running buffers (kept out of the graph); inference mode uses the frozen
    running statistics and leaves them untouched.
    """
    if x.data.ndim == 2:
        axes = (0,)
    elif x.data.ndim == 3:
        axes = (0, 2)
    else:
        raise ShapeMismatch(f"batch_norm expects [N,F] or [N,C,L], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch("scale/shift must be per-channel")

    def expand(v):
        return v[None, :] if x.data.ndim == 2 else v[None, :, None]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - expand(mean)) * expand(inv)
    out = expand(gamma.data) * xhat + expand(beta.data)

    m = int(np.prod([x.shape[a] for a in axes]))

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * expand(gamma.data)
        if training:
            dx = (
                expand(inv)
                / m
                * (m * dxhat - expand(dxhat.sum(axis=axes)) - xhat * expand((dxhat * xhat).sum(axis=axes)))
            )
        else:
            dx = dxhat * expand(inv)
        return dx, dgamma, dbeta

    return _op(out, (x, gamma, beta), bwd, "batch_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when p=0 or in inference mode."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout p={p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def bwd(g):
        return (g * mask,)

    return _op(x.data * mask, (x,), bwd, "dropout")
