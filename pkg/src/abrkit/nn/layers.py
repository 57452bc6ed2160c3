"""Parameterized layers built on the tensor kernel.

A minimal Module registry tracks parameters (trainable tensors), buffers
(running statistics), and children, giving dotted-name state dicts for the
optimizer and the checkpoint format.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: attribute assignment registers params/buffers/children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + n: p for n, p in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.parameters(prefix=f"{prefix}{cname}."))
        return out

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + n: b for n, b in self._buffers.items()}
        for cname, child in self._children.items():
            out.update(child.buffers(prefix=f"{prefix}{cname}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.parameters().items()}
        state.update({n: b.copy() for n, b in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.buffers()
        for name, arr in state.items():
            if name in params:
                target = params[name].data
            elif name in buffers:
                target = buffers[name]
            else:
                raise KeyError(f"unknown state entry {name!r}")
            if target.shape != arr.shape:
                raise T.ShapeMismatch(f"{name}: {arr.shape} != {target.shape}")
            target[...] = arr

    def set_training(self, flag: bool) -> None:
        object.__setattr__(self, "training", flag)
        for child in self._children.values():
            child.set_training(flag)

    def train(self) -> "Module":
        self.set_training(True)
        return self

    def eval(self) -> "Module":
        self.set_training(False)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = []
        for i, m in enumerate(modules):
            setattr(self, str(i), m)
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, scale: float | None = None) -> np.ndarray:
    std = scale if scale is not None else np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, w_scale: float | None = None):
        super().__init__()
        self.w = Tensor(he_normal(rng, (in_features, out_features), in_features, w_scale), requires_grad=True)
        self.b = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class Conv1d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        padding: str = "same",
        w_scale: float | None = None,
    ):
        super().__init__()
        self.kernel_size = kernel_size
        self.padding = padding
        fan_in = in_channels * kernel_size
        self.w = Tensor(he_normal(rng, (out_channels, in_channels, kernel_size), fan_in, w_scale), requires_grad=True)
        self.b = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.w, self.b, padding=self.padding)


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class SEBlock(Module):
    """Squeeze-and-excitation channel gating.

    Global average pool -> bottleneck FC (reduction r) -> ReLU -> FC back to
    C -> sigmoid, then the gates scale their channels in the input.
    """

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.reduction = reduction
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.data.ndim == 2
        pooled = T.global_avg_pool(x)
        if squeeze:
            pooled = T.reshape(pooled, (1,) + pooled.shape)
        gates = T.sigmoid(self.fc2(T.relu(self.fc1(pooled))))
        if squeeze:
            gates = T.reshape(gates, gates.shape[1:])
        return T.scale_channels(x, gates)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise T.InvalidProbability(f"dropout p={p} outside [0, 1)")
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.rng, training=self.training)


def se_block(x: Tensor, fc1_w: Tensor, fc1_b: Tensor, fc2_w: Tensor, fc2_b: Tensor) -> Tensor:
    """Functional squeeze-and-excitation given explicit bottleneck weights."""
    squeeze = x.data.ndim == 2
    pooled = T.global_avg_pool(x)
    if squeeze:
        pooled = T.reshape(pooled, (1,) + pooled.shape)
    hidden = T.relu(T.add(T.matmul(pooled, fc1_w), fc1_b))
    gates = T.sigmoid(T.add(T.matmul(hidden, fc2_w), fc2_b))
    if squeeze:
        gates = T.reshape(gates, gates.shape[1:])
    return T.scale_channels(x, gates)
