"""Parameter containers and small building blocks on top of the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor (requires_grad is always True)."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class with recursive parameter/buffer discovery and train/eval mode.

    Child modules, parameters and buffers are discovered by scanning
    instance attributes; lists and tuples of modules are followed.
    Buffers (non-trainable state such as BN running stats) are plain
    numpy arrays registered via ``register_buffer``.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def buffers_dict(self) -> dict[str, np.ndarray]:
        return self._buffers

    def _children(self):
        for name, val in vars(self).items():
            if name == "_buffers":
                continue
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
        for cname, child in self._children():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for cname, child in self._children():
            yield from child.named_buffers(prefix + cname + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        d = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            d["buffer:" + name] = buf
        return d

    def load_state_dict(self, d: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        expected = set(params) | {"buffer:" + n for n, _ in self.named_buffers()}
        missing = expected - set(d)
        unexpected = set(d) - expected
        if missing or unexpected:
            raise KeyError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, p in params.items():
            arr = np.asarray(d[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise T.ShapeError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}"
                )
            p.data = arr.copy()
        # buffers are located by walking the same paths
        buf_targets = self._buffer_slots()
        for name, (owner, key) in buf_targets.items():
            owner._buffers[key] = np.asarray(d["buffer:" + name], dtype=np.float64).copy()

    def _buffer_slots(self, prefix: str = ""):
        slots = {}
        for key in self._buffers:
            slots[prefix + key] = (self, key)
        for cname, child in self._children():
            slots.update(child._buffer_slots(prefix + cname + "."))
        return slots


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        std = 1.0 / np.sqrt(in_dim)
        self.weight = Parameter(rng.uniform(-std, std, size=(in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)


class MLP(Module):
    """Two-layer perceptron with ReLU in between."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm2d(Module):
    """Per-channel batch normalization over (batch, H, W).

    Training mode uses batch statistics and updates running stats;
    eval mode uses the frozen running stats.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            mu = T.tmean(x, axis=(0, 2, 3), keepdims=True)
            centered = T.sub(x, mu)
            var = T.tmean(T.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self._buffers["running_mean"] = (
                (1 - m) * self._buffers["running_mean"] + m * mu.data.reshape(-1)
            )
            self._buffers["running_var"] = (
                (1 - m) * self._buffers["running_var"] + m * var.data.reshape(-1)
            )
        else:
            mu = Tensor(self._buffers["running_mean"].reshape(1, -1, 1, 1))
            var = Tensor(self._buffers["running_var"].reshape(1, -1, 1, 1))
            centered = T.sub(x, mu)
        inv = T.power(T.add(var, self.eps), -0.5)
        g = T.reshape(self.gamma, (1, -1, 1, 1))
        b = T.reshape(self.beta, (1, -1, 1, 1))
        return T.add(T.mul(T.mul(centered, inv), g), b)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        std = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(rng.uniform(-std, std, size=(out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)
