"""Parameter containers and the small layer zoo shared by the models."""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ShapeError
from .numerics import Tensor, conv2d, deconv2d
from .numerics import ops
from .numerics.tensor import default_dtype


class Module:
    """Tree of named parameters, buffers, and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value), requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value))
        self._buffers[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, c in self._children.items():
            out.update(c.named_parameters(prefix + cname + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for cname, c in self._children.items():
            out.update(c.named_buffers(prefix + cname + "."))
        return out

    def state_tensors(self) -> dict[str, Tensor]:
        """Parameters plus buffers, the full persistent state."""
        out = self.named_parameters()
        out.update({"buffer." + k: v for k, v in self.named_buffers().items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        state = self.state_tensors()
        missing = set(state) - set(arrays)
        extra = set(arrays) - set(state)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in state.items():
            arr = np.asarray(arrays[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def freeze(self) -> "Module":
        for p in self.named_parameters().values():
            p.requires_grad = False
        return self

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def param_hash(self) -> str:
        """Digest over all parameters and buffers; detects any mutation."""
        h = hashlib.sha256()
        for name in sorted(self.state_tensors()):
            t = self.state_tensors()[name]
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self.items = list(modules)
        for i, m in enumerate(self.items):
            self.child(str(i), m)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


# ---------------------------------------------------------------------------
# initializers


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype or default_dtype())


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype or default_dtype())


# ---------------------------------------------------------------------------
# layers


class Linear(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.w = self.param("w", xavier_uniform(rng, (in_dim, out_dim), in_dim, out_dim))
        self.b = self.param("b", np.zeros(out_dim, dtype=default_dtype())) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.w)
        if self.b is not None:
            y = ops.add(y, self.b)
        return y


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0,
                 groups: int = 1, bias: bool = True):
        super().__init__()
        fan_in = (in_ch // groups) * k * k
        self.w = self.param("w", he_normal(rng, (out_ch, in_ch // groups, k, k), fan_in))
        self.b = self.param("b", np.zeros(out_ch, dtype=default_dtype())) if bias else None
        self.stride, self.pad, self.groups = stride, pad, groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad, groups=self.groups)


class Deconv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0,
                 bias: bool = True):
        super().__init__()
        fan_in = in_ch * k * k
        self.w = self.param("w", he_normal(rng, (in_ch, out_ch, k, k), fan_in))
        self.b = self.param("b", np.zeros(out_ch, dtype=default_dtype())) if bias else None
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return deconv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dt = default_dtype()
        self.gamma = self.param("gamma", np.ones(ch, dtype=dt))
        self.beta = self.param("beta", np.zeros(ch, dtype=dt))
        self.running_mean = self.buffer("running_mean", np.zeros(ch, dtype=dt))
        self.running_var = self.buffer("running_var", np.ones(ch, dtype=dt))
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x, self.gamma, self.beta,
            self.running_mean.data, self.running_var.data,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        dt = default_dtype()
        self.gamma = self.param("gamma", np.ones(dim, dtype=dt))
        self.beta = self.param("beta", np.zeros(dim, dtype=dt))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)
