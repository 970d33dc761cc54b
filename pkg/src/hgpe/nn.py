"""Module tree, parameter store and the leaf layers (conv, norms, linear).

Modules register parameters, state buffers and child modules in attribute
assignment order; that order is the ParamStore traversal order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_entries", {})
        object.__setattr__(self, "training", False)
        object.__setattr__(self, "path", "")

    def __setattr__(self, name, value):
        if isinstance(value, (Module, Tensor)):
            self._entries[name] = value
        object.__setattr__(self, name, value)

    def parameter(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)
        setattr(self, name, t)
        return t

    def buffer(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=np.float64), name=name)
        setattr(self, name, t)
        return t

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, v in self._entries.items():
            if isinstance(v, Module):
                yield name, v

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.modules(f"{prefix}/{name}" if prefix else name)

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, v in self._entries.items():
            path = f"{prefix}/{name}" if prefix else name
            if isinstance(v, Module):
                yield from v.named_tensors(path)
            else:
                yield path, v

    def param_store(self) -> "ParamStore":
        return ParamStore([(name, t, t.requires_grad) for name, t in self.named_tensors()])

    def assign_paths(self) -> "Module":
        for path, m in self.modules():
            object.__setattr__(m, "path", path)
        return self

    def set_mode(self, training: bool) -> "Module":
        for _, m in self.modules():
            object.__setattr__(m, "training", training)
        return self

    def astype(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
        return self

    def zero_(self) -> "Module":
        """Set every parameter to zero (state buffers are left alone)."""
        for _, t in self.named_tensors():
            if t.requires_grad:
                t.data = np.zeros_like(t.data)
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def trace(self, shape: tuple[int, ...], rec: "Recorder") -> tuple[int, ...]:
        """Propagate an input shape and record per-layer cost rows."""
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, **layers: Module):
        super().__init__()
        for name, layer in layers.items():
            setattr(self, name, layer)

    def add(self, name: str, layer: Module) -> None:
        setattr(self, name, layer)

    def forward(self, x: Tensor) -> Tensor:
        for _, layer in self.children():
            x = layer(x)
        return x

    def trace(self, shape, rec):
        for _, layer in self.children():
            shape = layer.trace(shape, rec)
        return shape


@dataclass
class ParamStore:
    """Ordered (name, tensor, trainable) entries; buffers are non-trainable."""

    entries: list[tuple[str, Tensor, bool]] = field(default_factory=list)

    def __post_init__(self):
        names = [n for n, _, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in store")
        self._index = {n: t for n, t, _ in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> Tensor:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def names(self, trainable_only: bool = False) -> list[str]:
        return [n for n, _, tr in self.entries if tr or not trainable_only]

    def items(self, trainable_only: bool = False) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t, tr in self.entries if tr or not trainable_only]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return self.items(trainable_only=True)

    def is_trainable(self, name: str) -> bool:
        return next(tr for n, _, tr in self.entries if n == name)

    def num_params(self) -> int:
        return sum(t.size for _, t in self.trainable())


# ---------------------------------------------------------------------------
# recorder used by shape/complexity tracing
# ---------------------------------------------------------------------------


@dataclass
class Row:
    path: str
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: int = 0
    macs: int = 0
    elementwise: int = 0


class Recorder:
    def __init__(self):
        self.rows: list[Row] = []

    def add(self, module: Module, kind: str, in_shape, out_shape, params: int = 0,
            macs: int = 0, elementwise: int = 0, suffix: str = "") -> None:
        path = module.path + (f"/{suffix}" if suffix else "")
        self.rows.append(Row(path, kind, tuple(in_shape), tuple(out_shape), int(params),
                             int(macs), int(elementwise)))


def _numel(shape) -> int:
    return int(np.prod(shape))


# ---------------------------------------------------------------------------
# leaf layers
# ---------------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel, stride=1, padding=None, groups: int = 1,
                 bias: bool = False):
        super().__init__()
        kh, kw = ops._as_pair(kernel)
        if padding is None:
            padding = (kh // 2, kw // 2)
        if cin % groups or cout % groups:
            raise ValueError(f"groups={groups} must divide {cin} and {cout}")
        self.cin, self.cout, self.groups = cin, cout, groups
        self.stride, self.padding = ops._as_pair(stride), ops._as_pair(padding)
        self.parameter("weight", np.zeros((cout, cin // groups, kh, kw)))
        self.bias = None
        if bias:
            self.parameter("bias", np.zeros(cout))

    @property
    def fan_in(self) -> int:
        _, cg, kh, kw = self.weight.shape
        return cg * kh * kw

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def trace(self, shape, rec):
        n, c, h, w = shape
        if c != self.cin:
            raise ValueError(f"{self.path}: expected {self.cin} input channels, got shape {shape}")
        _, cg, kh, kw = self.weight.shape
        ho = (h + 2 * self.padding[0] - kh) // self.stride[0] + 1
        wo = (w + 2 * self.padding[1] - kw) // self.stride[1] + 1
        out = (n, self.cout, ho, wo)
        params = self.weight.size + (self.bias.size if self.bias is not None else 0)
        rec.add(self, "conv", shape, out, params, _numel(out) * cg * kh * kw)
        return out


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True):
        super().__init__()
        self.fin, self.fout = fin, fout
        self.parameter("weight", np.zeros((fout, fin)))
        self.bias = None
        if bias:
            self.parameter("bias", np.zeros(fout))

    @property
    def fan_in(self) -> int:
        return self.fin

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def trace(self, shape, rec):
        n, f = shape
        if f != self.fin:
            raise ValueError(f"{self.path}: expected {self.fin} features, got shape {shape}")
        out = (n, self.fout)
        params = self.weight.size + (self.bias.size if self.bias is not None else 0)
        rec.add(self, "linear", shape, out, params, n * self.fin * self.fout)
        return out


class _Norm(Module):
    kind = ""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.parameter("weight", np.ones(channels))
        self.parameter("bias", np.zeros(channels))

    def trace(self, shape, rec):
        if shape[1] != self.channels:
            raise ValueError(f"{self.path}: expected {self.channels} channels, got shape {shape}")
        rec.add(self, self.kind, shape, shape, self.weight.size + self.bias.size,
                elementwise=2 * _numel(shape))
        return tuple(shape)


class BatchNorm(_Norm):
    kind = "batch_norm"

    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__(channels)
        self.momentum = momentum
        self.buffer("running_mean", np.zeros(channels))
        self.buffer("running_var", np.ones(channels))

    def forward(self, x):
        return ops.normalize(x, "batch", self.weight, self.bias,
                             running_mean=self.running_mean.data,
                             running_var=self.running_var.data,
                             training=self.training, momentum=self.momentum)


class LayerNorm(_Norm):
    """Normalizes over the channel axis at every spatial position."""

    kind = "layer_norm"

    def forward(self, x):
        return ops.normalize(x, "layer", self.weight, self.bias)


class GroupNorm(_Norm):
    kind = "group_norm"

    def __init__(self, channels: int, groups: int):
        super().__init__(channels)
        if channels % groups:
            raise ValueError(f"{groups} groups do not divide {channels} channels")
        self.groups = groups

    def forward(self, x):
        return ops.normalize(x, "group", self.weight, self.bias, groups=self.groups)


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward(self, x):
        return ops.activation(x, self.kind)

    def trace(self, shape, rec):
        rec.add(self, self.kind, shape, shape, elementwise=2 * _numel(shape))
        return tuple(shape)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) truncated at +-bound standard deviations, by resampling."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


def initialize(module: Module, seed: int) -> Module:
    """Seeded init: conv/linear weights ~ truncated N(0, 1/fan_in), biases 0,
    norm scale 1 / shift 0, running stats reset. Visits modules in store order."""
    rng = np.random.default_rng(seed)
    for _, m in module.modules():
        if isinstance(m, (Conv2d, Linear)):
            m.weight.data = trunc_normal(rng, m.weight.shape, 1.0 / np.sqrt(m.fan_in))
            if m.bias is not None:
                m.bias.data = np.zeros_like(m.bias.data)
        elif isinstance(m, _Norm):
            m.weight.data = np.ones(m.channels)
            m.bias.data = np.zeros(m.channels)
            if isinstance(m, BatchNorm):
                m.running_mean.data = np.zeros(m.channels)
                m.running_var.data = np.ones(m.channels)
    return module
