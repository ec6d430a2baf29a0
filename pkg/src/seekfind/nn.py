"""Layer objects holding parameters, built on :mod:`seekfind.functional`."""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import functional as F
from .tensor import Tensor, as_tensor

_trace = threading.local()


@contextmanager
def record_layers():
    """Collect ``(layer, input_shape, output_shape)`` for every leaf layer call."""
    prev = getattr(_trace, "log", None)
    log = []
    _trace.log = log
    try:
        yield log
    finally:
        _trace.log = prev


def _log(layer, x, y):
    log = getattr(_trace, "log", None)
    if log is not None:
        log.append((layer, tuple(x.shape), tuple(y.shape)))


class Module:
    """Container base: attributes that are Tensors or Modules are registered."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters (and buffers) in place; returns self."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.state.mean = m.state.mean.astype(dtype)
                m.state.var = m.state.var.astype(dtype)
        return self

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError


def fan_in_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.standard_normal(shape) / np.sqrt(fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, stride: int = 1, padding="same",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        if padding == "same":
            if stride != 1:
                raise ValueError("'same' padding is only defined for stride 1")
            padding = F.same_padding(kh) + F.same_padding(kw)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.weight = fan_in_normal(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw, dtype)
        self.bias = zeros_param((out_ch,), dtype)

    def forward(self, x):
        y = F.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        _log(self, x, y)
        return y

    def macs(self, out_shape) -> int:
        _, f, ho, wo = out_shape
        return ho * wo * f * F.macs_per_output_pixel(*self.kernel, self.in_ch)

    def __repr__(self):
        kh, kw = self.kernel
        return f"Conv2d({self.in_ch}->{self.out_ch}, {kh}x{kw}/{self.stride})"


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = fan_in_normal(rng, (in_features, out_features), in_features, dtype)
        self.bias = zeros_param((out_features,), dtype)

    def forward(self, x):
        y = F.linear(x, self.weight, self.bias)
        _log(self, x, y)
        return y

    def macs(self, out_shape) -> int:
        return self.in_features * self.out_features

    def __repr__(self):
        return f"Linear({self.in_features}->{self.out_features})"


class MaxPool2d(Module):
    def __init__(self, kernel: int, stride: int, padding=0):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        if padding == "same":
            if stride != 1:
                raise ValueError("'same' padding is only defined for stride 1")
            padding = F.same_padding(kernel) + F.same_padding(kernel)
        self.padding = padding

    def forward(self, x):
        y = F.maxpool2d(x, self.kernel, self.kernel, self.stride, self.padding)
        _log(self, x, y)
        return y

    def __repr__(self):
        return f"MaxPool2d({self.kernel}x{self.kernel}/{self.stride})"


class Activation(Module):
    """SELU or ReLU; optionally appends (kind, mean, var) of its output to ``probe``."""

    def __init__(self, kind: str = "selu", constants: F.SeluConstants = F.SELU_DEFAULT):
        super().__init__()
        if kind not in F.ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.constants = constants
        self.probe = None

    def forward(self, x):
        y = F.selu(x, self.constants) if self.kind == "selu" else F.relu(x)
        if self.probe is not None:
            self.probe.append((self.kind, float(y.data.mean()), float(y.data.var())))
        return y

    def __repr__(self):
        return self.kind.upper()


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = zeros_param((channels,), dtype)
        self.state = F.BatchNormState.fresh(channels, dtype, momentum=momentum, eps=eps)

    def forward(self, x):
        return F.batchnorm(x, self.gamma, self.beta, self.state, "train" if self.training else "eval")


class Flatten(Module):
    def forward(self, x):
        return F.flatten(x)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            self._children[str(i)] = layer

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


class ConvUnit(Sequential):
    """Convolution followed by optional batch norm and the activation."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding="same", activation="selu",
                 bn=False, rng=None, dtype=np.float32):
        conv = Conv2d(in_ch, out_ch, kernel, stride, padding, rng=rng, dtype=dtype)
        layers = [conv]
        if bn:
            layers.append(BatchNorm(out_ch, dtype=dtype))
        layers.append(Activation(activation))
        super().__init__(*layers)
        object.__setattr__(self, "conv", conv)


def probe_activations(net: Module, x) -> list:
    """Run ``net`` on ``x``; return (kind, mean, var) after each activation, in call order."""
    from .tensor import no_grad

    acts = [m for m in net.modules() if isinstance(m, Activation)]
    log = []
    for a in acts:
        a.probe = log
    try:
        with no_grad():
            net(as_tensor(x))
    finally:
        for a in acts:
            a.probe = None
    return log
