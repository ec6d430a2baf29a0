"""Modified Inception block with asymmetric filters and a bridge residual."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import functional as F
from .errors import ConfigError
from .nn import Conv2d, ConvUnit, Linear, MaxPool2d, Module, Sequential, record_layers
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class InceptionConfig:
    """Channel widths of one block, in the column order of the layer tables."""

    in_channels: int
    reduce1_1x1: int
    branchA_1x3: int
    branchA_3x3: int
    reduce2_1x1: int
    branchB_3x1: int
    branchB_3x3: int
    residual_1x1: int
    conv_5x5: int
    bridge_residual: int
    out_channels: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"InceptionConfig.{f.name} must be >= 1")
        if self.bridge_residual != self.out_channels:
            raise ConfigError(
                f"bridge_residual ({self.bridge_residual}) must equal out_channels ({self.out_channels})"
            )

    @property
    def concat_channels(self) -> int:
        return self.branchA_3x3 + self.branchB_3x3 + self.conv_5x5

    def scaled(self, width: float) -> "InceptionConfig":
        """Every channel count multiplied by ``width`` (rounded, at least 1)."""
        return InceptionConfig(**{f.name: max(1, int(round(getattr(self, f.name) * width)))
                                  for f in fields(self)})


class InceptionBlock(Module):
    """Three parallel paths, concatenated and projected, plus a bridge shortcut.

    * A: 1x1 reduce -> 1x3 -> 3x3
    * B: 1x1 reduce -> 3x1 -> 3x3
    * C: 4x4/1 max-pool -> 1x1 residual -> 5x5
    * out = SELU(1x1 projection of concat(A, B, C)) + bridge 1x1(x)

    Every path convolution is followed by the activation; the bridge is a
    plain linear projection. Spatial extent is preserved.
    """

    def __init__(self, cfg: InceptionConfig, activation: str = "selu", bn: bool = False,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg

        def unit(cin, cout, k):
            return ConvUnit(cin, cout, k, activation=activation, bn=bn, rng=rng, dtype=dtype)

        c = cfg
        self.branch_a = Sequential(unit(c.in_channels, c.reduce1_1x1, 1),
                                   unit(c.reduce1_1x1, c.branchA_1x3, (1, 3)),
                                   unit(c.branchA_1x3, c.branchA_3x3, 3))
        self.branch_b = Sequential(unit(c.in_channels, c.reduce2_1x1, 1),
                                   unit(c.reduce2_1x1, c.branchB_3x1, (3, 1)),
                                   unit(c.branchB_3x1, c.branchB_3x3, 3))
        self.branch_c = Sequential(MaxPool2d(4, 1, "same"),
                                   unit(c.in_channels, c.residual_1x1, 1),
                                   unit(c.residual_1x1, c.conv_5x5, 5))
        self.project = unit(c.concat_channels, c.out_channels, 1)
        self.bridge = Conv2d(c.in_channels, c.bridge_residual, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        merged = F.concat([self.branch_a(x), self.branch_b(x), self.branch_c(x)], axis=1)
        return F.add(self.project(merged), self.bridge(x))

    def path_parameters(self) -> list:
        """Parameters of everything except the bridge shortcut."""
        bridge = {id(p) for p in self.bridge.parameters()}
        return [p for p in self.parameters() if id(p) not in bridge]


def build_inception(cfg: InceptionConfig, **kw) -> InceptionBlock:
    return InceptionBlock(cfg, **kw)


def count_params(module: Module) -> int:
    """Trainable scalars, biases included."""
    return int(sum(p.size for p in module.parameters()))


@dataclass
class BlockCostReport:
    parameter_count: int
    macs_total: int
    per_layer: list = field(default_factory=list)   # (repr, output shape, macs)
    asymmetric: list = field(default_factory=list)  # (repr, macs, macs of a 3x3 with same channels)

    @property
    def asymmetric_ratio(self) -> float | None:
        """MACs of the asymmetric layers over their 3x3 equivalents."""
        if not self.asymmetric:
            return None
        return sum(a[1] for a in self.asymmetric) / sum(a[2] for a in self.asymmetric)


def cost_report(network: Module, input_hw, in_channels: int | None = None) -> BlockCostReport:
    """Multiply-accumulate count of one forward pass at spatial size ``input_hw``.

    Shapes are discovered by running a single zero image through the network.
    """
    h, w = (input_hw, input_hw) if isinstance(input_hw, int) else input_hw
    if in_channels is None:
        in_channels = _first_in_channels(network)
    dtype = network.parameters()[0].dtype
    was_training = network.training
    network.eval()
    try:
        with no_grad(), record_layers() as log:
            network(Tensor(np.zeros((1, in_channels, h, w), dtype=dtype)))
    finally:
        network.train(was_training)
    report = BlockCostReport(count_params(network), 0)
    for layer, _, out_shape in log:
        if not isinstance(layer, (Conv2d, Linear)):
            continue
        macs = layer.macs(out_shape)
        report.macs_total += macs
        report.per_layer.append((repr(layer), out_shape, macs))
        if isinstance(layer, Conv2d) and sorted(layer.kernel) == [1, 3]:
            _, f, ho, wo = out_shape
            report.asymmetric.append((repr(layer), macs, ho * wo * f * F.macs_per_output_pixel(3, 3, layer.in_ch)))
    return report


def asymmetric_pair_macs(channels: int, h: int, w: int) -> tuple:
    """(MACs of a 1x3 + 3x1 pair, MACs of one 3x3), all ``channels``-to-``channels``."""
    pair = h * w * channels * (F.macs_per_output_pixel(1, 3, channels) + F.macs_per_output_pixel(3, 1, channels))
    full = h * w * channels * F.macs_per_output_pixel(3, 3, channels)
    return pair, full


def _first_in_channels(network: Module) -> int:
    for m in network.modules():
        if isinstance(m, Conv2d):
            return m.in_ch
    raise ConfigError("network has no convolution; pass in_channels explicitly")
