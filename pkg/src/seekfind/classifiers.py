"""Zone and pedestrian classifiers, plus the binary weights format."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .errors import (ConfigError, WeightsFormatError, WeightsIntegrityError, WeightsShapeError,
                     WeightsVersionError)
from .inception import InceptionBlock, InceptionConfig, count_params
from .nn import Activation, BatchNorm, ConvUnit, Linear, MaxPool2d, Module, Sequential
from .tensor import Tensor, no_grad

INPUT_SHAPE = (3, 64, 64)


@dataclass(frozen=True)
class LayerSpec:
    """One row of a layer table."""

    kind: str                      # conv | pool | inception
    output: tuple                  # (height, width, channels) as declared
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    inception: InceptionConfig | None = None
    table_params: int | None = None


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    hidden: tuple                  # main-path linear widths after flattening
    residual: int                  # width of the flattened-feature projection
    combine: str                   # "concat" or "add"
    head_table_params: dict = field(default_factory=dict)
    inception_bridge_table: dict = field(default_factory=dict)  # declared bridge widths that differ from out

    def __post_init__(self):
        if self.combine not in ("concat", "add"):
            raise ConfigError(f"unknown head combination rule {self.combine!r}")
        if self.combine == "add" and self.hidden[-1] != self.residual:
            raise ConfigError("additive head needs residual width == last hidden width")

    @property
    def flat_features(self) -> int:
        h, w, c = self.layers[-1].output
        return h * w * c

    @property
    def combined_width(self) -> int:
        return self.hidden[-1] + self.residual if self.combine == "concat" else self.residual

    def scaled(self, width: float) -> "NetworkSpec":
        """Same topology with every channel/feature width multiplied by ``width``."""
        if width == 1.0:
            return self

        def s(n):
            return max(1, int(round(n * width)))

        layers = []
        for L in self.layers:
            h, w, c = L.output
            inc = L.inception.scaled(width) if L.inception else None
            layers.append(LayerSpec(L.kind, (h, w, s(c)), L.kernel, L.stride, L.padding, inc, None))
        return NetworkSpec(f"{self.name}@{width:g}", tuple(layers), tuple(s(n) for n in self.hidden),
                           s(self.residual), self.combine)


def _inc(cin, r1, a13, a33, r2, b31, b33, res, c5, out):
    return InceptionConfig(cin, r1, a13, a33, r2, b31, b33, res, c5, out, out)


ZONE_SPEC = NetworkSpec(
    name="zone",
    layers=(
        LayerSpec("conv", (32, 32, 32), kernel=3, stride=2, padding=1, table_params=896),
        LayerSpec("pool", (16, 16, 32), kernel=4, stride=2, padding=1),
        LayerSpec("inception", (16, 16, 64), inception=_inc(32, 16, 8, 16, 16, 8, 16, 32, 32, 64),
                  table_params=33744),
        LayerSpec("pool", (8, 8, 64), kernel=4, stride=2, padding=1),
        # table declares bridge width 128 for a 96-channel output; the shortcut must match the output
        LayerSpec("inception", (8, 8, 96), inception=_inc(64, 32, 16, 32, 32, 16, 32, 64, 64, 96),
                  table_params=79168),
        LayerSpec("pool", (4, 4, 96), kernel=4, stride=2, padding=1),
    ),
    hidden=(128,),
    residual=128,
    combine="concat",
    head_table_params={"linear0": 196736, "residual": 196736, "final": 514},
    inception_bridge_table={4: 128},
)

PEDESTRIAN_SPEC = NetworkSpec(
    name="pedestrian",
    layers=(
        LayerSpec("conv", (64, 64, 32), kernel=3, stride=1, padding=1, table_params=896),
        LayerSpec("pool", (32, 32, 32), kernel=4, stride=2, padding=1),
        LayerSpec("inception", (32, 32, 64), inception=_inc(32, 32, 16, 32, 32, 16, 32, 16, 16, 64),
                  table_params=24080),
        LayerSpec("pool", (16, 16, 64), kernel=4, stride=2, padding=1),
        LayerSpec("inception", (16, 16, 128), inception=_inc(64, 48, 32, 48, 48, 32, 48, 32, 32, 128),
                  table_params=91584),
        LayerSpec("inception", (16, 16, 128), inception=_inc(128, 48, 32, 48, 48, 32, 48, 32, 32, 128),
                  table_params=111040),
        LayerSpec("pool", (8, 8, 128), kernel=4, stride=2, padding=1),
        LayerSpec("inception", (8, 8, 200), inception=_inc(128, 80, 40, 80, 80, 40, 80, 40, 40, 200),
                  table_params=226320),
        LayerSpec("inception", (8, 8, 200), inception=_inc(200, 80, 40, 80, 80, 40, 80, 40, 40, 200),
                  table_params=226320),
        LayerSpec("pool", (4, 4, 200), kernel=4, stride=2, padding=1),
    ),
    hidden=(512, 256),
    residual=256,
    combine="add",
    head_table_params={"linear0": 1638912, "linear1": 131328, "residual": 819456, "final": 514},
)


class Classifier(Module):
    """Binary classifier over 3x64x64 crops: feature body plus a residual head."""

    def __init__(self, spec: NetworkSpec, activation: str = "selu", bn: bool = False,
                 seed: int = 0, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "activation", activation)
        object.__setattr__(self, "bn", bn)
        rng = np.random.default_rng(seed)
        body = []
        channels = INPUT_SHAPE[0]
        for L in spec.layers:
            if L.kind == "conv":
                body.append(ConvUnit(channels, L.output[2], L.kernel, L.stride, L.padding,
                                     activation=activation, bn=bn, rng=rng, dtype=dtype))
            elif L.kind == "pool":
                body.append(MaxPool2d(L.kernel, L.stride, L.padding))
            elif L.kind == "inception":
                if L.inception.in_channels != channels:
                    raise ConfigError(f"{spec.name}: inception expects {L.inception.in_channels} "
                                      f"channels, previous layer yields {channels}")
                body.append(InceptionBlock(L.inception, activation=activation, bn=bn, rng=rng, dtype=dtype))
            else:
                raise ConfigError(f"unknown layer kind {L.kind!r}")
            channels = L.output[2]
        self.body = Sequential(*body)
        widths = (spec.flat_features,) + tuple(spec.hidden)
        self.hidden = Sequential(*[Linear(a, b, rng=rng, dtype=dtype) for a, b in zip(widths, widths[1:])])
        self.residual = Linear(spec.flat_features, spec.residual, rng=rng, dtype=dtype)
        self.final = Linear(spec.combined_width, 2, rng=rng, dtype=dtype)
        self.act = Activation(activation)

    def forward(self, x):
        feats = F.flatten(self.body(x))
        h = feats
        for k, layer in enumerate(self.hidden):
            h = layer(h)
            if k < len(self.hidden) - 1:
                h = self.act(h)
        r = self.residual(feats)
        if self.spec.combine == "concat":
            h = F.concat([self.act(h), r], axis=1)
        else:
            h = F.add(h, r)
        return self.final(self.act(h))

    def predict_proba(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Positive-class probability for a standardized (N, 3, 64, 64) batch."""
        was_training = self.training
        self.eval()
        dtype = self.final.weight.dtype
        out = np.empty(len(images), dtype=np.float64)
        try:
            with no_grad():
                for lo in range(0, len(images), batch_size):
                    chunk = np.asarray(images[lo: lo + batch_size], dtype=dtype)
                    logits = self(Tensor(chunk)).data.astype(np.float64)
                    out[lo: lo + batch_size] = F.softmax(logits)[:, 1]
        finally:
            self.train(was_training)
        return out

    def layer_param_table(self) -> list:
        """(row label, built params, table params or None) in table order."""
        rows = []
        for k, (L, mod) in enumerate(zip(self.spec.layers, self.body)):
            if L.kind == "pool":
                continue
            rows.append((f"{L.kind} {L.output[0]}x{L.output[1]}/{L.output[2]}", count_params(mod), L.table_params))
        t = self.spec.head_table_params
        for k, layer in enumerate(self.hidden):
            rows.append((f"linear {layer.out_features}", count_params(layer), t.get(f"linear{k}")))
        rows.append((f"residual {self.residual.out_features}", count_params(self.residual), t.get("residual")))
        rows.append((f"linear {self.final.out_features}", count_params(self.final), t.get("final")))
        return rows

    def state_tensors(self) -> list:
        """(name, array) for every parameter followed by batch-norm running stats."""
        items = [(n, p.data) for n, p in self.named_parameters()]
        for i, m in enumerate(self.modules()):
            if isinstance(m, BatchNorm):
                items.append((f"bn{i}.running_mean", m.state.mean))
                items.append((f"bn{i}.running_var", m.state.var))
        return items


def build_zone_classifier(width: float = 1.0, activation: str = "selu", bn: bool = False,
                          seed: int = 0, dtype=np.float32) -> Classifier:
    return Classifier(ZONE_SPEC.scaled(width), activation=activation, bn=bn, seed=seed, dtype=dtype)


def build_pedestrian_classifier(width: float = 1.0, activation: str = "selu", bn: bool = False,
                                seed: int = 0, dtype=np.float32) -> Classifier:
    return Classifier(PEDESTRIAN_SPEC.scaled(width), activation=activation, bn=bn, seed=seed, dtype=dtype)


# --------------------------------------------------------------------------
# weights file
# --------------------------------------------------------------------------

MAGIC = b"SAYF"
VERSION = 1


def save_weights(network: Classifier, path) -> Path:
    """Write every parameter as little-endian float32 with a trailing CRC-32."""
    items = network.state_tensors()
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(items))
    for index, (_, arr) in enumerate(items):
        buf += struct.pack("<II", index, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    path = Path(path)
    path.write_bytes(bytes(buf))
    return path


def read_weights(path) -> list:
    """Parse a weights file into a list of float32 arrays, validating integrity."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise WeightsIntegrityError(f"{path}: file truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {raw[:4]!r}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise WeightsIntegrityError(f"{path}: checksum mismatch (truncated or corrupted)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise WeightsVersionError(f"{path}: format version {version}, expected {VERSION}")
    arrays, off, end = [], 12, len(raw) - 4
    try:
        for expected in range(count):
            index, rank = struct.unpack_from("<II", raw, off)
            off += 8
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if index != expected or off + 4 * n > end:
                raise WeightsIntegrityError(f"{path}: malformed record {expected}")
            arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32))
            off += 4 * n
    except struct.error as exc:
        raise WeightsIntegrityError(f"{path}: truncated record table") from exc
    if off != end:
        raise WeightsIntegrityError(f"{path}: {end - off} trailing bytes")
    return arrays


def load_weights(path, network: Classifier) -> Classifier:
    """Fill ``network`` in place from ``path``; shapes must match record by record."""
    arrays = read_weights(path)
    items = network.state_tensors()
    for (name, target), arr in zip(items, arrays):
        if target.shape != arr.shape:
            raise WeightsShapeError(f"layer {name!r}: file has shape {arr.shape}, network expects {target.shape}",
                                    layer=name)
    if len(arrays) != len(items):
        raise WeightsShapeError(f"file holds {len(arrays)} tensors, network has {len(items)}",
                                layer=items[min(len(arrays), len(items) - 1)][0])
    for (_, target), arr in zip(items, arrays):
        target[...] = arr.astype(target.dtype)
    return network
