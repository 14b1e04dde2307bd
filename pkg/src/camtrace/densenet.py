"""Densely connected feature extractor.

Stem (7x7 conv stride 2 -> 3x3 max pool stride 2), alternating dense blocks
and transitions (max pool after block 1, average pools after the rest),
final BN -> ReLU -> global average pooling, and a detachable softmax head.
Each dense layer concatenates its k new channels onto everything before it;
transitions compress channels by the compression factor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import netcore as nc
from .errors import BadPatchSize, InvalidConfig, WeightStoreError
from .imagecore import PATCH_SIZES, RasterImage
from .netcore import BatchNorm2d, Conv2d, Dense, Tensor, no_grad
from .weightstore import config_digest, load_weights, save_weights

# input standardization constants (samples scaled to [0,1] first)
NORM_MEAN = 0.5
NORM_STD = 0.25


@dataclass(frozen=True)
class DenseNetConfig:
    block_sizes: tuple[int, ...]
    growth_rate: int = 32
    compression: float = 0.5
    init_channels: int = 64
    input_size: int = 256
    bottleneck_mult: int = 4
    num_classes: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if not self.block_sizes or any(b < 1 for b in self.block_sizes):
            raise InvalidConfig(f"block_sizes must be positive, got {self.block_sizes}")
        if self.growth_rate < 1:
            raise InvalidConfig(f"growth_rate must be >= 1, got {self.growth_rate}")
        if not 0.0 < self.compression <= 1.0:
            raise InvalidConfig(f"compression must be in (0, 1], got {self.compression}")
        if self.init_channels < 1 or self.bottleneck_mult < 1 or self.num_classes < 2:
            raise InvalidConfig("init_channels/bottleneck_mult/num_classes out of range")

    def arch_fields(self) -> dict:
        """Fields that determine extractor weight shapes (head excluded)."""
        d = asdict(self)
        d["block_sizes"] = list(self.block_sizes)
        d.pop("num_classes")
        d.pop("input_size")  # global average pooling makes features size-invariant
        return d

    def arch_digest(self) -> str:
        return config_digest(self.arch_fields())


DENSENET201 = DenseNetConfig(block_sizes=(6, 12, 48, 32))


class ScaleTag(Enum):
    P256 = 256
    P128 = 128
    P64 = 64


@dataclass
class FeatureVector:
    values: np.ndarray  # (F,)
    scale_tag: ScaleTag


def channel_trace(config: DenseNetConfig) -> list[int]:
    """Symbolic channel bookkeeping: init, after each block, after each transition."""
    trace = [config.init_channels]
    channels = config.init_channels
    for b, n_layers in enumerate(config.block_sizes):
        channels += n_layers * config.growth_rate
        trace.append(channels)
        if b < len(config.block_sizes) - 1:
            channels = int(np.floor(config.compression * channels))
            trace.append(channels)
    return trace


def feature_length(config: DenseNetConfig) -> int:
    return channel_trace(config)[-1]


class DenseLayer(nc.Layer):
    """BN -> ReLU -> 1x1 conv (bottleneck) -> BN -> ReLU -> 3x3 conv -> concat."""

    def __init__(self, in_ch: int, growth: int, bottleneck: int, *, rng, dtype):
        self.bn1 = BatchNorm2d(in_ch, dtype=dtype)
        self.conv1 = Conv2d(in_ch, bottleneck, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(bottleneck, dtype=dtype)
        self.conv2 = Conv2d(bottleneck, growth, 3, padding=1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        h = self.conv1(nc.relu(self.bn1(x, training)))
        h = self.conv2(nc.relu(self.bn2(h, training)))
        return nc.concat([x, h], axis=1)

    def submodules(self):
        return {"bn1": self.bn1, "conv1": self.conv1, "bn2": self.bn2, "conv2": self.conv2}


class TransitionLayer(nc.Layer):
    """BN -> ReLU -> 1x1 conv to compressed channels -> stride-2 pool."""

    def __init__(self, in_ch: int, out_ch: int, pool_kind: str, *, rng, dtype):
        if pool_kind not in ("max", "avg"):
            raise InvalidConfig(f"pool_kind must be max|avg, got {pool_kind}")
        self.pool_kind = pool_kind
        self.bn = BatchNorm2d(in_ch, dtype=dtype)
        self.conv = Conv2d(in_ch, out_ch, 1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        h = self.conv(nc.relu(self.bn(x, training)))
        if self.pool_kind == "max":
            return nc.maxpool2d(h, 3, 2, padding=1)
        return nc.avgpool2d(h, 2, 2)

    def submodules(self):
        return {"bn": self.bn, "conv": self.conv}


class DenseNet:
    """The assembled extractor plus a detachable softmax head."""

    def __init__(self, config: DenseNetConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.dtype = dtype
        self.stem_conv = Conv2d(
            3, config.init_channels, 7, stride=2, padding=3, rng=rng, dtype=dtype
        )
        self.blocks: list[list[DenseLayer]] = []
        self.transitions: list[TransitionLayer] = []
        channels = config.init_channels
        bottleneck = config.bottleneck_mult * config.growth_rate
        for b, n_layers in enumerate(config.block_sizes):
            block = []
            for _ in range(n_layers):
                block.append(
                    DenseLayer(channels, config.growth_rate, bottleneck, rng=rng, dtype=dtype)
                )
                channels += config.growth_rate
            self.blocks.append(block)
            if b < len(config.block_sizes) - 1:
                out_ch = int(np.floor(config.compression * channels))
                pool_kind = "max" if b == 0 else "avg"
                self.transitions.append(
                    TransitionLayer(channels, out_ch, pool_kind, rng=rng, dtype=dtype)
                )
                channels = out_ch
        self.final_bn = BatchNorm2d(channels, dtype=dtype)
        self.feature_len = channels
        self.head = Dense(channels, config.num_classes, rng=rng, dtype=dtype)

    # ----------------------------------------------------------- forward
    def features(self, x: Tensor, training: bool = False,
                 shape_probe: list | None = None) -> Tensor:
        """Forward up to (excluding) the softmax head; returns (N, F)."""
        h = self.stem_conv(x)
        h = nc.maxpool2d(h, 3, 2, padding=1)
        if shape_probe is not None:
            shape_probe.append(h.shape)
        for b, block in enumerate(self.blocks):
            for layer in block:
                h = layer(h, training)
            if shape_probe is not None:
                shape_probe.append(h.shape)
            if b < len(self.blocks) - 1:
                h = self.transitions[b](h, training)
                if shape_probe is not None:
                    shape_probe.append(h.shape)
        h = nc.relu(self.final_bn(h, training))
        return nc.global_avg_pool(h)

    def logits(self, x: Tensor, training: bool = False) -> Tensor:
        return self.head(self.features(x, training))

    def probabilities(self, x: Tensor, training: bool = False) -> Tensor:
        return nc.softmax(self.logits(x, training), axis=1)

    # -------------------------------------------------------- parameters
    def _modules(self) -> dict[str, nc.Layer]:
        mods: dict[str, nc.Layer] = {"stem.conv": self.stem_conv}
        for b, block in enumerate(self.blocks):
            for i, layer in enumerate(block):
                for name, sub in layer.submodules().items():
                    mods[f"block{b}.layer{i}.{name}"] = sub
        for t, trans in enumerate(self.transitions):
            for name, sub in trans.submodules().items():
                mods[f"transition{t}.{name}"] = sub
        mods["final.bn"] = self.final_bn
        mods["head"] = self.head
        return mods

    def params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in self._modules().items():
            for name, tensor in mod.params().items():
                out[f"{prefix}.{name}"] = tensor
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self._modules().items():
            for name, arr in mod.buffers().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params().items()}
        out.update(self.buffers())
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params().values())


def build_network(config: DenseNetConfig, seed: int = 0, dtype=np.float32) -> DenseNet:
    net = DenseNet(config, seed=seed, dtype=dtype)
    # the constructed tensor shapes must match the symbolic channel trace
    trace = channel_trace(config)
    if net.feature_len != trace[-1]:
        raise InvalidConfig(
            f"channel bookkeeping mismatch: built {net.feature_len}, trace {trace[-1]}"
        )
    return net


def save_network(net: DenseNet, path) -> None:
    save_weights(path, net.config.arch_digest(), net.arrays())


def load_network(
    config: DenseNetConfig, path, seed: int = 0, dtype=np.float32,
    reinit_head: bool = False,
) -> DenseNet:
    """Rebuild a network and fill it from a store with a matching digest.

    `reinit_head` permits transfer learning: head arrays whose shapes differ
    (new class count) keep their fresh initialization; everything else must
    match exactly.
    """
    net = build_network(config, seed=seed, dtype=dtype)
    _, arrays = load_weights(path, expected_digest=config.arch_digest())
    fill_from_arrays(net, arrays, reinit_head=reinit_head)
    return net


def fill_from_arrays(net: DenseNet, arrays: dict[str, np.ndarray], reinit_head: bool = False):
    params = net.params()
    buffers = net.buffers()
    for name, tensor in params.items():
        if name not in arrays:
            raise WeightStoreError(f"store is missing parameter {name}")
        stored = arrays[name]
        if stored.shape != tensor.data.shape:
            if reinit_head and name.startswith("head."):
                continue
            raise WeightStoreError(
                f"shape mismatch for {name}: store {stored.shape}, net {tensor.data.shape}"
            )
        tensor.data[...] = stored.astype(net.dtype)
    for name, buf in buffers.items():
        if name not in arrays:
            raise WeightStoreError(f"store is missing buffer {name}")
        buf[...] = arrays[name].astype(buf.dtype)


def normalize_patch(patch: RasterImage, dtype=np.float32) -> np.ndarray:
    """(1, 3, H, W) standardized input: [0,1] scaling then (x - 0.5) / 0.25."""
    arr = patch.pixels.astype(np.float64) / 255.0
    arr = (arr - NORM_MEAN) / NORM_STD
    return arr.transpose(2, 0, 1)[None].astype(dtype)


def extract_feature(net: DenseNet, patch: RasterImage) -> FeatureVector:
    """Eval-mode forward to the pooled feature, for the three patch scales."""
    if patch.width != patch.height or patch.width not in PATCH_SIZES:
        raise BadPatchSize(
            f"patch must be square with size in {PATCH_SIZES}, "
            f"got {patch.width}x{patch.height}"
        )
    x = Tensor(normalize_patch(patch, dtype=net.dtype))
    with no_grad():
        feats = net.features(x, training=False)
    return FeatureVector(
        values=feats.data[0].copy(), scale_tag=ScaleTag(patch.width)
    )
