"""Multi-scale feature fusion, squeeze-excite recalibration, classification.

One frozen extractor produces features at three scales from a single 256
patch: the patch itself, the average over its 4 disjoint 128 quadrants, and
the average over its 16 disjoint 64 tiles, stacked into a 3 x F matrix. The
SE block squeezes across the scale axis and gates the F feature channels;
the classification block is dropout -> scale-average -> dense -> softmax.
Per-image prediction averages the probability vectors of the image's best
256 patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netcore as nc
from .densenet import DenseNet, extract_feature
from .errors import BadPatchSize, InvalidConfig, ShapeMismatch
from .imagecore import PatchRef, RasterImage, extract_patch
from .netcore import Dense, Dropout, Tensor, no_grad
from .patchqual import QualityParams, grid_refs, select_top_patches
from .weightstore import config_digest, load_weights, save_weights

SE_REDUCTION_DEFAULT = 16
HEAD_DROPOUT = 0.30

SCALE_ROWS = ("P256", "P128", "P64")


@dataclass
class FusedFeature:
    """3 x F matrix, rows ordered (P256, P128 average, P64 average)."""

    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != 3:
            raise ShapeMismatch(f"fused feature must be 3xF, got {self.matrix.shape}")


def fuse(extractor: DenseNet, patch256: RasterImage) -> FusedFeature:
    """Three-scale fusion of one 256 patch through one shared extractor."""
    if patch256.width != 256 or patch256.height != 256:
        raise BadPatchSize(
            f"fusion input must be 256x256, got {patch256.width}x{patch256.height}"
        )
    rows = [extract_feature(extractor, patch256).values]
    for size in (128, 64):
        feats = []
        for y0 in range(0, 256, size):
            for x0 in range(0, 256, size):
                sub = extract_patch(patch256, PatchRef("", x0, y0, size))
                feats.append(extract_feature(extractor, sub).values)
        rows.append(np.mean(np.stack(feats), axis=0))
    return FusedFeature(matrix=np.stack(rows))


class SeBlock(nc.Layer):
    """Squeeze over the scale axis, excite per feature channel."""

    def __init__(self, feature_len: int, reduction: int = SE_REDUCTION_DEFAULT, *,
                 rng: np.random.Generator, dtype=np.float32):
        if feature_len % reduction != 0:
            raise InvalidConfig(
                f"feature length {feature_len} not divisible by reduction {reduction}"
            )
        self.feature_len = feature_len
        self.reduction = reduction
        self.reduce = Dense(feature_len, feature_len // reduction, rng=rng, dtype=dtype)
        self.expand = Dense(feature_len // reduction, feature_len, rng=rng, dtype=dtype)

    def gates(self, x: Tensor) -> Tensor:
        """(N, 3, F) -> (N, F) gate vector, entries in (0, 1)."""
        z = nc.mean(x, axis=1)  # squeeze across the 3 scales
        return nc.sigmoid(self.expand(nc.relu(self.reduce(z))))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != 3 or x.shape[2] != self.feature_len:
            raise ShapeMismatch(f"SE block expects (N, 3, {self.feature_len}), got {x.shape}")
        g = self.gates(x)
        return nc.mul(x, nc.reshape(g, (x.shape[0], 1, self.feature_len)))

    def params(self):
        return {
            "reduce.weight": self.reduce.weight,
            "reduce.bias": self.reduce.bias,
            "expand.weight": self.expand.weight,
            "expand.bias": self.expand.bias,
        }


class FusionHead:
    """SE recalibration plus the classification block."""

    def __init__(self, feature_len: int, num_classes: int,
                 reduction: int = SE_REDUCTION_DEFAULT,
                 dropout_rate: float = HEAD_DROPOUT,
                 seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.feature_len = feature_len
        self.num_classes = num_classes
        self.dropout_rate = dropout_rate
        self.se = SeBlock(feature_len, reduction, rng=rng, dtype=dtype)
        self.dropout = Dropout(dropout_rate)
        self.classifier = Dense(feature_len, num_classes, rng=rng, dtype=dtype)
        self.dtype = dtype

    def forward_batch(self, x: Tensor, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
        """(N, 3, F) fused features -> (N, num_classes) logits."""
        h = self.se(x)
        h = self.dropout(h, training=training, rng=rng)
        h = nc.mean(h, axis=1)  # global average pooling over the 3 scales
        return self.classifier(h)

    def config_fields(self) -> dict:
        return {
            "feature_len": self.feature_len,
            "num_classes": self.num_classes,
            "reduction": self.se.reduction,
            "dropout_rate": self.dropout_rate,
        }

    def digest(self) -> str:
        return config_digest(self.config_fields())

    def params(self) -> dict[str, Tensor]:
        out = {f"se.{k}": v for k, v in self.se.params().items()}
        out["classifier.weight"] = self.classifier.weight
        out["classifier.bias"] = self.classifier.bias
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params().items()}


def save_head(head: FusionHead, path) -> None:
    save_weights(path, head.digest(), head.arrays())


def load_head(path, feature_len: int, num_classes: int,
              reduction: int = SE_REDUCTION_DEFAULT,
              dropout_rate: float = HEAD_DROPOUT, dtype=np.float32) -> FusionHead:
    head = FusionHead(feature_len, num_classes, reduction, dropout_rate, dtype=dtype)
    _, arrays = load_weights(path, expected_digest=head.digest())
    for name, tensor in head.params().items():
        stored = arrays[name]
        if stored.shape != tensor.data.shape:
            raise ShapeMismatch(f"{name}: store {stored.shape} vs head {tensor.data.shape}")
        tensor.data[...] = stored.astype(dtype)
    return head


def se_forward(fused: FusedFeature, se: SeBlock) -> FusedFeature:
    """Eval-mode SE pass on one fused feature; dimensions unchanged."""
    with no_grad():
        x = Tensor(fused.matrix[None].astype(se.reduce.weight.dtype))
        out = se(x)
    return FusedFeature(matrix=out.data[0])


def head_forward(fused: FusedFeature, head: FusionHead, training: bool = False,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities for one fused feature."""
    x = Tensor(fused.matrix[None].astype(head.dtype))
    if training:
        logits = head.forward_batch(x, training=True, rng=rng)
        return nc.softmax(logits, axis=1).data[0]
    with no_grad():
        logits = head.forward_batch(x, training=False)
        return nc.softmax(logits, axis=1).data[0]


def predict_patch(extractor: DenseNet, head: FusionHead, patch256: RasterImage) -> np.ndarray:
    return head_forward(fuse(extractor, patch256), head)


def predict_image(
    extractor: DenseNet,
    head: FusionHead,
    image: RasterImage,
    k: int = 4,
    params: QualityParams = QualityParams(),
    tiled: bool = False,
) -> np.ndarray:
    """Average the per-patch probability vectors over the image's 256 patches.

    `tiled` scores every grid cell instead of the top-k quality selection.
    """
    if tiled:
        refs = grid_refs(image, 256)
    else:
        refs = [sp.ref for sp in select_top_patches(image, 256, k, params)]
    probs = np.zeros(head.num_classes, dtype=np.float64)
    for ref in refs:
        patch = extract_patch(image, ref)
        probs += predict_patch(extractor, head, patch)
    probs /= len(refs)
    total = probs.sum()
    if total > 0:
        probs = probs / total  # renormalize away float drift
    return probs
