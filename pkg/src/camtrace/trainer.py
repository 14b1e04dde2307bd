"""Optimization loop, plateau schedule, dataset splitting, training phases.

Phase 1 first trains the extractor with its own temporary softmax head, then
trains the SE + classification head on frozen fused features. Phases 2 and 3
fine-tune extractor and head jointly from a phase-1 store (new class count,
reinitialized classifier). Training is SGD with momentum under a
reduce-on-plateau schedule that stops once a decay would drop the learning
rate below the floor.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .densenet import (
    DenseNet,
    DenseNetConfig,
    build_network,
    load_network,
    normalize_patch,
    save_network,
)
from .errors import (
    ClassImbalance,
    DivergedLoss,
    EmptyManifest,
    InvalidConfig,
)
from .fusionhead import FusionHead, fuse, save_head
from .imagecore import decode_image
from .netcore import Tensor, cross_entropy, no_grad

STOP = "stop"
BALANCE_TOLERANCE = 0.05


class Phase(Enum):
    P1_EXTRACTOR = "p1-extractor"
    P1_HEAD = "p1-head"
    P2_TRANSFER = "p2"
    P3_MANIP = "p3"

    @classmethod
    def parse(cls, token: str) -> "Phase":
        for member in cls:
            if member.value == token.strip().lower():
                return member
        raise ValueError(f"unknown phase {token!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    momentum: float = 0.9
    lr_init: float = 1e-3
    lr_decay_factor: float = 0.1
    plateau_patience: int = 2
    lr_floor: float = 1e-7
    batch_size: int = 32
    seed: int = 0
    max_epochs: int = 50


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.85
    seed: int = 0


@dataclass(frozen=True)
class PhaseSpec:
    phase: Phase
    num_classes: int
    patch_size: int
    init_from: Path | None = None
    freeze_extractor: bool = False
    balance_tolerance: float = BALANCE_TOLERANCE

    def __post_init__(self) -> None:
        if self.phase is Phase.P1_HEAD and not self.freeze_extractor:
            object.__setattr__(self, "freeze_extractor", True)
        if self.phase in (Phase.P2_TRANSFER, Phase.P3_MANIP, Phase.P1_HEAD):
            if self.init_from is None:
                raise InvalidConfig(f"{self.phase.value} requires init_from")
        if self.phase is Phase.P3_MANIP:
            if self.patch_size != 128:
                raise InvalidConfig(
                    f"phase 3 trains on 128x128 patches, got {self.patch_size}"
                )
            if self.num_classes != 4:
                raise InvalidConfig(f"phase 3 has 4 classes, got {self.num_classes}")
        if self.patch_size not in (64, 128, 256):
            raise InvalidConfig(f"patch_size must be 64/128/256, got {self.patch_size}")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")


@dataclass(frozen=True)
class PatchRecord:
    """One training patch on disk."""

    path: str
    source_id: str
    label: int


@dataclass
class PhaseResult:
    final_store: Path
    best_store: Path
    log_path: Path
    log: list[dict]
    stop_reason: str


# ------------------------------------------------------------------ optimizer


class SgdMomentum:
    """v <- momentum * v + grad; param <- param - lr * v."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, "Tensor"], lr: float) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                self.velocity[name] = v
            v *= self.momentum
            v += p.grad
            p.data -= (lr * v).astype(p.data.dtype, copy=False)

    def zero_grad(self, params: dict[str, "Tensor"]) -> None:
        for p in params.values():
            p.zero_grad()


class PlateauSchedule:
    """Decay lr by the factor after `patience` epochs without a new best loss.

    The bad-epoch counter resets on every decay; a decay that would land
    below the floor emits STOP instead.
    """

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.lr = config.lr_init
        self.best = float("inf")
        self.bad_epochs = 0

    def observe(self, val_loss: float):
        """Returns the lr for the next epoch, or STOP."""
        if val_loss < self.best:  # strict improvement, tolerance 0
            self.best = val_loss
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.config.plateau_patience:
            decayed = self.lr * self.config.lr_decay_factor
            if decayed < self.config.lr_floor * (1.0 - 1e-9):
                return STOP
            self.lr = decayed
            self.bad_epochs = 0
        return self.lr


# ------------------------------------------------------------------ splitting


def split_dataset(records, spec: SplitSpec):
    """Grouped, stratified, seeded 85/15 split by patch count.

    All patches of one source image land on one side; per class, the train
    side gets as close to the target fraction as group granularity allows.
    """
    records = list(records)
    if not records:
        raise EmptyManifest("cannot split an empty manifest")
    groups: dict[str, list] = defaultdict(list)
    for rec in records:
        groups[rec.source_id].append(rec)
    group_label: dict[str, int] = {}
    for sid, recs in groups.items():
        labels = {r.label for r in recs}
        if len(labels) != 1:
            raise InvalidConfig(f"source {sid!r} has mixed labels {sorted(labels)}")
        group_label[sid] = recs[0].label

    rng = np.random.default_rng(spec.seed)
    by_class: dict[int, list[str]] = defaultdict(list)
    for sid in sorted(groups):
        by_class[group_label[sid]].append(sid)

    train, val = [], []
    for label in sorted(by_class):
        sids = by_class[label]
        order = rng.permutation(len(sids))
        total = sum(len(groups[sids[i]]) for i in order)
        target = spec.train_fraction * total
        acc = 0
        for pos, i in enumerate(order):
            recs = groups[sids[i]]
            take_train = acc < target and abs(acc + len(recs) - target) <= abs(acc - target)
            if acc + len(recs) <= target or take_train:
                train.extend(recs)
                acc += len(recs)
            else:
                val.extend(recs)
    return train, val


def check_class_balance(records, num_classes: int, tolerance: float) -> None:
    """Reject manifests whose class counts deviate from the mean by > tolerance."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for rec in records:
        if not 0 <= rec.label < num_classes:
            raise InvalidConfig(f"label {rec.label} out of range for {num_classes} classes")
        counts[rec.label] += 1
    mean = counts.mean()
    if mean == 0:
        raise EmptyManifest("no records")
    deviation = np.abs(counts - mean) / mean
    if deviation.max() > tolerance:
        raise ClassImbalance(
            f"class counts {counts.tolist()} deviate {deviation.max():.3f} "
            f"> {tolerance} from balance"
        )


# ------------------------------------------------------------------- batches


class _PatchCache:
    """Decoded, normalized (3, H, W) float32 patches, loaded once."""

    def __init__(self, patch_size: int, dtype=np.float32):
        self.patch_size = patch_size
        self.dtype = dtype
        self._cache: dict[str, np.ndarray] = {}

    def get(self, rec: PatchRecord) -> np.ndarray:
        arr = self._cache.get(rec.path)
        if arr is None:
            img = decode_image(rec.path)
            if img.width != self.patch_size or img.height != self.patch_size:
                raise InvalidConfig(
                    f"{rec.path}: expected {self.patch_size}px patch, "
                    f"got {img.width}x{img.height}"
                )
            arr = normalize_patch(img, dtype=self.dtype)[0]
            self._cache[rec.path] = arr
        return arr


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _assemble(records, cache: _PatchCache, idx, rotations=None) -> np.ndarray:
    arrs = []
    for j, i in enumerate(idx):
        arr = cache.get(records[i])
        if rotations is not None and rotations[j]:
            arr = np.rot90(arr, k=int(rotations[j]), axes=(1, 2)).copy()
        arrs.append(arr)
    return np.stack(arrs)


def _write_log(path: Path, entries: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


# ---------------------------------------------------------------- phase runs


def _eval_extractor(net: DenseNet, records, cache, labels, batch_size: int):
    losses = []
    correct = 0
    with no_grad():
        for idx in _batches(len(records), batch_size, None):
            x = Tensor(_assemble(records, cache, idx))
            logits = net.logits(x, training=False)
            loss = cross_entropy(logits, labels[idx], reduction="sum")
            losses.append(loss.item())
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
    return sum(losses) / len(records), correct / len(records)


def run_extractor_phase(
    spec: PhaseSpec,
    records,
    net_config: DenseNetConfig,
    opt: OptimizerConfig,
    out_dir,
    split: SplitSpec | None = None,
) -> PhaseResult:
    """Cross-entropy training of the extractor + its softmax head."""
    if net_config.num_classes != spec.num_classes:
        raise InvalidConfig(
            f"net config has {net_config.num_classes} classes, spec {spec.num_classes}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    if not records:
        raise EmptyManifest("no training records")
    if spec.phase is Phase.P3_MANIP:
        check_class_balance(records, spec.num_classes, spec.balance_tolerance)

    split = split or SplitSpec(seed=opt.seed)
    train_recs, val_recs = split_dataset(records, split)
    if not val_recs:  # tiny desk-scale runs may keep everything in train
        val_recs = train_recs

    if spec.init_from is not None:
        net = load_network(net_config, spec.init_from, seed=opt.seed, reinit_head=True)
    else:
        net = build_network(net_config, seed=opt.seed)

    cache = _PatchCache(spec.patch_size)
    train_labels = np.array([r.label for r in train_recs], dtype=np.int64)
    val_labels = np.array([r.label for r in val_recs], dtype=np.int64)

    params = net.params()
    optimizer = SgdMomentum(opt.momentum)
    schedule = PlateauSchedule(opt)
    prefix = "extractor"
    log: list[dict] = []
    log_path = out_dir / f"{prefix}_log.jsonl"
    best_val = float("inf")
    best_path = out_dir / f"{prefix}_best.ctws"
    final_path = out_dir / f"{prefix}_final.ctws"
    stop_reason = "max_epochs"

    _write_meta(out_dir, spec, opt, net_config=net_config)

    for epoch in range(opt.max_epochs):
        rng = np.random.default_rng([opt.seed, epoch])
        lr = schedule.lr
        losses = []
        correct = 0
        for idx in _batches(len(train_recs), opt.batch_size, rng):
            # random quarter-turn rotation per sample (0 / +-90 / 180)
            rotations = rng.integers(0, 4, size=len(idx))
            x = Tensor(_assemble(train_recs, cache, idx, rotations))
            logits = net.logits(x, training=True)
            loss = cross_entropy(logits, train_labels[idx], reduction="mean")
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                save_network(net, out_dir / f"{prefix}_diverged.ctws")
                _write_log(log_path, log)
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad(params)
            loss.backward()
            optimizer.step(params, lr)
            losses.append(loss_val * len(idx))
            correct += int((logits.data.argmax(axis=1) == train_labels[idx]).sum())
        train_loss = sum(losses) / len(train_recs)
        train_acc = correct / len(train_recs)
        val_loss, val_acc = _eval_extractor(net, val_recs, cache, val_labels, opt.batch_size)
        log.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_loss,
                "train_acc": train_acc,
                "val_loss": val_loss,
                "val_acc": val_acc,
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            save_network(net, best_path)
        decision = schedule.observe(val_loss)
        if decision == STOP:
            stop_reason = "lr_floor"
            break

    save_network(net, final_path)
    if not best_path.exists():
        save_network(net, best_path)
    _write_log(log_path, log)
    return PhaseResult(final_path, best_path, log_path, log, stop_reason)


def compute_fused_features(extractor: DenseNet, records):
    """Frozen-extractor fused features for 256-patch records: (N, 3, F)."""
    feats = []
    labels = []
    for rec in records:
        img = decode_image(rec.path)
        feats.append(fuse(extractor, img).matrix)
        labels.append(rec.label)
    return np.stack(feats).astype(np.float32), np.array(labels, dtype=np.int64)


def _eval_head(head: FusionHead, feats: np.ndarray, labels: np.ndarray, batch_size: int):
    losses = []
    correct = 0
    with no_grad():
        for idx in _batches(len(labels), batch_size, None):
            logits = head.forward_batch(Tensor(feats[idx]), training=False)
            losses.append(cross_entropy(logits, labels[idx], reduction="sum").item())
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
    return sum(losses) / len(labels), correct / len(labels)


def run_head_phase(
    spec: PhaseSpec,
    records,
    net_config: DenseNetConfig,
    opt: OptimizerConfig,
    out_dir,
    split: SplitSpec | None = None,
    se_reduction: int = 16,
) -> PhaseResult:
    """Train SE + classification head on frozen fused features."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    if not records:
        raise EmptyManifest("no training records")
    extractor = load_network(net_config, spec.init_from, reinit_head=True)
    split = split or SplitSpec(seed=opt.seed)
    train_recs, val_recs = split_dataset(records, split)
    if not val_recs:
        val_recs = train_recs
    train_x, train_y = compute_fused_features(extractor, train_recs)
    val_x, val_y = compute_fused_features(extractor, val_recs)
    return train_head_on_features(
        spec, (train_x, train_y), (val_x, val_y), opt, out_dir,
        feature_len=extractor.feature_len, se_reduction=se_reduction,
    )


def train_head_on_features(
    spec: PhaseSpec,
    train_data,
    val_data,
    opt: OptimizerConfig,
    out_dir,
    feature_len: int,
    se_reduction: int = 16,
) -> PhaseResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_x, train_y = train_data
    val_x, val_y = val_data
    head = FusionHead(feature_len, spec.num_classes, reduction=se_reduction, seed=opt.seed)
    params = head.params()
    optimizer = SgdMomentum(opt.momentum)
    schedule = PlateauSchedule(opt)
    log: list[dict] = []
    log_path = out_dir / "head_log.jsonl"
    best_val = float("inf")
    best_path = out_dir / "head_best.ctws"
    final_path = out_dir / "head_final.ctws"
    stop_reason = "max_epochs"

    _write_meta(out_dir, spec, opt, head_fields={"feature_len": feature_len,
                                                 "se_reduction": se_reduction})

    for epoch in range(opt.max_epochs):
        rng = np.random.default_rng([opt.seed, epoch])
        lr = schedule.lr
        losses = []
        correct = 0
        for idx in _batches(len(train_y), opt.batch_size, rng):
            x = Tensor(train_x[idx])
            logits = head.forward_batch(x, training=True, rng=rng)
            loss = cross_entropy(logits, train_y[idx], reduction="mean")
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                save_head(head, out_dir / "head_diverged.ctws")
                _write_log(log_path, log)
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad(params)
            loss.backward()
            optimizer.step(params, lr)
            losses.append(loss_val * len(idx))
            correct += int((logits.data.argmax(axis=1) == train_y[idx]).sum())
        train_loss = sum(losses) / len(train_y)
        train_acc = correct / len(train_y)
        val_loss, val_acc = _eval_head(head, val_x, val_y, opt.batch_size)
        log.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_loss,
                "train_acc": train_acc,
                "val_loss": val_loss,
                "val_acc": val_acc,
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            save_head(head, best_path)
        decision = schedule.observe(val_loss)
        if decision == STOP:
            stop_reason = "lr_floor"
            break

    save_head(head, final_path)
    if not best_path.exists():
        save_head(head, best_path)
    _write_log(log_path, log)
    return PhaseResult(final_path, best_path, log_path, log, stop_reason)


def run_phase(
    spec: PhaseSpec,
    records,
    net_config: DenseNetConfig,
    opt: OptimizerConfig,
    out_dir,
    split: SplitSpec | None = None,
    se_reduction: int = 16,
) -> PhaseResult:
    """Dispatch a training phase; returns stores plus the epoch log."""
    if spec.phase is Phase.P1_HEAD:
        return run_head_phase(spec, records, net_config, opt, out_dir, split, se_reduction)
    return run_extractor_phase(spec, records, net_config, opt, out_dir, split)


def _write_meta(out_dir: Path, spec: PhaseSpec, opt: OptimizerConfig,
                net_config: DenseNetConfig | None = None, head_fields: dict | None = None):
    meta = {
        "phase": spec.phase.value,
        "num_classes": spec.num_classes,
        "patch_size": spec.patch_size,
        "init_from": str(spec.init_from) if spec.init_from else None,
        "optimizer": asdict(opt),
    }
    if net_config is not None:
        meta["network"] = net_config.arch_fields() | {"num_classes": net_config.num_classes}
    if head_fields:
        meta["head"] = head_fields
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


# ------------------------------------------------------------- config files


def read_kv_config(path) -> dict[str, str]:
    """Plain-text key=value hyperparameter file; # starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
