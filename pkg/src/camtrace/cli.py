"""Command-line pipeline: synth -> patches -> emd/augment -> train -> predict -> score.

Every stage reads and writes JSONL manifests next to its image files, so
stages compose through the filesystem. Exit status: 0 success, 1 usage
error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import emd2d
from .densenet import DenseNetConfig, load_network
from .errors import CamtraceError
from .fusionhead import load_head, fuse, predict_image
from .imagecore import decode_image, extract_patch, save_png
from .patchqual import QualityParams, select_top_patches
from .pipeline.manifest import ManifestRow, load_manifest, save_manifest
from .pipeline.scoring import load_report_json, save_report_json, score, write_report
from .pipeline.synthcam import default_camera_specs, generate_synthetic_dataset
from .trainer import (
    OptimizerConfig,
    Phase,
    PhaseSpec,
    SplitSpec,
    read_kv_config,
    run_phase,
)

MANIP_CLASS_INDEX = {"unaltered": 0, "jpeg": 1, "gamma": 2, "resized": 3}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        raise _UsageError(message)


def _add_global_flags(parser, suppress: bool) -> None:
    # present on the root and on every subcommand, so both orders work
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="override run seed")
    parser.add_argument("--threads", type=int, default=default, help="BLAS thread cap")
    parser.add_argument("--config", type=Path, default=default,
                        help="key=value config file")


def _build_parser() -> _Parser:
    parser = _Parser(prog="camtrace", description=__doc__)
    _add_global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_sub(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        _add_global_flags(sp, suppress=True)
        return sp

    p = add_sub("synth", "generate a synthetic-camera dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--models", type=int, default=4)
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=_cmd_synth)

    p = add_sub("patches", "select and extract top-quality patches")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--top", type=int, default=20)
    p.set_defaults(func=_cmd_patches)

    p = add_sub("emd", "first-stage EMD residues for a dataset dir")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--nmax", type=int, default=2000)
    p.set_defaults(func=_cmd_emd)

    p = add_sub("augment", "apply post-processing ops to a dataset dir")
    p.add_argument("--ops", required=True, help="comma list, e.g. jpeg90,gamma08")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--chroma", choices=("420", "444"), default="420")
    p.add_argument("--center-crop", type=int, default=None)
    p.add_argument("--keep-original", action="store_true",
                   help="also copy originals into the output manifest")
    p.set_defaults(func=_cmd_augment)

    p = add_sub("train", "run a training phase from a config file")
    p.add_argument("--phase", type=str, default=None,
                   help="p1-extractor | p1-head | p2 | p3 (overrides config)")
    p.set_defaults(func=_cmd_train)

    p = add_sub("features", "fused 3xF features for 256 patches")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_features)

    p = add_sub("predict", "per-image class probabilities")
    p.add_argument("--extractor", type=Path, required=True)
    p.add_argument("--head", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--top", type=int, default=4)
    p.add_argument("--tiled", action="store_true")
    p.set_defaults(func=_cmd_predict)

    p = add_sub("score", "weighted score of predictions vs truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=_cmd_score)

    p = add_sub("report", "CSV + text report from a score JSON")
    p.add_argument("--score", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_report)

    return parser


# ------------------------------------------------------------------ commands


def _cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    specs = default_camera_specs(args.models)
    rows = generate_synthetic_dataset(specs, args.images, args.size, args.out, seed=seed)
    spec_dump = [
        {
            "model_id": s.model_id,
            "cfa_pattern": s.cfa_pattern,
            "demosaic_kind": s.demosaic_kind,
            "noise_sigma": s.noise_sigma,
            "jpeg_q_native": s.jpeg_q_native,
            "label": i,
        }
        for i, s in enumerate(specs)
    ]
    (args.out / "models.json").write_text(json.dumps(spec_dump, indent=2) + "\n")
    print(f"wrote {len(rows)} images for {len(specs)} models under {args.out}")
    return 0


def _cmd_patches(args) -> int:
    rows = load_manifest(args.manifest)
    out_rows = []
    for row in rows:
        image = decode_image(row.path)
        scored = select_top_patches(
            image, size=args.size, k=args.top,
            source_id=row.source_id, label=row.label,
        )
        for sp in scored:
            stem = f"{row.source_id}_x{sp.ref.x0}_y{sp.ref.y0}".replace("/", "_")
            path = args.out / f"{stem}.png"
            save_png(extract_patch(image, sp.ref), path)
            out_rows.append(
                ManifestRow(
                    path=str(path),
                    source_id=row.source_id,
                    label=row.label,
                    device_id=row.device_id,
                    manipulation=row.manipulation,
                    x0=sp.ref.x0,
                    y0=sp.ref.y0,
                    size=args.size,
                    score=sp.score,
                )
            )
    save_manifest(out_rows, args.out / "manifest.jsonl")
    print(f"wrote {len(out_rows)} patches from {len(rows)} images under {args.out}")
    return 0


def _cmd_emd(args) -> int:
    rows = load_manifest(args.in_dir / "manifest.jsonl")
    limits = emd2d.SolverLimits(n_max=args.nmax)
    out_rows = []
    for row in rows:
        image = decode_image(row.path)
        residue = emd2d.emd_residue_image(image, limits)
        stem = Path(row.path).stem + "_emd"
        path = args.out / f"{stem}.png"
        save_png(residue, path)
        out_rows.append(
            ManifestRow(
                path=str(path),
                source_id=row.source_id,
                label=row.label,
                device_id=row.device_id,
                manipulation="emd",
                x0=row.x0, y0=row.y0, size=row.size,
            )
        )
    save_manifest(out_rows, args.out / "manifest.jsonl")
    print(f"wrote {len(out_rows)} EMD residues under {args.out}")
    return 0


def _cmd_augment(args) -> int:
    ops = [aug.ManipSpec.parse(tok) for tok in args.ops.split(",") if tok.strip()]
    rows = load_manifest(args.in_dir / "manifest.jsonl")
    out_rows = []
    for row in rows:
        image = decode_image(row.path)
        if args.keep_original:
            stem = Path(row.path).stem + "_orig"
            path = args.out / f"{stem}.png"
            save_png(image, path)
            out_rows.append(
                ManifestRow(
                    path=str(path), source_id=f"{row.source_id}_orig", label=row.label,
                    device_id=row.device_id, manipulation=row.manipulation,
                )
            )
        for op in ops:
            result = aug.apply_manip(image, op, chroma=args.chroma)
            if args.center_crop:
                result = aug.center_crop(result, args.center_crop)
            stem = f"{Path(row.path).stem}_{op.value}"
            path = args.out / f"{stem}.png"
            save_png(result, path)
            out_rows.append(
                ManifestRow(
                    path=str(path),
                    source_id=f"{row.source_id}_{op.value}",
                    label=row.label,
                    device_id=row.device_id,
                    manipulation=aug.MANIP_CLASS[op].value,
                )
            )
    save_manifest(out_rows, args.out / "manifest.jsonl")
    print(f"wrote {len(out_rows)} augmented images under {args.out}")
    return 0


def net_config_from_kv(kv: dict) -> DenseNetConfig:
    return DenseNetConfig(
        block_sizes=tuple(int(t) for t in kv.get("block_sizes", "6,12,48,32").split(",")),
        growth_rate=int(kv.get("growth_rate", 32)),
        compression=float(kv.get("compression", 0.5)),
        init_channels=int(kv.get("init_channels", 64)),
        input_size=int(kv.get("input_size", 256)),
        num_classes=int(kv.get("num_classes", 10)),
    )


def opt_config_from_kv(kv: dict, seed_override: int | None = None) -> OptimizerConfig:
    return OptimizerConfig(
        momentum=float(kv.get("momentum", 0.9)),
        lr_init=float(kv.get("lr_init", 1e-3)),
        lr_decay_factor=float(kv.get("lr_decay_factor", 0.1)),
        plateau_patience=int(kv.get("plateau_patience", 2)),
        lr_floor=float(kv.get("lr_floor", 1e-7)),
        batch_size=int(kv.get("batch_size", 32)),
        seed=seed_override if seed_override is not None else int(kv.get("seed", 0)),
        max_epochs=int(kv.get("max_epochs", 50)),
    )


def _records_from_manifest(rows, label_by: str):
    if label_by == "label":
        return rows
    if label_by != "manipulation":
        raise CamtraceError(f"label_by must be label|manipulation, got {label_by!r}")
    relabeled = []
    for row in rows:
        if row.manipulation not in MANIP_CLASS_INDEX:
            raise CamtraceError(
                f"{row.source_id}: manipulation {row.manipulation!r} has no class index"
            )
        relabeled.append(
            ManifestRow(
                path=row.path,
                source_id=row.source_id,
                label=MANIP_CLASS_INDEX[row.manipulation],
                device_id=row.device_id,
                manipulation=row.manipulation,
                x0=row.x0, y0=row.y0, size=row.size, score=row.score,
            )
        )
    return relabeled


def _cmd_train(args) -> int:
    if args.config is None:
        raise _UsageError("train requires --config run.cfg")
    kv = read_kv_config(args.config)
    phase_token = args.phase or kv.get("phase")
    if not phase_token:
        raise _UsageError("phase missing: pass --phase or set phase= in the config")
    phase = Phase.parse(phase_token)
    spec = PhaseSpec(
        phase=phase,
        num_classes=int(kv.get("num_classes", 10)),
        patch_size=int(kv.get("patch_size", 256)),
        init_from=Path(kv["init_from"]) if kv.get("init_from") else None,
        balance_tolerance=float(kv.get("balance_tolerance", 0.05)),
    )
    net_config = net_config_from_kv(kv)
    opt = opt_config_from_kv(kv, seed_override=args.seed)
    rows = load_manifest(Path(kv["manifest"]))
    records = _records_from_manifest(rows, kv.get("label_by", "label"))
    split = SplitSpec(
        train_fraction=float(kv.get("train_fraction", 0.85)), seed=opt.seed
    )
    out_dir = Path(kv.get("out_dir", "train_out"))
    result = run_phase(
        spec, records, net_config, opt, out_dir, split,
        se_reduction=int(kv.get("se_reduction", 16)),
    )
    last = result.log[-1] if result.log else {}
    print(
        f"phase {phase.value}: {len(result.log)} epochs, stop={result.stop_reason}, "
        f"val_acc={last.get('val_acc', float('nan')):.4f}"
    )
    print(f"final store: {result.final_store}")
    print(f"best store:  {result.best_store}")
    return 0


def _cmd_features(args) -> int:
    if args.config is None:
        raise _UsageError("features requires --config for the network shape")
    kv = read_kv_config(args.config)
    net_config = net_config_from_kv(kv)
    net = load_network(net_config, args.store, reinit_head=True)
    rows = load_manifest(args.manifest)
    feats = []
    labels = []
    ids = []
    for row in rows:
        feats.append(fuse(net, decode_image(row.path)).matrix)
        labels.append(row.label)
        ids.append(row.source_id)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        args.out,
        features=np.stack(feats).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        source_ids=np.asarray(ids),
    )
    print(f"wrote {len(feats)} fused features to {args.out}")
    return 0


def _cmd_predict(args) -> int:
    if args.config is None:
        raise _UsageError("predict requires --config for the network shape")
    kv = read_kv_config(args.config)
    net_config = net_config_from_kv(kv)
    net = load_network(net_config, args.extractor, reinit_head=True)
    head = load_head(
        args.head,
        feature_len=net.feature_len,
        num_classes=int(kv.get("num_classes", net_config.num_classes)),
        reduction=int(kv.get("se_reduction", 16)),
    )
    rows = load_manifest(args.manifest)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with args.out.open("w", encoding="utf-8") as fh:
        for row in rows:
            probs = predict_image(
                net, head, decode_image(row.path), k=args.top, tiled=args.tiled
            )
            fh.write(
                json.dumps(
                    {
                        "source_id": row.source_id,
                        "pred_label": int(np.argmax(probs)),
                        "probs": [float(p) for p in probs],
                    }
                )
                + "\n"
            )
            n += 1
    print(f"wrote {n} predictions to {args.out}")
    return 0


def _cmd_score(args) -> int:
    predictions = {}
    for line in args.pred.read_text(encoding="utf-8").splitlines():
        if line.strip():
            record = json.loads(line)
            predictions[record["source_id"]] = int(record["pred_label"])
    truth = load_manifest(args.truth, check_paths=False)
    report = score(predictions, truth, num_classes=args.classes)
    print(f"unaltered accuracy:   {report.acc_unaltered:.4f} (n={report.n_unaltered})")
    print(f"manipulated accuracy: {report.acc_manipulated:.4f} (n={report.n_manipulated})")
    print(f"weighted score:       {report.weighted_score:.4f}")
    if args.out:
        save_report_json(report, args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_report(args) -> int:
    report = load_report_json(args.score)
    csv_path, txt_path = write_report(report, args.out)
    print(f"wrote {csv_path} and {txt_path}")
    return 0


# ----------------------------------------------------------------- top level


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    limiter = None
    if args.threads is not None:
        try:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=args.threads)
        except ImportError:
            print("warning: threadpoolctl not installed; --threads ignored", file=sys.stderr)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (CamtraceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.unregister()


def main() -> None:
    try:
        sys.exit(cli())
    except KeyboardInterrupt:
        sys.exit(130)


if __name__ == "__main__":
    main()
