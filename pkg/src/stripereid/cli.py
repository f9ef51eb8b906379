"""Command-line surface: synth, train, fuse, eval, gradcheck, sweep."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import load_manifest, load_synth_spec, generate_synthetic, write_feature_map, read_feature_map
from .errors import (
    EngineError,
    InsufficientCrossCameraIdentities,
    InvalidSpec,
    MissingFile,
    MissingGroundTruth,
    ParseError,
    PartCountMismatch,
    ValidationError,
)
from .evaluate import AGGREGATIONS, evaluate_dataset, fuse_features, assemble_parts, tracklet_feature, write_report
from .gradcheck import run_gradcheck
from .trainer import FeatureStore, LocalModel, load_checkpoint, load_train_config, train

_VALIDATION_ERRORS = (
    ValidationError,
    ParseError,
    MissingFile,
    InvalidSpec,
    MissingGroundTruth,
    InsufficientCrossCameraIdentities,
    PartCountMismatch,
)


def _manifest_path(data_arg: str) -> Path:
    p = Path(data_arg)
    return p / "manifest.json" if p.is_dir() else p


def compute_image_features(manifest, local_model=None, global_model=None):
    """Per-image feature vectors for a whole dataset.

    With both models the per-image vectors are the fused local+global
    features; with one model they are that network's assembled part features.
    Returns ``(vectors_by_image_id, kind, dim)``.
    """
    if local_model is None and global_model is None:
        raise ValidationError("need at least one checkpoint to compute features")
    if local_model is not None and global_model is not None and local_model.k != global_model.k:
        raise PartCountMismatch(f"local k={local_model.k} != global k={global_model.k}")
    store = FeatureStore(manifest.feature_dims)
    vectors: dict[str, np.ndarray] = {}
    for t in manifest.tracklets:
        fmaps = store.batch(t.frames)
        local = local_model.forward(fmaps, train=False) if local_model is not None else None
        glob = global_model.forward(fmaps, train=False) if global_model is not None else None
        for i, fr in enumerate(t.frames):
            if local is not None and glob is not None:
                vec = fuse_features(local[i], glob[i])
            elif local is not None:
                vec = assemble_parts(local[i])
            else:
                vec = assemble_parts(glob[i])
            vectors[fr.image_id] = vec.astype(np.float32)
    kind = "fused" if local_model is not None and global_model is not None else (
        "local" if local_model is not None else "global"
    )
    dim = len(next(iter(vectors.values())))
    return vectors, kind, dim


def write_feature_dir(out_dir, manifest, vectors: dict[str, np.ndarray], kind: str, dim: int) -> None:
    out = Path(out_dir)
    vec_dir = out / "vecs"
    vec_dir.mkdir(parents=True, exist_ok=True)
    images = []
    n = 0
    for t in manifest.tracklets:
        for fr in t.frames:
            fname = f"vecs/{n:06d}.upmf"
            write_feature_map(vectors[fr.image_id].reshape(1, 1, -1), out / fname)
            images.append(
                {
                    "image_id": fr.image_id,
                    "camera": t.camera,
                    "tracklet": t.tracklet_id,
                    "file": fname,
                }
            )
            n += 1
    doc = {"version": 1, "kind": kind, "dim": dim, "images": images}
    (out / "features.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_feature_dir(feat_dir) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(feat_dir)
    index_path = root / "features.json"
    if not index_path.is_file():
        raise MissingFile(str(index_path))
    try:
        doc = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{index_path}: {exc}") from exc
    dim = int(doc["dim"])
    vectors = {}
    for entry in doc["images"]:
        vectors[entry["image_id"]] = read_feature_map(root / entry["file"], (1, 1, dim)).reshape(-1)
    return vectors, doc


def aggregate_tracklets(manifest, vectors: dict[str, np.ndarray], aggregation: str):
    feats = {}
    for t in manifest.tracklets:
        missing = [fr.image_id for fr in t.frames if fr.image_id not in vectors]
        if missing:
            raise ValidationError(f"feature directory lacks vectors for {missing[:3]}...")
        frames = np.stack([vectors[fr.image_id] for fr in t.frames])
        feats[(t.camera, t.tracklet_id)] = tracklet_feature(frames, aggregation)
    return feats


def _cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    manifest = generate_synthetic(spec, args.out)
    n_images = sum(len(t.frames) for t in manifest.tracklets)
    print(f"generated {len(manifest.tracklets)} tracklets / {n_images} images in {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    manifest = load_manifest(_manifest_path(args.data))
    result = train(manifest.training_view(), cfg, args.out, resume=args.resume)
    print(f"checkpoint written to {result.path}")
    return 0


def _load_model(ckpt_path, expected_kind: str):
    loaded = load_checkpoint(ckpt_path)
    if loaded.model.kind != expected_kind:
        raise ValidationError(
            f"{ckpt_path}: expected a {expected_kind}-aware checkpoint, got {loaded.model.kind}"
        )
    return loaded.model


def _cmd_fuse(args) -> int:
    if args.local is None and args.global_ is None:
        raise ValidationError("fuse needs --local and/or --global checkpoints")
    manifest = load_manifest(_manifest_path(args.data))
    local_model = _load_model(args.local, "local") if args.local else None
    global_model = _load_model(args.global_, "global") if args.global_ else None
    vectors, kind, dim = compute_image_features(manifest, local_model, global_model)
    write_feature_dir(args.out, manifest, vectors, kind, dim)
    print(f"wrote {len(vectors)} {kind} feature vectors (dim {dim}) to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(_manifest_path(args.data))
    vectors, doc = read_feature_dir(args.features)
    feats = aggregate_tracklets(manifest, vectors, args.aggregation)
    report = evaluate_dataset(
        manifest,
        feats,
        trials=args.trials,
        base_seed=args.trial_seed,
        config={
            "aggregation": args.aggregation,
            "features_kind": doc.get("kind"),
            "feature_dim": doc.get("dim"),
            "trials": args.trials,
            "trial_seed": args.trial_seed,
        },
    )
    write_report(report, args.report, args.csv)
    print(
        f"rank1={report.rank1:.4f} rank5={report.rank5:.4f} "
        f"rank20={report.rank20:.4f} mAP={report.mean_ap:.4f}"
    )
    return 0


def _cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed, n_configs=args.configs)
    for i, cfg in enumerate(report.configs):
        print(
            f"config {i}: c={cfg['c']} cp={cfg['cp']} k={cfg['k']} "
            f"batch={cfg['batch']} max_rel_err={cfg['max_rel_err']:.3e}"
        )
    if report.passed:
        print(f"max_rel_err={report.max_rel_err:.3e} < 1e-4")
        return 0
    print(f"max_rel_err={report.max_rel_err:.3e} >= 1e-4")
    return 2


def _cmd_sweep(args) -> int:
    try:
        scales = [int(x) for x in args.k.split(",") if x]
    except ValueError as exc:
        raise ValidationError(f"bad --k list {args.k!r}") from exc
    if not scales:
        raise ValidationError("--k must list at least one partition scale")
    cfg = load_train_config(args.config)
    manifest = load_manifest(_manifest_path(args.data))
    out = Path(args.out)
    rows = []
    for k in scales:
        run_cfg = replace(cfg, k=k, aware="global")
        run_cfg.validate()
        ckpt = out / f"k{k}" / "ckpt"
        result = train(manifest.training_view(), run_cfg, ckpt)
        global_model = load_checkpoint(result.path).model
        local_model = LocalModel(k, manifest.feature_dims[2], run_cfg.pooling)
        vectors, kind, dim = compute_image_features(manifest, local_model, global_model)
        feats = aggregate_tracklets(manifest, vectors, args.aggregation)
        report = evaluate_dataset(
            manifest, feats, trials=args.trials, base_seed=args.trial_seed,
            config={"k": k, "aggregation": args.aggregation},
        )
        write_report(report, out / f"k{k}" / "report.json")
        rows.append(
            {"k": k, "rank1": report.rank1, "rank5": report.rank5,
             "rank20": report.rank20, "mAP": report.mean_ap}
        )
    (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(f"{'k':>3} {'rank1':>8} {'rank5':>8} {'rank20':>8} {'mAP':>8}")
    for row in rows:
        print(
            f"{row['k']:>3} {row['rank1']:>8.4f} {row['rank5']:>8.4f} "
            f"{row['rank20']:>8.4f} {row['mAP']:>8.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stripereid",
        description="Part-based unsupervised re-identification engine on feature maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="synthesis spec JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train one aware network")
    p.add_argument("--config", required=True, help="train config JSON")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("fuse", help="compute per-image (fused) features")
    p.add_argument("--local", default=None, help="local-aware checkpoint directory")
    p.add_argument("--global", dest="global_", default=None, help="global-aware checkpoint directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="feature directory to write")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("eval", help="rank the gallery and report CMC/mAP")
    p.add_argument("--features", required=True, help="feature directory from fuse")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--csv", default=None, help="CMC curve CSV path (default: report with .csv)")
    p.add_argument("--aggregation", choices=AGGREGATIONS, default="max")
    p.add_argument("--trials", type=int, default=0, help="0 = single full split-free evaluation")
    p.add_argument("--trial-seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--configs", type=int, default=25)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("sweep", help="train+eval across partition scales")
    p.add_argument("--k", required=True, help="comma-separated partition scales, e.g. 1,2,4,8")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--aggregation", choices=AGGREGATIONS, default="max")
    p.add_argument("--trials", type=int, default=0)
    p.add_argument("--trial-seed", type=int, default=0)
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
