"""``mami`` command line: synth | train | embed | evaluate | retrieve | ablate.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import ablation
from .config import ConfigError, RunConfig
from .data import (
    ManifestError,
    SynthConfig,
    generate_synthetic,
    load_manifest,
    read_png,
    save_dataset,
    split_query_gallery,
    split_train_eval,
)
from .med_prior import TeacherRegistry
from .model import load_model
from .retrieval import EmbeddingRecord, embed_manifest, evaluate, rank, save_embeddings
from .training import TrainingDiverged, identity_labels, preprocess_eval, train_loop

logger = logging.getLogger("mami")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def run_root() -> Path:
    return Path(os.environ.get("MAMI_RUN_DIR", "runs"))


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.per_patient < 2:
        raise UsageError("--per-patient must be >= 2 (each patient needs a query and a gallery image)")
    cfg = SynthConfig(
        n_patients=args.patients,
        images_per_patient=args.per_patient,
        n_modalities=args.modalities,
        image_size=args.size,
        seed=args.seed,
        scan_modalities=args.scan_modalities,
        n_slices=args.slices,
        cross_modal=args.cross_modal,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    n_eval = args.eval_patients if args.eval_patients is not None else max(1, args.patients // 4)
    if not 0 < n_eval <= args.patients:
        raise UsageError("--eval-patients must lie in [1, --patients]")
    out = Path(args.out) if args.out else run_root() / "data"
    _prepare_out(out, args.force)
    manifest = generate_synthetic(cfg)
    if n_eval < args.patients:
        split_train_eval(manifest, n_eval, args.seed)
    split_query_gallery(manifest, args.seed)
    path = save_dataset(manifest, out)
    counts = {s: len(manifest.subset(s)) for s in ("train", "query", "gallery")}
    print(json.dumps({"manifest": str(path), "records": len(manifest), "patients": len(manifest.patients),
                      "modalities": sorted(manifest.modality_labels), **counts}))
    return EXIT_OK


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    train, data = {}, {}
    if args.steps is not None:
        train["total_steps"] = args.steps
    if args.seed is not None:
        train["seed"] = args.seed
    if args.lam is not None:
        train["lambda_med"] = args.lam
    if args.manifest is not None:
        data["manifest"] = args.manifest
    return cfg.replace(train=train, data=data)


def _teachers(cfg: RunConfig, labels) -> TeacherRegistry | None:
    if cfg.med.mode == "off":
        return None
    if cfg.data.teachers:
        return TeacherRegistry.from_directory(cfg.data.teachers)
    return TeacherRegistry.synthetic(labels, cfg.data.teacher_seed, cfg.backbone)


def cmd_train(args) -> int:
    if args.print_defaults:
        print(yaml.safe_dump(RunConfig().to_dict(), sort_keys=False), end="")
        return EXIT_OK
    cfg = _load_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else run_root() / "train"
    if args.resume is None:
        _prepare_out(run_dir, args.force)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.resolved.yaml")
    manifest = load_manifest(cfg.data.manifest)
    teachers = _teachers(cfg, manifest.modality_labels)
    teacher_dim = next(iter(teachers.teachers.values())).out_dim if teachers else None
    model = ablation.build_model(cfg, len(identity_labels(manifest.subset("train"))), teacher_dim)
    try:
        train_loop(model, manifest, teachers, cfg.train, run_dir=run_dir, resume=args.resume, stop_at=args.stop_at)
    except TrainingDiverged as exc:
        logger.error("%s (diagnostics in %s)", exc, run_dir / "diagnostic.json")
        return EXIT_RUNTIME
    if manifest.subset("query"):
        report = evaluate(model, manifest, cfg.train.resize_size, cfg.train.crop_size,
                          dataset=str(cfg.data.manifest), split_seed=cfg.data.split_seed)
        (run_dir / "report.json").write_text(json.dumps(report, indent=2))
    print(str(run_dir / "checkpoints" / "final.pt"))
    return EXIT_OK


def _sizes(train_cfg: dict) -> tuple[int, int]:
    return train_cfg.get("resize_size", 256), train_cfg.get("crop_size", 224)


def cmd_embed(args) -> int:
    model, tcfg = load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    resize, crop = _sizes(tcfg)
    records = embed_manifest(model, manifest, args.split, resize, crop)
    save_embeddings(records, args.out)
    print(json.dumps({"embedded": len(records), "out": str(Path(args.out).with_suffix(".npz"))}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, tcfg = load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    resize, crop = _sizes(tcfg)
    report = evaluate(model, manifest, resize, crop, dataset=str(args.manifest), split_seed=args.split_seed)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    model, tcfg = load_model(args.checkpoint)
    resize, crop = _sizes(tcfg)
    gallery_dir = Path(args.gallery)
    files = sorted(gallery_dir.glob("*.png"))
    if not files:
        raise UsageError(f"no PNG images in {gallery_dir}")
    m_idx = torch.tensor([args.modality_index])

    def embed(path: Path) -> np.ndarray:
        x = preprocess_eval(read_png(path), resize, crop).unsqueeze(0)
        return model.embed(x, m_idx)[0].numpy()

    query = EmbeddingRecord("__query__", "?", "", embed(Path(args.query)))
    gallery = [EmbeddingRecord(f.stem, f.stem, "", embed(f)) for f in files]
    k = args.k
    if k > len(gallery):
        logger.warning("k=%d exceeds gallery size %d; returning the full gallery", k, len(gallery))
        k = len(gallery)
    for rid, score in rank(query, gallery).top(k):
        print(json.dumps({"id": rid, "score": round(score, 6)}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    if args.steps is not None:
        base = base.replace(train={"total_steps": args.steps})
    manifest = load_manifest(args.manifest)
    out = Path(args.out) if args.out else run_root() / "ablation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        param, _, raw = args.sweep.partition("=")
        cast = float if param == "lambda" else int
        values = [cast(v) for v in raw.split(",") if v]
        spec = ablation.VARIANTS[args.variants[0] if args.variants else "M_ours"]
        reports = ablation.sweep(param, values, spec, manifest, args.seeds[0], base, out)
    else:
        unknown = [v for v in args.variants if v not in ablation.VARIANTS]
        if unknown:
            raise UsageError(f"unknown variant(s) {unknown}; known: {sorted(ablation.VARIANTS)}")
        reports = [
            ablation.run_variant(ablation.VARIANTS[v], manifest, s, base)
            for v in args.variants
            for s in args.seeds
        ]
        ablation.write_results(reports, out)
    for r in reports:
        print(json.dumps({k: r[k] for k in ablation.RESULT_COLUMNS}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mami", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic multi-modality dataset")
    s.add_argument("--patients", type=int, default=80)
    s.add_argument("--per-patient", type=int, default=4)
    s.add_argument("--modalities", type=int, default=2)
    s.add_argument("--size", type=int, default=256, help="image side in pixels (multiple of 16)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eval-patients", type=int, default=None,
                   help="patients held out for query/gallery (default: a quarter, at least one)")
    s.add_argument("--scan-modalities", type=int, default=0)
    s.add_argument("--slices", type=int, default=17)
    s.add_argument("--cross-modal", action="store_true")
    s.add_argument("--out", default=None)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a YAML run config")
    t.add_argument("config", nargs="?", default=None)
    t.add_argument("--manifest", default=None)
    t.add_argument("--run-dir", default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--lambda", dest="lam", type=float, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, default=None, help="stop after this many steps")
    t.add_argument("--force", action="store_true")
    t.add_argument("--print-defaults", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="write embeddings for a manifest split")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--split", default=None)
    e.add_argument("--out", default="embeddings")
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("evaluate", help="CMC report on the query/gallery split")
    v.add_argument("checkpoint")
    v.add_argument("manifest")
    v.add_argument("--out", default=None)
    v.add_argument("--split-seed", type=int, default=None)
    v.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("retrieve", help="rank a PNG gallery directory against a query image")
    r.add_argument("checkpoint")
    r.add_argument("query")
    r.add_argument("gallery")
    r.add_argument("-k", type=int, default=5)
    r.add_argument("--modality-index", type=int, default=0, help="dataset modality index (discrete mode only)")
    r.set_defaults(func=cmd_retrieve)

    a = sub.add_parser("ablate", help="train and evaluate named variants or a sweep")
    a.add_argument("manifest")
    a.add_argument("--config", default=None)
    a.add_argument("--variants", nargs="+", default=["M_base", "M_ours"])
    a.add_argument("--seeds", nargs="+", type=int, default=[0])
    a.add_argument("--sweep", default=None, help="e.g. r=8,16,32 or lambda=0.1,0.01,0.001")
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mami: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        print(f"mami: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
