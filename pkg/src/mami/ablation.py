"""Variant runs and hyper-parameter sweeps on one dataset with shared seeds."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .compa import MODALITY_MODES
from .config import RunConfig
from .data import DatasetManifest
from .med_prior import MED_ALIGN_MODES, TeacherRegistry
from .model import MedReID
from .retrieval import evaluate
from .training import identity_labels, train_loop

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("variant", "R1", "R5", "steps", "wall_seconds")
SWEEP_PARAMS = {"L": "codes", "r": "rank", "G": "groups", "lambda": "lambda_med", "N": "queries"}


@dataclass(frozen=True)
class VariantSpec:
    name: str
    use_compa: bool = True
    modality_mode: str = "continuous_codebook"
    med_align: str = "selected_subtraction"
    L: int = 32
    r: int = 16
    G: int = 64
    lam: float = 0.01
    N: int = 8

    def __post_init__(self) -> None:
        if self.modality_mode not in MODALITY_MODES:
            raise ValueError(f"unknown modality_mode {self.modality_mode!r}")
        if self.med_align not in MED_ALIGN_MODES:
            raise ValueError(f"unknown med_align {self.med_align!r}")
        if self.use_compa != (self.modality_mode != "none"):
            raise ValueError(
                f"variant {self.name}: use_compa={self.use_compa} contradicts modality_mode={self.modality_mode!r}"
            )
        if self.lam < 0:
            raise ValueError(f"variant {self.name}: lambda must be >= 0")

    def apply(self, base: RunConfig) -> RunConfig:
        return base.replace(
            compa={"mode": self.modality_mode, "codes": self.L, "rank": self.r, "groups": self.G},
            med={"mode": self.med_align, "queries": self.N},
            train={"lambda_med": 0.0 if self.med_align == "off" else self.lam},
        )


# Rows of the framework, ComPA and medical-prior ablations.
VARIANTS = {
    "M_base": VariantSpec("M_base", use_compa=False, modality_mode="none", med_align="off"),
    "M_compa": VariantSpec("M_compa", med_align="off"),
    "M_ours": VariantSpec("M_ours"),
    "M_mod_no": VariantSpec("M_mod_no", use_compa=False, modality_mode="none"),
    "M_mod1": VariantSpec("M_mod1", modality_mode="discrete"),
    "M_mod2": VariantSpec("M_mod2", modality_mode="continuous_no_codebook"),
    "M_med_no": VariantSpec("M_med_no", med_align="off"),
    "M_med1": VariantSpec("M_med1", med_align="global"),
    "M_med2": VariantSpec("M_med2", med_align="local"),
    "M_med3": VariantSpec("M_med3", med_align="selected"),
    "M_med4": VariantSpec("M_med4", med_align="selected_mlp_relation"),
}


def build_model(cfg: RunConfig, num_classes: int, teacher_dim: int | None = None) -> MedReID:
    torch.manual_seed(cfg.train.seed)
    return MedReID(cfg.backbone, cfg.compa, cfg.med, num_classes, teacher_dim, proj_seed=cfg.train.seed)


def run_variant(
    spec: VariantSpec,
    manifest: DatasetManifest,
    seed: int,
    base: RunConfig = RunConfig(),
    teachers: TeacherRegistry | None = None,
    run_dir: str | Path | None = None,
) -> dict:
    """Train one variant and report CMC on the manifest's query/gallery split.

    The backbone is built first from ``seed`` and the data stream is seeded
    the same way, so variants differ only by their flags.
    """
    cfg = spec.apply(base).replace(train={"seed": seed})
    if teachers is None and cfg.med.mode != "off":
        teachers = TeacherRegistry.synthetic(manifest.modality_labels, cfg.data.teacher_seed, cfg.backbone)
    num_classes = len(identity_labels(manifest.subset("train")))
    teacher_dim = next(iter(teachers.teachers.values())).out_dim if teachers and teachers.teachers else None
    model = build_model(cfg, num_classes, teacher_dim)
    t0 = time.time()
    train_loop(model, manifest, teachers, cfg.train, run_dir=run_dir)
    wall = time.time() - t0
    report = evaluate(model, manifest, cfg.train.resize_size, cfg.train.crop_size, split_seed=cfg.data.split_seed)
    report.update(variant=spec.name, seed=seed, steps=cfg.train.total_steps, wall_seconds=round(wall, 2))
    logger.info("%s seed=%d R1=%.2f (%.0fs)", spec.name, seed, report["R1"], wall)
    return report


def sweep(
    param: str,
    values: Sequence,
    base_spec: VariantSpec,
    manifest: DatasetManifest,
    seed: int,
    base: RunConfig = RunConfig(),
    out_csv: str | Path | None = None,
) -> list[dict]:
    """One ``run_variant`` per value of ``param`` (``L``, ``r``, ``G``, ``lambda`` or ``N``)."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    if not values:
        raise ValueError("sweep needs at least one value")
    field = {"L": "L", "r": "r", "G": "G", "lambda": "lam", "N": "N"}[param]
    reports = []
    for v in values:
        spec = dataclasses.replace(base_spec, name=f"{base_spec.name}[{param}={v}]", **{field: v})
        reports.append(run_variant(spec, manifest, seed, base))
    if out_csv is not None:
        write_results(reports, out_csv)
    return reports


def write_results(reports: Iterable[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in reports:
            w.writerow(r)
