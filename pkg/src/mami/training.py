"""Losses, modality-homogeneous P x K sampling, augmentation and the
training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, ImageRecord, modality_index
from .med_prior import TeacherRegistry, pair_indices
from .model import MedReID

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "loss_total", "loss_id", "loss_tri", "loss_med")


@dataclass(frozen=True)
class TrainConfig:
    lambda_med: float = 0.01
    lr: float = 3e-4
    total_steps: int = 2000
    P: int = 4
    K: int = 4
    weight_decay: float = 0.05
    # learning-rate multiplier for the adapter generator (ComPA parameters)
    adapter_lr_scale: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    slice_sample: int = 8
    crop_size: int = 224
    resize_size: int = 256
    checkpoint_every: int = 0  # 0: final checkpoint only
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda_med < 0:
            raise ValueError("lambda_med must be >= 0")
        if self.P < 2 or self.K < 2:
            raise ValueError("P and K must both be >= 2 (triplets need positives and negatives)")
        if self.adapter_lr_scale <= 0:
            raise ValueError("adapter_lr_scale must be > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.crop_size % 16 or self.crop_size > self.resize_size:
            raise ValueError("crop_size must be a multiple of 16 and <= resize_size")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def id_classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    c = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    return F.cross_entropy(logits, labels)


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    sq = (x.unsqueeze(1) - x.unsqueeze(0)).pow(2).sum(-1)
    return sq.clamp_min(1e-12).sqrt()


def triplet_loss_soft_margin(embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-hard triplet loss with a softplus margin on Euclidean distances."""
    dist = pairwise_distances(embeddings)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    neg = ~same
    if not pos.any(1).all():
        raise ValueError("every anchor needs a positive in the batch")
    if not neg.any(1).all():
        raise ValueError("every anchor needs a negative in the batch")
    d_ap = dist.masked_fill(~pos, float("-inf")).amax(1)
    d_an = dist.masked_fill(~neg, float("inf")).amin(1)
    return F.softplus(d_ap - d_an).mean()


def total_loss(id_loss, tri_loss, med_loss, lam: float):
    return id_loss + tri_loss + lam * med_loss


def lr_schedule(step: int, lr0: float, total_steps: int) -> float:
    """Cosine annealing from ``lr0`` at step 0 to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        logger.warning("lr_schedule: step %d outside [0, %d], clamping", step, total_steps)
        step = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


class PKSampler:
    """Draws P patients x K images, all from one modality.

    The modality is chosen with probability proportional to its record count
    among modalities that have at least P patients.
    """

    def __init__(self, records: Sequence[ImageRecord], P: int, K: int):
        self.P, self.K = P, K
        by_mod: dict[str, dict[str, list[ImageRecord]]] = defaultdict(lambda: defaultdict(list))
        for r in records:
            by_mod[r.modality][r.patient_id].append(r)
        self.pools = {
            m: [(pid, sorted(rs, key=lambda r: r.id)) for pid, rs in sorted(pats.items())]
            for m, pats in sorted(by_mod.items())
            if len(pats) >= P
        }
        if not self.pools:
            raise ValueError(f"no modality has {P} distinct patients")
        self.modalities = list(self.pools)
        counts = np.array([sum(len(rs) for _, rs in self.pools[m]) for m in self.modalities], dtype=float)
        self.probs = counts / counts.sum()

    def sample(self, rng: np.random.Generator) -> list[ImageRecord]:
        m = self.modalities[int(rng.choice(len(self.modalities), p=self.probs))]
        pool = self.pools[m]
        batch = []
        for pi in sorted(rng.choice(len(pool), size=self.P, replace=False)):
            recs = pool[pi][1]
            idx = rng.choice(len(recs), size=self.K, replace=len(recs) < self.K)
            batch.extend(recs[i] for i in idx)
        return batch


def sample_batch(records: Sequence[ImageRecord], P: int, K: int, rng: np.random.Generator) -> list[ImageRecord]:
    return PKSampler(records, P, K).sample(rng)


# ---------------------------------------------------------------------------
# augmentation / preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugConfig:
    crop_size: int = 224
    resize_size: int = 256
    flip_p: float = 0.5
    erase_p: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_ratio: float = 0.3
    random_crop: bool = True
    slices: int = 8


def resize_shorter(x: torch.Tensor, size: int) -> torch.Tensor:
    """Aspect-preserving resize of ``[..., 3, H, W]`` so that ``min(H, W) == size``."""
    H, W = x.shape[-2:]
    if min(H, W) == size:
        return x
    if H <= W:
        nh, nw = size, int(round(W * size / H))
    else:
        nh, nw = int(round(H * size / W)), size
    lead = x.shape[:-3]
    flat = x.reshape(-1, *x.shape[-3:])
    out = F.interpolate(flat, size=(nh, nw), mode="bilinear", align_corners=False, antialias=True)
    return out.reshape(*lead, *out.shape[-3:]).clamp(0.0, 1.0)


def center_crop_box(H: int, W: int, size: int) -> tuple[int, int]:
    return (H - size) // 2, (W - size) // 2


def eval_slice_indices(n: int, k: int = 8) -> list[int]:
    """``floor(i * n / k)`` for ``i < k``."""
    return [(i * n) // k for i in range(k)]


def preprocess_eval(pixels: np.ndarray | torch.Tensor, resize_size: int = 256, crop_size: int = 224, slices: int = 8):
    """Resize shorter side, centre crop; scans keep ``slices`` uniformly spaced slices."""
    x = torch.as_tensor(pixels, dtype=torch.float32)
    if x.dim() == 4:
        x = x[eval_slice_indices(x.shape[0], slices)]
    x = resize_shorter(x, resize_size)
    top, left = center_crop_box(*x.shape[-2:], crop_size)
    return x[..., top : top + crop_size, left : left + crop_size].contiguous()


def train_slice_indices(n: int, k: int, rng: np.random.Generator) -> list[int]:
    if n >= k:
        return sorted(rng.choice(n, size=k, replace=False).tolist())
    return sorted(rng.choice(n, size=k, replace=True).tolist())


def augment_train(pixels: np.ndarray | torch.Tensor, rng: np.random.Generator, cfg: AugConfig = AugConfig()):
    """Random slice sampling, flips, crop and erasing, all driven by ``rng``.

    Returns ``[3, c, c]`` for images and ``[slices, 3, c, c]`` for scans; one
    set of geometric parameters is shared by all slices of a scan.
    """
    x = torch.as_tensor(pixels, dtype=torch.float32)
    if x.dim() == 4:
        x = x[train_slice_indices(x.shape[0], cfg.slices, rng)]
    x = resize_shorter(x, cfg.resize_size)
    c = cfg.crop_size
    H, W = x.shape[-2:]
    if cfg.random_crop:
        top, left = int(rng.integers(H - c + 1)), int(rng.integers(W - c + 1))
    else:
        top, left = center_crop_box(H, W, c)
    x = x[..., top : top + c, left : left + c]
    if rng.random() < cfg.flip_p:
        x = x.flip(-1)
    if rng.random() < cfg.flip_p:
        x = x.flip(-2)
    x = x.clone()
    if rng.random() < cfg.erase_p:
        _random_erase(x, rng, cfg)
    return x.contiguous()


def _random_erase(x: torch.Tensor, rng: np.random.Generator, cfg: AugConfig) -> None:
    H, W = x.shape[-2:]
    area = H * W
    for _ in range(100):
        target = rng.uniform(*cfg.erase_area) * area
        ratio = math.exp(rng.uniform(math.log(cfg.erase_ratio), -math.log(cfg.erase_ratio)))
        h = int(round(math.sqrt(target * ratio)))
        w = int(round(math.sqrt(target / ratio)))
        if 0 < h < H and 0 < w < W:
            top, left = int(rng.integers(H - h + 1)), int(rng.integers(W - w + 1))
            noise = rng.random(size=(*x.shape[:-2], h, w)).astype(np.float32)
            x[..., top : top + h, left : left + w] = torch.from_numpy(noise)
            return


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decay on matrices only; adapter-generator groups carry ``lr_scale``.

    Generated weights enter the backbone as a product of two learned factors,
    so at a shared learning rate the amendment grows much faster than the base
    weights it modifies.
    """
    groups: dict[tuple[bool, bool], list[torch.nn.Parameter]] = {}
    for name, p in model.named_parameters():
        if p.requires_grad:
            groups.setdefault((name.startswith("compa."), p.dim() >= 2), []).append(p)
    return torch.optim.AdamW(
        [
            {
                "params": params,
                "weight_decay": cfg.weight_decay if decay else 0.0,
                "lr_scale": cfg.adapter_lr_scale if adapter else 1.0,
            }
            for (adapter, decay), params in sorted(groups.items())
        ],
        lr=cfg.lr,
        betas=cfg.betas,
    )


def identity_labels(records: Sequence[ImageRecord]) -> dict[str, int]:
    return {pid: i for i, pid in enumerate(sorted({r.patient_id for r in records}))}


class PixelCache:
    """Loads each record's pixels once."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, record: ImageRecord) -> np.ndarray:
        if record.id not in self._cache:
            self._cache[record.id] = self.manifest.load(record)
        return self._cache[record.id]


def train_loop(
    model: MedReID,
    manifest: DatasetManifest,
    teachers: TeacherRegistry | None,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_at: int | None = None,
) -> list[dict]:
    """Optimise ``model`` on the manifest's ``train`` split.

    Writes ``metrics.csv`` and ``checkpoints/`` under ``run_dir`` when given
    and returns the metric rows. ``stop_at`` ends the run early (the schedule
    still spans ``cfg.total_steps``), which is how interrupted runs are made
    for resume tests.
    """
    records = manifest.subset("train")
    if not records:
        raise ValueError("manifest has no train records")
    med_on = model.med_config.mode != "off"
    if med_on:
        if teachers is None:
            raise ValueError("med-align is enabled but no teachers were given")
        missing = sorted(manifest.modality_labels - set(teachers.labels()))
        if missing:
            raise ValueError(f"no teacher registered for modalities {missing}")
        if any(p.requires_grad for p in teachers.parameters()):
            raise ValueError("teacher parameters must be frozen")

    labels_of = identity_labels(records)
    mod_of = modality_index(manifest.modality_labels)
    sampler = PKSampler(records, cfg.P, cfg.K)
    pixels = PixelCache(manifest)
    aug = AugConfig(crop_size=cfg.crop_size, resize_size=cfg.resize_size, slices=cfg.slice_sample)
    optimizer = build_optimizer(model, cfg)
    rng = np.random.default_rng([cfg.seed, 606])
    start = 0

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    if resume is not None:
        blob = torch.load(resume, map_location="cpu", weights_only=False)
        model.load_state_dict(blob["model"])
        optimizer.load_state_dict(blob["optimizer"])
        rng.bit_generator.state = blob["rng_state"]
        start = blob["step"]

    rows: list[dict] = []
    metrics_fh = None
    writer = None
    if run_dir is not None:
        path = run_dir / "metrics.csv"
        fresh = resume is None or not path.exists()
        if resume is not None and path.exists():
            _truncate_metrics(path, start)
        metrics_fh = path.open("w" if fresh else "a", newline="")
        writer = csv.DictWriter(metrics_fh, fieldnames=METRIC_COLUMNS)
        if fresh:
            writer.writeheader()

    pairs = pair_indices(cfg.batch_size, cfg.K)
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    model.train()
    t0 = time.time()
    try:
        for step in range(start, end):
            lr = lr_schedule(step, cfg.lr, cfg.total_steps)
            for g in optimizer.param_groups:
                g["lr"] = lr * g.get("lr_scale", 1.0)
            batch = sampler.sample(rng)
            x = torch.stack([augment_train(pixels(r), rng, aug) for r in batch])
            y = torch.tensor([labels_of[r.patient_id] for r in batch])
            m_idx = torch.tensor([mod_of[r.modality] for r in batch])

            out = model(x, m_idx)
            loss_id = id_classification_loss(out.logits, y)
            loss_tri = triplet_loss_soft_margin(out.pooled, y)
            if med_on:
                s = out.n_slices
                flat = x.reshape(-1, *x.shape[-3:])
                mods = [r.modality for r in batch for _ in range(s)]
                ids = [r.id for r in batch for _ in range(s)]
                tmaps = teachers.feature_maps(flat, mods, ids)
                if cfg.lambda_med > 0:
                    loss_med = model.med_loss(out, tmaps, pairs)
                else:
                    with torch.no_grad():
                        loss_med = model.med_loss(out, tmaps, pairs)
            else:
                loss_med = torch.zeros(())
            loss = total_loss(loss_id, loss_tri, loss_med, cfg.lambda_med) if cfg.lambda_med > 0 else loss_id + loss_tri

            li, lt, lm = float(loss_id.detach()), float(loss_tri.detach()), float(loss_med.detach())
            row = {
                "step": step,
                "lr": lr,
                "loss_total": li + lt + cfg.lambda_med * lm,
                "loss_id": li,
                "loss_tri": lt,
                "loss_med": lm,
            }
            if not all(math.isfinite(v) for v in row.values()):
                diag = {"step": step, "batch_ids": [r.id for r in batch], **row}
                if run_dir is not None:
                    (run_dir / "diagnostic.json").write_text(json.dumps(diag, indent=2))
                raise TrainingDiverged(f"non-finite loss at step {step}: {row}", diag)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if (step + 1) % 100 == 0:
                logger.info("step %d/%d loss %.4f (%.1fs)", step + 1, cfg.total_steps, row["loss_total"], time.time() - t0)
            done = step + 1
            if run_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < end:
                save_training_checkpoint(run_dir / "checkpoints" / f"step_{done:06d}.pt", model, optimizer, rng, done, cfg)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if run_dir is not None:
        save_training_checkpoint(run_dir / "checkpoints" / "final.pt", model, optimizer, rng, end, cfg)
    model.eval()
    return rows


def _truncate_metrics(path: Path, step: int) -> None:
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        w.writerows(r for r in rows if int(r["step"]) < step)


def save_training_checkpoint(
    path: Path, model: MedReID, optimizer, rng: np.random.Generator, step: int, cfg: TrainConfig
) -> None:
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "rng_state": rng.bit_generator.state,
            "step": step,
            "model_config": model.spec(),
            "train_config": asdict(cfg),
        },
        path,
    )
