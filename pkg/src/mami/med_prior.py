"""Transfer of priors from frozen teacher encoders.

Modality-derived query tokens attend over a feature map and pool ``N`` key
features per image. Differences of key features across an image pair are
aligned between the student and a frozen teacher with an InfoNCE-style loss
whose negatives are every other teacher difference in the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneConfig, l2_normalize

MED_ALIGN_MODES = ("off", "global", "local", "selected", "selected_mlp_relation", "selected_subtraction")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class MedConfig:
    mode: str = "selected_subtraction"
    queries: int = 8  # N
    tau: float = 0.07

    def __post_init__(self) -> None:
        if self.mode not in MED_ALIGN_MODES:
            raise ValueError(f"unknown med_align mode {self.mode!r}; expected one of {MED_ALIGN_MODES}")
        if self.queries < 1:
            raise ValueError("queries must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


class QueryTokenNet(nn.Module):
    """Three-layer MLP mapping a modality feature to ``N`` query tokens."""

    def __init__(self, d_m: int, n_queries: int, dim: int):
        super().__init__()
        self.n, self.dim = n_queries, dim
        self.mlp = nn.Sequential(
            nn.Linear(d_m, d_m), nn.GELU(), nn.Linear(d_m, d_m), nn.GELU(), nn.Linear(d_m, n_queries * dim)
        )

    def forward(self, M: torch.Tensor) -> torch.Tensor:
        return self.mlp(M).reshape(*M.shape[:-1], self.n, self.dim)


def attention_map(tokens: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Softmax over positions of ``tokens @ keys.T / sqrt(d)``.

    Args:
        tokens: ``[..., N, d]`` query tokens.
        keys: ``[..., h*w, d]`` positionwise-projected feature map.

    Returns:
        ``[..., N, h*w]``; each row sums to one.
    """
    d = tokens.shape[-1]
    return (tokens @ keys.transpose(-2, -1) / math.sqrt(d)).softmax(-1)


def select_key_feature(attn: torch.Tensor, fmap: torch.Tensor) -> torch.Tensor:
    """Attentive pooling: ``attn [..., N, h*w]`` times ``fmap [..., h*w, d]``."""
    return attn @ fmap


@dataclass
class KeyFeatureSet:
    values: torch.Tensor  # [..., N, d]
    source: str  # student | teacher


def feature_difference(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Rowwise ``a - b`` normalised to unit length; zero rows stay zero."""
    return l2_normalize(a - b, NORM_EPS)


def difference(pa: KeyFeatureSet, pb: KeyFeatureSet) -> torch.Tensor:
    if pa.source != pb.source:
        raise ValueError(f"cannot subtract {pa.source} key features from {pb.source} key features")
    if pa.values.shape != pb.values.shape:
        raise ValueError(f"key feature shapes differ: {tuple(pa.values.shape)} vs {tuple(pb.values.shape)}")
    return feature_difference(pa.values, pb.values)


def med_align_loss(U: torch.Tensor, V: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Contrastive alignment of student rows ``U`` with teacher rows ``V``.

    ``U`` and ``V`` are ``[pairs, N, d]`` (already normalised). The positive
    for ``U[p, n]`` is ``V[p, n]``; its negatives are all other rows of ``V``
    (the other ``N-1`` rows of the same pair and every row of other pairs).
    The loss is the mean over pairs and ``n`` of ``-log S``.
    """
    if V.numel() == 0 or U.numel() == 0:
        raise ValueError("med_align_loss needs at least one teacher difference")
    if U.shape != V.shape:
        raise ValueError(f"U and V must be index-aligned, got {tuple(U.shape)} and {tuple(V.shape)}")
    u = U.reshape(-1, U.shape[-1])
    v = V.reshape(-1, V.shape[-1])
    logits = u @ v.T / tau
    # -log S = logsumexp(row) - positive logit
    return (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()


def pair_indices(batch: int, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Pair image ``b`` with image ``(b + k) % batch``.

    Under a P x K batch layout this pairs every image with one of the next
    patient, so each pair spans two identities.
    """
    i = torch.arange(batch)
    return i, (i + k) % batch


# ---------------------------------------------------------------------------
# teachers
# ---------------------------------------------------------------------------


def frozen(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


class SyntheticTeacher(nn.Module):
    """Randomly initialised, frozen backbone used as a stand-in encoder."""

    def __init__(self, seed: int, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.encoder = Backbone(config)
        torch.random.set_rng_state(gen_state)
        self.out_dim = config.dim
        frozen(self)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, images: torch.Tensor, record_ids: Sequence[str] | None = None) -> torch.Tensor:
        return self.encoder(images)


class FeatureFileTeacher(nn.Module):
    """Precomputed teacher feature maps ``[d_t, h, w]`` keyed by record id.

    Loads an NPZ archive (one named array per record id). Useful to plug in
    a real foundation model's outputs computed offline.
    """

    def __init__(self, path: str | Path):
        super().__init__()
        with np.load(path) as npz:
            self.maps = {k: torch.from_numpy(npz[k]).float() for k in npz.files}
        if not self.maps:
            raise ValueError(f"no feature maps in {path}")
        self.out_dim = next(iter(self.maps.values())).shape[0]

    def forward(self, images: torch.Tensor, record_ids: Sequence[str] | None = None) -> torch.Tensor:
        if record_ids is None:
            raise ValueError("file-backed teachers need record ids")
        missing = [r for r in record_ids if r not in self.maps]
        if missing:
            raise KeyError(f"no precomputed teacher features for {missing[:3]}")
        return torch.stack([self.maps[r] for r in record_ids]).to(images.dtype)


class TeacherRegistry:
    """Frozen teacher encoders keyed by dataset modality label."""

    def __init__(self, teachers: Mapping[str, nn.Module] | None = None):
        self.teachers: dict[str, nn.Module] = {}
        for label, t in (teachers or {}).items():
            self.register(label, t)

    def register(self, label: str, teacher: nn.Module) -> None:
        self.teachers[label] = frozen(teacher)

    def __contains__(self, label: str) -> bool:
        return label in self.teachers

    def labels(self) -> list[str]:
        return sorted(self.teachers)

    def get(self, label: str) -> nn.Module:
        if label not in self.teachers:
            raise KeyError(f"no teacher registered for modality {label!r}; registered: {self.labels()}")
        return self.teachers[label]

    def parameters(self):
        for t in self.teachers.values():
            yield from t.parameters()

    @torch.no_grad()
    def feature_maps(
        self, images: torch.Tensor, labels: Sequence[str], record_ids: Sequence[str] | None = None
    ) -> list[torch.Tensor]:
        """Teacher maps per image, grouped by modality; returns a list aligned with ``images``."""
        out: list[torch.Tensor | None] = [None] * len(labels)
        for label in sorted(set(labels)):
            idx = [i for i, lab in enumerate(labels) if lab == label]
            ids = None if record_ids is None else [record_ids[i] for i in idx]
            maps = self.get(label)(images[idx], ids)
            for j, i in enumerate(idx):
                out[i] = maps[j]
        return out  # type: ignore[return-value]

    @classmethod
    def synthetic(cls, labels: Sequence[str], seed: int = 1000, config: BackboneConfig = BackboneConfig()):
        return cls({lab: SyntheticTeacher(seed + i, config) for i, lab in enumerate(sorted(labels))})

    @classmethod
    def from_directory(cls, path: str | Path) -> "TeacherRegistry":
        """``<label>.npz`` files become file-backed teachers; ``<label>.pt``
        files hold ``{"config": ..., "state": ...}`` frozen backbones."""
        path = Path(path)
        reg = cls()
        for f in sorted(path.iterdir()):
            if f.suffix == ".npz":
                reg.register(f.stem, FeatureFileTeacher(f))
            elif f.suffix == ".pt":
                blob = torch.load(f, map_location="cpu", weights_only=False)
                t = SyntheticTeacher(0, BackboneConfig(**blob["config"]))
                t.encoder.load_state_dict(blob["state"])
                reg.register(f.stem, t)
        return reg


class TeacherAdapter(nn.Module):
    """Frozen seeded projection ``d_t -> d`` plus bilinear resampling to the student grid."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("proj", torch.randn(out_dim, in_dim, generator=g) / math.sqrt(in_dim))

    def forward(self, tmap: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        x = torch.einsum("oi,bihw->bohw", self.proj.to(tmap.dtype), tmap)
        if tuple(x.shape[-2:]) != tuple(size):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return x


# ---------------------------------------------------------------------------
# loss head
# ---------------------------------------------------------------------------


class MedAlignHead(nn.Module):
    """Key-feature selection on both sides plus the configured alignment loss."""

    def __init__(self, dim: int, teacher_dim: int, config: MedConfig = MedConfig(), proj_seed: int = 0):
        super().__init__()
        self.config = config
        self.student_key = nn.Linear(dim, dim)
        self.teacher_key = nn.Linear(dim, dim)
        self.teacher_adapter = TeacherAdapter(teacher_dim, dim, proj_seed)
        if config.mode == "selected_mlp_relation":
            self.student_rel = _mlp3(2 * dim, dim)
            self.teacher_rel = _mlp3(2 * dim, dim)

    def key_features(self, tokens: torch.Tensor, fmap: torch.Tensor, teacher: bool = False):
        """``tokens [B,N,d]``, ``fmap [B,d,h,w]`` -> (key features ``[B,N,d]``, attention ``[B,N,h*w]``)."""
        flat = fmap.flatten(2).transpose(1, 2)
        keys = (self.teacher_key if teacher else self.student_key)(flat)
        attn = attention_map(tokens, keys)
        return select_key_feature(attn, flat), attn

    def project_teacher(self, tmaps: Sequence[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
        return torch.cat([self.teacher_adapter(t.unsqueeze(0), size) for t in tmaps])

    def forward(
        self,
        fmap: torch.Tensor,
        tmap: torch.Tensor,
        tokens: torch.Tensor,
        pairs: tuple[torch.Tensor, torch.Tensor],
        n_slices: int = 1,
    ) -> torch.Tensor:
        """Alignment loss for a batch.

        ``fmap``/``tmap`` are ``[B*S, d, h, w]`` (teacher already projected),
        ``tokens`` ``[B*S, N, d]``; slice-level key features are averaged per scan.
        """
        mode = self.config.mode
        tau = self.config.tau

        def per_scan(x):
            return x.reshape(-1, n_slices, *x.shape[1:]).mean(1)

        if mode == "global":
            u = l2_normalize(per_scan(fmap.flatten(2).mean(-1)))
            v = l2_normalize(per_scan(tmap.flatten(2).mean(-1)))
            return med_align_loss(u.unsqueeze(1), v.unsqueeze(1), tau)
        if mode == "local":
            u = l2_normalize(per_scan(fmap.flatten(2).transpose(1, 2)))
            v = l2_normalize(per_scan(tmap.flatten(2).transpose(1, 2)))
            return med_align_loss(u, v, tau)

        P = per_scan(self.key_features(tokens, fmap)[0])
        Q = per_scan(self.key_features(tokens, tmap, teacher=True)[0])
        if mode == "selected":
            return med_align_loss(l2_normalize(P), l2_normalize(Q), tau)
        i, j = pairs
        if mode == "selected_mlp_relation":
            U = l2_normalize(self.student_rel(torch.cat([P[i], P[j]], -1)))
            V = l2_normalize(self.teacher_rel(torch.cat([Q[i], Q[j]], -1)))
            return med_align_loss(U, V, tau)
        U = difference(KeyFeatureSet(P[i], "student"), KeyFeatureSet(P[j], "student"))
        V = difference(KeyFeatureSet(Q[i], "teacher"), KeyFeatureSet(Q[j], "teacher"))
        return med_align_loss(U, V, tau)


def _mlp3(d_in: int, d: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d), nn.GELU(), nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
