"""The re-identification model: modality-adapted backbone, ID classifier
and the medical-prior alignment head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig, l2_normalize, pool_global
from .compa import AdapterBundle, ComPA, CompaConfig
from .med_prior import MedAlignHead, MedConfig, QueryTokenNet


@dataclass
class ModelOutput:
    fmap: torch.Tensor  # [B*S, d, h, w]
    pooled: torch.Tensor  # [B, d], slice-averaged, unnormalised
    logits: torch.Tensor  # [B, C]
    M: torch.Tensor  # [B*S, d_m]
    w: torch.Tensor | None  # [B*S, L]
    adapters: AdapterBundle | None
    n_slices: int


class MedReID(nn.Module):
    def __init__(
        self,
        backbone: BackboneConfig = BackboneConfig(),
        compa: CompaConfig = CompaConfig(),
        med: MedConfig = MedConfig(),
        num_classes: int = 1,
        teacher_dim: int | None = None,
        proj_seed: int = 0,
    ):
        super().__init__()
        self.backbone_config, self.compa_config, self.med_config = backbone, compa, med
        self.backbone = Backbone(backbone)
        d = backbone.dim
        if compa.mode == "none":
            self.compa = None
            # modality-agnostic: one learned modality vector feeds the query tokens
            self.static_M = nn.Parameter(torch.randn(d) * 0.02)
        else:
            self.compa = ComPA(self.backbone.target_shapes(), d, compa)
        self.classifier = nn.Linear(d, num_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)
        self.query_net = QueryTokenNet(d, med.queries, d)
        self.med_head = MedAlignHead(d, teacher_dim or d, med, proj_seed)

    def features(self, images: torch.Tensor, modality_idx: torch.Tensor | None = None):
        """Feature maps ``[B, d, h, w]`` for a flat image batch, with modality encoding."""
        if self.compa is None:
            M = self.static_M.expand(images.shape[0], -1)
            return self.backbone(images), M, None, None
        enc, bundle = self.compa(images, modality_idx)
        return self.backbone(images, bundle), enc.M, enc.w, bundle

    def forward(self, x: torch.Tensor, modality_idx: torch.Tensor | None = None) -> ModelOutput:
        """``x``: ``[B, 3, H, W]`` or ``[B, S, 3, H, W]`` (slice stacks)."""
        if x.dim() == 4:
            x = x.unsqueeze(1)
        b, s = x.shape[:2]
        flat = x.reshape(b * s, *x.shape[2:])
        idx = None if modality_idx is None else modality_idx.repeat_interleave(s)
        fmap, M, w, bundle = self.features(flat, idx)
        pooled = pool_global(fmap).reshape(b, s, -1).mean(1)
        return ModelOutput(fmap, pooled, self.classifier(pooled), M, w, bundle, s)

    @torch.no_grad()
    def embed(self, x: torch.Tensor, modality_idx: torch.Tensor | None = None) -> torch.Tensor:
        """Unit-norm identity embeddings ``[B, d]``."""
        return l2_normalize(self.forward(x, modality_idx).pooled)

    def med_loss(
        self,
        out: ModelOutput,
        teacher_maps: Sequence[torch.Tensor],
        pairs: tuple[torch.Tensor, torch.Tensor],
    ) -> torch.Tensor:
        tokens = self.query_net(out.M)
        tmap = self.med_head.project_teacher(teacher_maps, tuple(out.fmap.shape[-2:]))
        return self.med_head(out.fmap, tmap.to(out.fmap.dtype), tokens, pairs, out.n_slices)

    def spec(self) -> dict:
        """Constructor arguments, enough to rebuild the module for a state dict."""
        return {
            "backbone": asdict(self.backbone_config),
            "compa": asdict(self.compa_config),
            "med": asdict(self.med_config),
            "num_classes": self.classifier.out_features,
            "teacher_dim": self.med_head.teacher_adapter.proj.shape[1],
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "MedReID":
        return cls(
            BackboneConfig(**spec["backbone"]),
            CompaConfig(**spec["compa"]),
            MedConfig(**spec["med"]),
            spec["num_classes"],
            spec["teacher_dim"],
        )


def load_model(path: str | Path) -> tuple[MedReID, dict]:
    """Rebuild a model from a training checkpoint; returns it with the stored train config."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = MedReID.from_spec(blob["model_config"])
    model.load_state_dict(blob["model"])
    model.eval()
    return model, blob.get("train_config", {})
