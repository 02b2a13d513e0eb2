"""Continuous-modality parameter adapter.

Raw 16x16 patches are mapped to local modality contexts, averaged into a
global context, turned into a probability vector over ``L`` pseudo
modalities and mixed with a learnable codebook. Two hypernetworks (one for
attention, one for FFN layers) then emit a low-rank ``(A, B)`` pair per
backbone layer, which the backbone applies as ``W + s * A @ B``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import PATCH_DIM, normalize_pixels, patchify

MODALITY_MODES = ("none", "discrete", "continuous_no_codebook", "continuous_codebook")


@dataclass(frozen=True)
class CompaConfig:
    mode: str = "continuous_codebook"
    codes: int = 32  # L
    rank: int = 16
    groups: int = 64

    def __post_init__(self) -> None:
        if self.mode not in MODALITY_MODES:
            raise ValueError(f"unknown modality mode {self.mode!r}; expected one of {MODALITY_MODES}")
        if self.codes < 1 or self.rank < 1 or self.groups < 1:
            raise ValueError("codes, rank and groups must be positive")

    @property
    def scale(self) -> float:
        return 1.0 / self.rank


class AdapterBundle:
    """Low-rank factors keyed by backbone layer name.

    ``factors[name] = (A, B)`` with ``A: [..., out, r]`` and ``B: [..., r, in]``;
    a leading dimension, when present, indexes images in a batch.
    """

    def __init__(self, factors: Mapping[str, tuple[torch.Tensor, torch.Tensor]], scale: float):
        self.factors = dict(factors)
        self.scale = float(scale)

    @classmethod
    def zeros(cls, shapes: Mapping[str, tuple[int, int]], rank: int, scale: float | None = None, batch: int | None = None):
        lead = () if batch is None else (batch,)
        return cls(
            {n: (torch.zeros(*lead, o, rank), torch.zeros(*lead, rank, i)) for n, (o, i) in shapes.items()},
            1.0 / rank if scale is None else scale,
        )

    def check(self, shapes: Mapping[str, tuple[int, int]]) -> None:
        missing = sorted(set(shapes) - set(self.factors))
        if missing:
            raise ValueError(f"adapter bundle lacks layer {missing[0]}")
        extra = sorted(set(self.factors) - set(shapes))
        if extra:
            raise ValueError(f"adapter bundle targets unknown layer {extra[0]}")
        for name, (o, i) in shapes.items():
            A, B = self.factors[name]
            if A.shape[-2] != o or B.shape[-1] != i or A.shape[-1] != B.shape[-2]:
                raise ValueError(
                    f"adapter shape mismatch at layer {name}: A{tuple(A.shape)} B{tuple(B.shape)} vs weight ({o}, {i})"
                )

    def __getitem__(self, index: int) -> "AdapterBundle":
        """Bundle of one image from a batched bundle."""
        return AdapterBundle({n: (A[index], B[index]) for n, (A, B) in self.factors.items()}, self.scale)

    def delta(self, name: str) -> torch.Tensor:
        A, B = self.factors[name]
        return self.scale * A @ B

    def state_dict(self) -> dict[str, torch.Tensor]:
        out = {"scale": torch.tensor(self.scale)}
        for n, (A, B) in self.factors.items():
            out[f"{n}.A"], out[f"{n}.B"] = A.detach(), B.detach()
        return out

    @classmethod
    def from_state_dict(cls, state: Mapping[str, torch.Tensor]) -> "AdapterBundle":
        names = sorted({k[:-2] for k in state if k.endswith(".A")})
        return cls({n: (state[f"{n}.A"], state[f"{n}.B"]) for n in names}, float(state["scale"]))


def merge_adapters(
    weights: Mapping[str, torch.Tensor], bundle: AdapterBundle, scale: float | None = None
) -> dict[str, torch.Tensor]:
    """Effective parameters ``W + s * A @ B`` for every targeted ``<layer>.weight``.

    ``weights`` is a full state dict; entries that are not targeted (norms,
    biases, embeddings) are passed through untouched. ``bundle`` must be
    unbatched.
    """
    s = bundle.scale if scale is None else scale
    out = dict(weights)
    for name, (A, B) in bundle.factors.items():
        key = f"{name}.weight"
        if key not in weights:
            raise ValueError(f"adapter targets unknown layer {name}")
        W = weights[key]
        if (A.shape[0], B.shape[1]) != tuple(W.shape):
            raise ValueError(f"adapter shape mismatch at layer {name}: {tuple(A.shape)}x{tuple(B.shape)} vs {tuple(W.shape)}")
        out[key] = W + s * (A @ B)
    return out


class GroupedLinear(nn.Module):
    """Block-diagonal linear map: input and output channels split into ``groups``."""

    def __init__(self, in_features: int, out_features: int, groups: int):
        super().__init__()
        if in_features % groups or out_features % groups:
            raise ValueError(f"channels ({in_features}, {out_features}) not divisible by groups={groups}")
        self.groups = groups
        self.in_features, self.out_features = in_features, out_features
        gi, go = in_features // groups, out_features // groups
        bound = 1.0 / math.sqrt(gi)
        self.weight = nn.Parameter(torch.empty(groups, go, gi).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(out_features).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-1]
        xg = x.reshape(-1, self.groups, self.in_features // self.groups)
        y = torch.einsum("ngi,goi->ngo", xg, self.weight)
        return y.reshape(*lead, self.out_features) + self.bias

    def dense_weight(self) -> torch.Tensor:
        return torch.block_diag(*self.weight)


class PNet(nn.Module):
    """Hypernetwork for a set of layers: norm, dense hidden layer, grouped output layer.

    The output channels producing ``A`` factors start at zero so that every
    generated ``A @ B`` is zero at initialisation, while ``B`` starts random
    and gradients can reach both.
    """

    def __init__(self, d_m: int, shapes: Mapping[str, tuple[int, int]], rank: int, groups: int):
        super().__init__()
        if d_m % groups:
            raise ValueError(f"modality dim {d_m} not divisible by groups={groups}")
        self.rank = rank
        self.layout = []
        offset = 0
        a_mask = []
        for name, (o, i) in shapes.items():
            self.layout.append((name, o, i, offset))
            a_mask += [True] * (o * rank) + [False] * (rank * i)
            offset += rank * (o + i)
        total = -(-offset // groups) * groups
        a_mask += [True] * (total - offset)  # padding channels stay inert
        self.norm = nn.LayerNorm(d_m)
        self.hidden = nn.Linear(d_m, d_m)
        self.out = GroupedLinear(d_m, total, groups)
        mask = torch.tensor(a_mask)
        b_std = torch.zeros(total)
        for name, o, i, off in self.layout:
            b_std[off + o * rank : off + rank * (o + i)] = 1.0 / math.sqrt(i)
        with torch.no_grad():
            self.out.weight.view(total, -1)[mask] = 0.0
            self.out.bias.copy_(torch.randn(total) * b_std)
            self.out.bias[mask] = 0.0

    def zero_(self) -> None:
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()

    def forward(self, M: torch.Tensor) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        flat = self.out(F.gelu(self.hidden(self.norm(M))))
        lead = flat.shape[:-1]
        r = self.rank
        out = {}
        for name, o, i, off in self.layout:
            A = flat[..., off : off + o * r].reshape(*lead, o, r)
            B = flat[..., off + o * r : off + r * (o + i)].reshape(*lead, r, i)
            out[name] = (A, B)
        return out


@dataclass
class ModalityEncoding:
    w: torch.Tensor | None  # [B, L] (None for the codebook-free mode)
    M: torch.Tensor  # [B, d_m]


def modality_feature(w: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """``M = w @ Omega``."""
    return w @ codebook


class ComPA(nn.Module):
    def __init__(self, shapes: Mapping[str, tuple[int, int]], d_m: int, config: CompaConfig = CompaConfig()):
        super().__init__()
        if config.mode == "none":
            raise ValueError("ComPA is not built for modality mode 'none'")
        if d_m % config.groups:
            raise ValueError(f"modality dim {d_m} not divisible by groups={config.groups}")
        self.config = config
        self.d_m = d_m
        self.local_mlp = nn.Sequential(
            nn.Linear(PATCH_DIM, d_m), nn.GELU(), nn.Linear(d_m, d_m), nn.GELU(), nn.Linear(d_m, d_m)
        )
        head_out = d_m if config.mode == "continuous_no_codebook" else config.codes
        self.weight_mlp = nn.Sequential(nn.Linear(d_m, d_m), nn.GELU(), nn.Linear(d_m, head_out))
        self.codebook = nn.Parameter(torch.randn(config.codes, d_m) * 0.02)
        att = {n: s for n, s in shapes.items() if ".attn." in n}
        ffn = {n: s for n, s in shapes.items() if ".attn." not in n}
        self.att_pnet = PNet(d_m, att, config.rank, config.groups)
        self.ffn_pnet = PNet(d_m, ffn, config.rank, config.groups)

    def local_context(self, images: torch.Tensor) -> torch.Tensor:
        """Per-patch modality context ``[B, h*w, d_m]`` from raw pixels."""
        return self.local_mlp(patchify(normalize_pixels(images)))

    @staticmethod
    def global_context(contexts: torch.Tensor) -> torch.Tensor:
        return contexts.mean(-2)

    def modality_logits(self, global_ctx: torch.Tensor) -> torch.Tensor:
        return self.weight_mlp(global_ctx)

    def encode(self, images: torch.Tensor, modality_idx: torch.Tensor | None = None) -> ModalityEncoding:
        mode = self.config.mode
        if mode == "discrete":
            if modality_idx is None:
                raise ValueError("discrete modality mode needs dataset modality indices")
            w = F.one_hot(modality_idx, self.config.codes).to(self.codebook.dtype)
            return ModalityEncoding(w, modality_feature(w, self.codebook))
        g = self.global_context(self.local_context(images))
        if mode == "continuous_no_codebook":
            return ModalityEncoding(None, self.weight_mlp(g))
        w = self.modality_logits(g).softmax(-1)
        return ModalityEncoding(w, modality_feature(w, self.codebook))

    def generate(self, M: torch.Tensor) -> AdapterBundle:
        factors = {**self.att_pnet(M), **self.ffn_pnet(M)}
        return AdapterBundle(factors, self.config.scale)

    def forward(self, images, modality_idx=None) -> tuple[ModalityEncoding, AdapterBundle]:
        enc = self.encode(images, modality_idx)
        return enc, self.generate(enc.M)
