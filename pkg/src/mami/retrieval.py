"""Gallery embedding, cosine ranking and CMC evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .data import DatasetManifest, ImageRecord, ManifestError, modality_index
from .training import preprocess_eval

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingRecord:
    record_id: str
    patient_id: str
    modality: str
    embedding: np.ndarray  # unit norm, [d]


@dataclass
class RetrievalResult:
    query_id: str
    query_patient: str
    ranked_ids: list[str]
    ranked_patients: list[str]
    scores: np.ndarray

    def top(self, k: int) -> list[tuple[str, float]]:
        return list(zip(self.ranked_ids[:k], self.scores[:k].tolist()))


def embed_manifest(
    model,
    manifest: DatasetManifest,
    split: str | None,
    resize_size: int = 256,
    crop_size: int = 224,
    batch_size: int = 32,
    max_skip_fraction: float = 0.01,
) -> list[EmbeddingRecord]:
    """Embed every record of ``split`` (all records when ``None``).

    Unreadable images are skipped and counted; more than
    ``max_skip_fraction`` skipped aborts.
    """
    records = manifest.records if split is None else manifest.subset(split)
    mod_of = modality_index(manifest.modality_labels)
    model.eval()
    inputs: list[tuple[ImageRecord, torch.Tensor]] = []
    skipped = 0
    for r in records:
        try:
            x = preprocess_eval(manifest.load(r), resize_size, crop_size)
        except ManifestError as exc:
            logger.error("%s", exc)
            skipped += 1
            continue
        inputs.append((r, x))
    if records and skipped / len(records) > max_skip_fraction:
        raise RuntimeError(f"{skipped} of {len(records)} records unreadable; aborting")

    out: list[EmbeddingRecord] = []
    # scans and single images cannot share a tensor batch
    groups: dict[tuple, list[tuple[ImageRecord, torch.Tensor]]] = {}
    for r, x in inputs:
        groups.setdefault(tuple(x.shape), []).append((r, x))
    embedded: dict[str, np.ndarray] = {}
    for items in groups.values():
        for i in range(0, len(items), batch_size):
            chunk = items[i : i + batch_size]
            x = torch.stack([t for _, t in chunk])
            m = torch.tensor([mod_of[r.modality] for r, _ in chunk])
            emb = model.embed(x, m).numpy()
            for (r, _), e in zip(chunk, emb):
                embedded[r.id] = e
    for r, _ in inputs:
        out.append(EmbeddingRecord(r.id, r.patient_id, r.modality, embedded[r.id]))
    return out


def rank(query: EmbeddingRecord, gallery: Sequence[EmbeddingRecord]) -> RetrievalResult:
    """Cosine ranking, descending; ties broken by record id. The query's own
    record is excluded."""
    items = [g for g in gallery if g.record_id != query.record_id]
    if not items:
        raise ValueError("gallery is empty")
    G = np.stack([g.embedding for g in items])
    scores = G @ query.embedding
    ids = np.array([g.record_id for g in items])
    order = np.lexsort((ids, -scores))
    return RetrievalResult(
        query.record_id,
        query.patient_id,
        [items[i].record_id for i in order],
        [items[i].patient_id for i in order],
        scores[order],
    )


def cmc_rank_k(results: Iterable[RetrievalResult], k: int) -> float:
    """Percentage of queries with a same-patient gallery item in the top ``k``."""
    results = list(results)
    if not results:
        raise ValueError("no retrieval results")
    hits = 0
    for res in results:
        if res.query_patient not in res.ranked_patients:
            raise ValueError(f"query {res.query_id}: patient {res.query_patient} has no gallery record")
        hits += res.query_patient in res.ranked_patients[:k]
    return 100.0 * hits / len(results)


def cmc_curve(results: Sequence[RetrievalResult], max_k: int) -> np.ndarray:
    return np.array([cmc_rank_k(results, k) for k in range(1, max_k + 1)])


def evaluate_embeddings(query: Sequence[EmbeddingRecord], gallery: Sequence[EmbeddingRecord], ks=(1, 5, 10)) -> dict:
    results = [rank(q, gallery) for q in query]
    report = {f"R{k}": cmc_rank_k(results, k) for k in ks}
    report.update(num_query=len(query), num_gallery=len(gallery))
    return report


def evaluate(
    model,
    manifest: DatasetManifest,
    resize_size: int = 256,
    crop_size: int = 224,
    dataset: str = "",
    split_seed: int | None = None,
    embedder: Callable | None = None,
) -> dict:
    """CMC report over the manifest's query/gallery splits.

    ``embedder(manifest, split)`` overrides the model, e.g. to evaluate
    oracle embeddings.
    """
    if embedder is None:
        def embedder(m, s):
            return embed_manifest(model, m, s, resize_size, crop_size)
    query = embedder(manifest, "query")
    gallery = embedder(manifest, "gallery")
    report = {"dataset": dataset, "split_seed": split_seed}
    report.update(evaluate_embeddings(query, gallery))
    return report


def save_embeddings(records: Sequence[EmbeddingRecord], path: str | Path) -> None:
    """``<path>.npz`` (one ``embeddings`` matrix) plus a ``<path>.json`` sidecar."""
    path = Path(path)
    np.savez(path.with_suffix(".npz"), embeddings=np.stack([r.embedding for r in records]))
    sidecar = {
        r.record_id: {"row": i, "patient_id": r.patient_id, "modality": r.modality}
        for i, r in enumerate(records)
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_embeddings(path: str | Path) -> list[EmbeddingRecord]:
    path = Path(path)
    with np.load(path.with_suffix(".npz")) as npz:
        E = npz["embeddings"]
    sidecar = json.loads(path.with_suffix(".json").read_text())
    out = [None] * len(sidecar)
    for rid, meta in sidecar.items():
        out[meta["row"]] = EmbeddingRecord(rid, meta["patient_id"], meta["modality"], E[meta["row"]])
    return out  # type: ignore[return-value]
