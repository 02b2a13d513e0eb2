"""Dataset records, JSON-Lines manifests, query/gallery splits and the
synthetic multi-modality ReID generator.

Synthetic patients own a fixed latent layout (Gaussian blobs plus Bezier
curves). Each modality renders that layout through its own style: an
intensity transfer curve, a colour tint, a background field, value noise
and per-image artifact structures. Identity therefore survives a change of
style while the style itself changes what a good feature extractor looks at.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
PATCH = 16


class ManifestError(ValueError):
    """Raised for malformed manifests or unreadable images."""


@dataclass
class ImageRecord:
    """One image, or one slice stack, belonging to a patient.

    ``pixels`` holds in-memory data: ``[3, H, W]`` for single images or
    ``[S, 3, H, W]`` for scans. On-disk records use ``path`` (a PNG) or
    ``slice_paths`` (ordered PNGs).
    """

    id: str
    patient_id: str
    modality: str
    path: str | None = None
    slice_paths: list[str] | None = None
    split: str | None = None
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)
    meta: dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.path is not None and self.slice_paths is not None:
            raise ManifestError(f"record {self.id}: both path and slice_paths given")
        if self.split is not None and self.split not in SPLITS:
            raise ManifestError(f"record {self.id}: unknown split {self.split!r}")
        if self.pixels is not None:
            _check_pixels(self.id, self.pixels)

    @property
    def is_scan(self) -> bool:
        if self.slice_paths is not None:
            return True
        return self.pixels is not None and self.pixels.ndim == 4

    def load(self, root: Path | None = None) -> np.ndarray:
        """Return pixels as float32 in [0, 1]; ``[S,3,H,W]`` for scans."""
        if self.pixels is not None:
            return self.pixels
        root = root or Path(".")
        try:
            if self.slice_paths is not None:
                return np.stack([read_png(root / p) for p in self.slice_paths])
            if self.path is None:
                raise ManifestError(f"record {self.id}: no pixels and no path")
            return read_png(root / self.path)
        except (OSError, ValueError) as exc:
            raise ManifestError(f"record {self.id}: unreadable image ({exc})") from exc

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"id": self.id, "patient_id": self.patient_id, "modality": self.modality}
        if self.slice_paths is not None:
            out["slice_paths"] = list(self.slice_paths)
        else:
            out["path"] = self.path
        if self.split is not None:
            out["split"] = self.split
        return out


def _check_pixels(rid: str, pixels: np.ndarray) -> None:
    if pixels.ndim not in (3, 4) or pixels.shape[-3] != 3:
        raise ManifestError(f"record {rid}: pixels must be [3,H,W] or [S,3,H,W], got {pixels.shape}")
    h, w = pixels.shape[-2:]
    if h % PATCH or w % PATCH or h == 0 or w == 0:
        raise ManifestError(f"record {rid}: H and W must be positive multiples of {PATCH}, got {h}x{w}")


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    root: Path | None = None
    n_dropped: int = 0
    latents: dict[str, "PatientLayout"] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._by_id = {r.id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise ManifestError("duplicate record ids in manifest")

    @property
    def modality_labels(self) -> set[str]:
        return {r.modality for r in self.records}

    @property
    def patients(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for r in self.records:
            out[r.patient_id].append(r.id)
        return dict(out)

    def __getitem__(self, rid: str) -> ImageRecord:
        return self._by_id[rid]

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]

    def load(self, record: ImageRecord) -> np.ndarray:
        return record.load(self.root)

    def validate(self) -> None:
        """Check the patient invariants; raises ``ManifestError``."""
        for pid, ids in self.patients.items():
            if len(ids) < 2:
                raise ManifestError(f"patient {pid} has fewer than two records")
        query = {r.patient_id for r in self.records if r.split == "query"}
        gallery = {r.patient_id for r in self.records if r.split == "gallery"}
        missing = sorted(query - gallery)
        if missing:
            raise ManifestError(f"query patients without gallery records: {missing}")


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path: Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(pixels.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_manifest(path: str | Path, verify_images: bool = True) -> DatasetManifest:
    """Parse a JSON-Lines manifest.

    Patients with fewer than two records are dropped; the count is kept in
    ``DatasetManifest.n_dropped``. Relative image paths resolve against the
    manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            records.append(_record_from_json(obj, lineno))

    root = path.parent
    by_patient: dict[str, list[ImageRecord]] = defaultdict(list)
    for r in records:
        by_patient[r.patient_id].append(r)
    dropped = {pid for pid, rs in by_patient.items() if len(rs) < 2}
    if dropped:
        logger.warning("dropping %d patient(s) with fewer than two records", len(dropped))
    kept = [r for r in records if r.patient_id not in dropped]

    if verify_images:
        for r in kept:
            for p in r.slice_paths or [r.path]:
                try:
                    with Image.open(root / p) as img:
                        w, h = img.size
                except (OSError, TypeError) as exc:
                    raise ManifestError(f"record {r.id}: unreadable image {p} ({exc})") from exc
                if h % PATCH or w % PATCH:
                    logger.debug("record %s has non-multiple-of-16 size %dx%d", r.id, h, w)

    manifest = DatasetManifest(kept, root=root, n_dropped=len(dropped))
    manifest.validate()
    return manifest


def _record_from_json(obj: Any, lineno: int) -> ImageRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    for key in ("id", "patient_id", "modality"):
        if not isinstance(obj.get(key), str):
            raise ManifestError(f"line {lineno}: missing or non-string field {key!r}")
    has_path = "path" in obj
    has_slices = "slice_paths" in obj
    if has_path == has_slices:
        raise ManifestError(f"line {lineno}: exactly one of 'path' or 'slice_paths' is required")
    if has_slices and (not isinstance(obj["slice_paths"], list) or not obj["slice_paths"]):
        raise ManifestError(f"line {lineno}: slice_paths must be a non-empty list")
    unknown = set(obj) - {"id", "patient_id", "modality", "path", "slice_paths", "split"}
    if unknown:
        raise ManifestError(f"line {lineno}: unknown fields {sorted(unknown)}")
    try:
        return ImageRecord(
            id=obj["id"],
            patient_id=obj["patient_id"],
            modality=obj["modality"],
            path=obj.get("path"),
            slice_paths=obj.get("slice_paths"),
            split=obj.get("split"),
        )
    except ManifestError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write records as JSON Lines. Records with in-memory pixels only must be
    materialised first (see ``save_dataset``)."""
    path = Path(path)
    with path.open("w") as fh:
        for r in manifest.records:
            if r.path is None and r.slice_paths is None:
                raise ManifestError(f"record {r.id} has no on-disk path; use save_dataset")
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def save_dataset(manifest: DatasetManifest, out_dir: str | Path) -> Path:
    """Write every record's pixels as PNG(s) under ``out_dir`` plus ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for r in manifest.records:
        pixels = manifest.load(r)
        if pixels.ndim == 4:
            sub = out_dir / "images" / r.id
            sub.mkdir(exist_ok=True)
            paths = []
            for s, sl in enumerate(pixels):
                write_png(sub / f"{s:03d}.png", sl)
                paths.append(f"images/{r.id}/{s:03d}.png")
            new = ImageRecord(r.id, r.patient_id, r.modality, slice_paths=paths, split=r.split)
        else:
            write_png(out_dir / "images" / f"{r.id}.png", pixels)
            new = ImageRecord(r.id, r.patient_id, r.modality, path=f"images/{r.id}.png", split=r.split)
        new.pixels, new.meta = r.pixels, r.meta
        records.append(new)
    saved = DatasetManifest(records, root=out_dir, latents=manifest.latents)
    write_manifest(saved, out_dir / "manifest.jsonl")
    return out_dir / "manifest.jsonl"


# ---------------------------------------------------------------------------
# query / gallery split
# ---------------------------------------------------------------------------


def split_train_eval(manifest: DatasetManifest, n_eval: int, seed: int) -> DatasetManifest:
    """Hold out ``n_eval`` patients for evaluation, stratified by modality.

    Held-out patients get ``split=None`` (to be split into query/gallery);
    everything else is marked ``train``.
    """
    rng = np.random.default_rng([seed, 101])
    by_mod: dict[str, list[str]] = defaultdict(list)
    for pid, ids in sorted(manifest.patients.items()):
        by_mod[manifest[ids[0]].modality].append(pid)
    mods = sorted(by_mod)
    quota = {m: n_eval * len(by_mod[m]) // len(manifest.patients) for m in mods}
    for m in mods[: n_eval - sum(quota.values())]:
        quota[m] += 1
    held = set()
    for m in mods:
        pids = by_mod[m]
        for i in rng.permutation(len(pids))[: quota[m]]:
            held.add(pids[i])
    for r in manifest.records:
        r.split = None if r.patient_id in held else "train"
    return manifest


def split_query_gallery(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Mark one record per evaluation patient as query and the rest gallery.

    Evaluation patients are those with no record already marked ``train``.
    The choice is a pure function of ``seed`` and the record ids.
    """
    rng = np.random.default_rng([seed, 202])
    for pid, ids in sorted(manifest.patients.items()):
        recs = [manifest[i] for i in sorted(ids)]
        if any(r.split == "train" for r in recs):
            continue
        assert len(recs) >= 2, f"patient {pid} has fewer than two records"
        q = int(rng.integers(len(recs)))
        for i, r in enumerate(recs):
            r.split = "query" if i == q else "gallery"
    return manifest


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 80
    images_per_patient: int = 4
    n_modalities: int = 2
    image_size: int = 256
    seed: int = 0
    # trailing modalities rendered as slice stacks
    scan_modalities: int = 0
    n_slices: int = 17
    # when set, a patient's images cycle through all modalities
    cross_modal: bool = False

    def validate(self) -> None:
        if self.n_patients < 2:
            raise ValueError("n_patients must be >= 2")
        if self.images_per_patient < 2:
            raise ValueError("images_per_patient must be >= 2")
        if self.n_modalities < 1:
            raise ValueError("n_modalities must be >= 1")
        if self.image_size <= 0 or self.image_size % PATCH:
            raise ValueError(f"image_size must be a positive multiple of {PATCH}")
        if not 0 <= self.scan_modalities <= self.n_modalities:
            raise ValueError("scan_modalities must lie in [0, n_modalities]")
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")


@dataclass(frozen=True)
class PatientLayout:
    """Latent anatomy of one synthetic patient, in unit coordinates."""

    blob_centers: np.ndarray  # [5, 2] (y, x)
    blob_sigmas: np.ndarray  # [5]
    blob_amps: np.ndarray  # [5]
    blob_depths: np.ndarray  # [5], z-centre for scans
    curves: np.ndarray  # [2, 4, 2] cubic Bezier control points
    curve_widths: np.ndarray  # [2]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatientLayout):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("blob_centers", "blob_sigmas", "blob_amps", "blob_depths", "curves", "curve_widths")
        )


@dataclass(frozen=True)
class ModalityStyle:
    name: str
    transfer: str  # gamma | inverse | sigmoid
    gamma: float
    tint: tuple[float, float, float]
    background: str  # gradient | vignette
    bg_amp: float
    noise_amp: float
    noise_cells: int
    blob_gain: float
    curve_gain: float
    artifact: str  # curves | blobs
    artifact_count: int


# Style families; modality k uses family k % 4 with seeded parameter jitter.
# Artifacts mimic the anatomy of the *other* family so that what counts as
# identity evidence depends on the modality.
_FAMILIES = (
    dict(transfer="gamma", tint=(1.0, 1.0, 1.0), background="gradient", artifact="curves",
         blob_gain=1.0, curve_gain=0.45, noise_cells=48),
    dict(transfer="inverse", tint=(1.0, 0.55, 0.35), background="vignette", artifact="blobs",
         blob_gain=0.45, curve_gain=1.0, noise_cells=10),
    dict(transfer="sigmoid", tint=(0.85, 0.9, 1.0), background="vignette", artifact="curves",
         blob_gain=0.8, curve_gain=0.8, noise_cells=24),
    dict(transfer="gamma", tint=(0.95, 0.6, 0.9), background="gradient", artifact="blobs",
         blob_gain=0.7, curve_gain=0.9, noise_cells=16),
)


def modality_style(k: int, seed: int) -> ModalityStyle:
    rng = np.random.default_rng([seed, 303, k])
    fam = _FAMILIES[k % len(_FAMILIES)]
    return ModalityStyle(
        name=f"synth{k}",
        transfer=fam["transfer"],
        gamma=float(rng.uniform(0.6, 0.8) if k % 2 == 0 else rng.uniform(1.2, 1.6)),
        tint=fam["tint"],
        background=fam["background"],
        bg_amp=float(rng.uniform(0.15, 0.3)),
        noise_amp=float(rng.uniform(0.06, 0.1)),
        noise_cells=fam["noise_cells"],
        blob_gain=fam["blob_gain"],
        curve_gain=fam["curve_gain"],
        artifact=fam["artifact"],
        artifact_count=3,
    )


def patient_layout(seed: int, index: int) -> PatientLayout:
    rng = np.random.default_rng([seed, 404, index])
    # patient-level scale, contrast and line width survive crops and flips,
    # unlike absolute positions
    scale = rng.uniform(0.03, 0.1)
    level = rng.uniform(0.35, 1.0)
    width = rng.uniform(0.006, 0.03)
    return PatientLayout(
        blob_centers=rng.uniform(0.15, 0.85, size=(5, 2)),
        blob_sigmas=scale * rng.uniform(0.85, 1.15, size=5),
        blob_amps=level * rng.uniform(0.85, 1.0, size=5),
        blob_depths=rng.uniform(0.2, 0.8, size=5),
        curves=rng.uniform(0.1, 0.9, size=(2, 4, 2)),
        curve_widths=width * rng.uniform(0.85, 1.15, size=2),
    )


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def _blobs(yy, xx, centers, sigmas, amps) -> np.ndarray:
    out = np.zeros_like(yy)
    for (cy, cx), s, a in zip(centers, sigmas, amps):
        out += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return out


def _bezier(yy, xx, ctrl: np.ndarray, width: float, n: int = 96) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = ((1 - t) ** 3) * ctrl[0] + 3 * ((1 - t) ** 2) * t * ctrl[1] + 3 * (1 - t) * t * t * ctrl[2] + t**3 * ctrl[3]
    size = yy.shape[0]
    # distance transform on a binary raster of the sampled polyline
    mask = np.ones_like(yy, dtype=bool)
    fine = np.linspace(0.0, 1.0, 4 * size)[:, None]
    idx = np.interp(fine[:, 0], np.linspace(0, 1, n), np.arange(n))
    lo = np.floor(idx).astype(int).clip(0, n - 2)
    frac = (idx - lo)[:, None]
    dense = pts[lo] * (1 - frac) + pts[lo + 1] * frac
    ij = np.clip((dense * size).astype(int), 0, size - 1)
    mask[ij[:, 0], ij[:, 1]] = False
    dist = ndimage.distance_transform_edt(mask) / size
    return np.exp(-(dist**2) / (2 * width * width))


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    cells = max(2, min(cells, size))
    coarse = rng.standard_normal((cells + 1, cells + 1))
    fine = ndimage.zoom(coarse, size / (cells + 1), order=3, mode="reflect")
    fine = fine[:size, :size]
    return fine / (fine.std() + 1e-8)


def _background(style: ModalityStyle, yy, xx, rng: np.random.Generator) -> np.ndarray:
    if style.background == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        return style.bg_amp * (np.cos(ang) * (yy - 0.5) + np.sin(ang) * (xx - 0.5) + 0.5)
    r2 = (yy - 0.5) ** 2 + (xx - 0.5) ** 2
    return style.bg_amp * (1.0 - np.exp(-r2 / 0.18))


def _transfer(style: ModalityStyle, a: np.ndarray) -> np.ndarray:
    a = np.clip(a, 0.0, 1.0)
    if style.transfer == "gamma":
        return a**style.gamma
    if style.transfer == "inverse":
        return 1.0 - a**style.gamma
    return 1.0 / (1.0 + np.exp(-8.0 * (a - 0.4)))


def render(
    layout: PatientLayout,
    style: ModalityStyle,
    size: int,
    rng: np.random.Generator,
    depth: float | None = None,
    jitter: np.ndarray | None = None,
) -> np.ndarray:
    """Render one image (``[3,size,size]``, quantised to 8 bits) of ``layout``.

    ``jitter`` is a unit-coordinate shift applied to the whole layout; it is
    drawn from ``rng`` (at most 2 px) when omitted.
    """
    yy, xx = _grid(size)
    if jitter is None:
        jitter = rng.uniform(-2.0, 2.0, size=2) / size
    centers = layout.blob_centers + jitter
    amps = layout.blob_amps
    curve_shift = np.zeros(2)
    if depth is not None:
        amps = amps * np.exp(-((depth - layout.blob_depths) ** 2) / (2 * 0.25**2))
        curve_shift = np.array([0.0, 0.12 * (depth - 0.5)])
    anatomy = style.blob_gain * _blobs(yy, xx, centers, layout.blob_sigmas, amps)
    for ctrl, w in zip(layout.curves, layout.curve_widths):
        anatomy += style.curve_gain * 0.8 * _bezier(yy, xx, ctrl + jitter + curve_shift, w)

    # per-image artifacts shaped like the other family's anatomy
    if style.artifact == "curves":
        for _ in range(style.artifact_count):
            anatomy += style.curve_gain * 0.8 * _bezier(
                yy, xx, rng.uniform(0.05, 0.95, size=(4, 2)), rng.uniform(0.008, 0.016)
            )
    else:
        anatomy += style.blob_gain * _blobs(
            yy,
            xx,
            rng.uniform(0.1, 0.9, size=(style.artifact_count, 2)),
            rng.uniform(0.035, 0.08, size=style.artifact_count),
            rng.uniform(0.5, 1.0, size=style.artifact_count),
        )

    field_ = anatomy + _background(style, yy, xx, rng)
    img = _transfer(style, field_)
    img = img + style.noise_amp * _value_noise(rng, size, style.noise_cells)
    out = np.stack([img * t for t in style.tint])
    out = np.clip(out, 0.0, 1.0)
    return (np.rint(out * 255.0) / 255.0).astype(np.float32)


def generate_synthetic(config: SynthConfig) -> DatasetManifest:
    """Deterministically synthesise a multi-modality ReID dataset in memory.

    Patient ``i`` lives in modality ``i % n_modalities`` unless
    ``cross_modal`` is set, in which case image ``j`` uses modality
    ``j % n_modalities``. Layouts are exposed on ``manifest.latents`` and
    each record's applied jitter on ``record.meta``.
    """
    config.validate()
    styles = [modality_style(k, config.seed) for k in range(config.n_modalities)]
    first_scan = config.n_modalities - config.scan_modalities
    width = len(str(config.n_patients - 1))
    records = []
    latents = {}
    for i in range(config.n_patients):
        pid = f"p{i:0{width}d}"
        layout = patient_layout(config.seed, i)
        latents[pid] = layout
        for j in range(config.images_per_patient):
            k = (j if config.cross_modal else i) % config.n_modalities
            style = styles[k]
            rng = np.random.default_rng([config.seed, 505, i, j])
            jitter = rng.uniform(-2.0, 2.0, size=2) / config.image_size
            if k >= first_scan:
                depths = np.linspace(0.0, 1.0, config.n_slices)
                pixels = np.stack([render(layout, style, config.image_size, rng, d, jitter) for d in depths])
            else:
                pixels = render(layout, style, config.image_size, rng, None, jitter)
            records.append(
                ImageRecord(
                    id=f"{pid}_{j:02d}",
                    patient_id=pid,
                    modality=style.name,
                    pixels=pixels,
                    meta={"jitter": jitter, "style": k},
                )
            )
    return DatasetManifest(records, latents=latents)


def modality_index(labels: Iterable[str]) -> dict[str, int]:
    """Stable label -> index map (sorted order)."""
    return {m: i for i, m in enumerate(sorted(set(labels)))}
