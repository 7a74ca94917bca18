"""Detector counting by activation quantiles and concept IoU.

A neuron's activations over every spatial position of every image give a
threshold ``T_i`` exceeded by a fraction ``q`` of them.  The activation map is
bilinearly upsampled to image size, thresholded at ``T_i`` and compared with
every concept's pixel labels; IoU counts are accumulated over the whole
dataset.  A neuron is a detector of its best concept if that IoU exceeds the
IoU threshold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr

from .encoders import EncoderHandle, stage_tensors
from .errors import ConfigError, ConsistencyError
from .pairgen import DatasetManifest
from .textures import (PALETTES, PATTERNS, SHAPE_FAMILIES, composite, random_texture, render_silhouette,
                       render_texture, stable_seed, to_uint8)

TEXTURE_CATEGORIES = ("texture", "color")


@dataclass
class ConceptDataset:
    """Images with per-pixel concept labels.

    ``labels`` has shape (N, n_categories, H, W) and holds global concept ids
    (-1 where a category has no concept).  ``concepts`` lists
    ``(concept_id, name, category)`` with ids 0..C-1.
    """
    images: np.ndarray
    labels: np.ndarray
    concepts: list
    categories: tuple

    def __post_init__(self):
        if self.labels.ndim != 4 or self.labels.shape[1] != len(self.categories):
            raise ConsistencyError("labels must be (N, n_categories, H, W)")
        if self.images.shape[:3] != (self.labels.shape[0],) + self.labels.shape[2:]:
            raise ConsistencyError("labels must align with image size")
        for cid, (i, _, cat) in enumerate(self.concepts):
            if i != cid or cat not in self.categories:
                raise ConsistencyError("concept ids must be 0..C-1 with known categories")
        for k, cat in enumerate(self.categories):
            used = np.unique(self.labels[:, k])
            used = used[used >= 0]
            if any(self.concepts[int(c)][2] != cat for c in used):
                raise ConsistencyError(f"category {cat!r} holds concepts of another category")

    @property
    def num_concepts(self) -> int:
        return len(self.concepts)

    def category_of(self, concept_id: int) -> str:
        return self.concepts[concept_id][2]

    def pixel_counts(self) -> np.ndarray:
        lab = self.labels.reshape(-1)
        return np.bincount(lab[lab >= 0].astype(np.int64), minlength=self.num_concepts)


def synthetic_concepts(manifest: DatasetManifest, label_background: bool = False) -> ConceptDataset:
    """Concept labels for a generated textured-shapes set.

    Colour is named per pixel (nearest rendering colour) everywhere.  The
    silhouette carries its family and its texture's pattern; background
    patterns are labelled only with ``label_background``.
    """
    concepts = _synthetic_vocabulary()
    n_tex, n_col = len(PATTERNS), len(NAMED_COLORS)
    images, labels = [], []
    for it in manifest.items:
        img = manifest.image(it)
        fg = manifest.mask(it) > 0
        a = it.attrs
        if "fg_texture" not in a or "bg_texture" not in a or "family" not in a:
            raise ConfigError(f"item {it.image_id} lacks generator attributes")
        lab = np.full((3,) + fg.shape, -1, dtype=np.int16)
        bg_pat = PATTERNS.index(a["bg_texture"]["pattern"]) if label_background else -1
        lab[0] = np.where(fg, PATTERNS.index(a["fg_texture"]["pattern"]), bg_pat)
        lab[1] = n_tex + color_names(img)
        lab[2] = np.where(fg, n_tex + n_col + SHAPE_FAMILIES.index(a["family"]), -1)
        images.append(img)
        labels.append(lab)
    return ConceptDataset(np.stack(images), np.stack(labels), concepts, ("texture", "color", "object"))


def generate_concept_set(num_images: int = 240, image_size: int = 32, seed: int = 0,
                         texture_fraction: float = 0.5, num_families: int = 4,
                         period_range=(3.0, 7.0)) -> ConceptDataset:
    """Synthetic concept set with whole-frame texture images and object images.

    A texture image is one procedural texture over the full frame, labelled
    with its pattern at every pixel.  An object image is a silhouette on a
    different texture; the silhouette carries its family and pattern.  Colour
    is named per pixel in every image.  Each concept then occupies a few
    percent of all pixels, the regime quantile-mask IoU is designed for.
    """
    if not (0.0 <= texture_fraction <= 1.0):
        raise ConfigError("texture_fraction must lie in [0, 1]")
    if not (1 <= num_families <= len(SHAPE_FAMILIES)):
        raise ConfigError("num_families out of range")
    concepts = _synthetic_vocabulary()
    n_tex, n_pal, n_col = len(PATTERNS), len(PALETTES), len(NAMED_COLORS)
    rng = np.random.default_rng(stable_seed("concept-set", seed))
    n_texture_images = int(round(texture_fraction * num_images))
    images, labels = [], []
    for i in range(num_images):
        lab = np.full((3, image_size, image_size), -1, dtype=np.int16)
        offset = tuple(rng.uniform(0, 16, size=2))
        if i < n_texture_images:
            tex = random_texture(rng, pattern=PATTERNS[i % n_tex], palette=(i // n_tex) % n_pal,
                                 period_range=period_range)
            img = to_uint8(render_texture(tex, image_size, offset))
            lab[0] = tex.pattern_id
        else:
            fam = int(rng.integers(num_families))
            fg = random_texture(rng, period_range=period_range)
            bg = random_texture(rng, palette=int((fg.palette + 1 + rng.integers(n_pal - 1)) % n_pal),
                                period_range=period_range)
            sil = render_silhouette(SHAPE_FAMILIES[fam], image_size, rng)
            img = to_uint8(composite(sil, render_texture(fg, image_size, offset), render_texture(bg, image_size, offset)))
            lab[0][sil] = fg.pattern_id
            lab[2][sil] = n_tex + n_col + fam
        lab[1] = n_tex + color_names(img)
        images.append(img)
        labels.append(lab)
    return ConceptDataset(np.stack(images), np.stack(labels), concepts, ("texture", "color", "object"))


def _synthetic_vocabulary() -> list:
    concepts = []
    for p in PATTERNS:
        concepts.append((len(concepts), p, "texture"))
    for k in range(len(PALETTES)):
        concepts.append((len(concepts), f"hue{k}", "color"))
    for k in range(len(PALETTES)):
        concepts.append((len(concepts), f"shade{k}", "color"))
    for f in SHAPE_FAMILIES:
        concepts.append((len(concepts), f, "object"))
    return concepts


NAMED_COLORS = np.array([p[0] for p in PALETTES] + [p[1] for p in PALETTES])


def color_names(image: np.ndarray) -> np.ndarray:
    """Per-pixel index of the nearest rendering colour (hues first, then shades)."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    d = ((rgb[..., None, :] - NAMED_COLORS) ** 2).sum(-1)
    return np.argmin(d, axis=-1)


def manifest_concepts(path) -> ConceptDataset:
    """Load an external concept set (e.g. a Broden export) from a manifest.

    Layout: ``concepts.json`` with ``categories`` and ``concepts`` (list of
    ``[id, name, category]``), and ``items`` of ``{"image": png, "labels":
    {category: png}}``; label PNGs hold ``concept_id + 1`` with 0 for none.
    """
    from .pairgen import read_png

    path = Path(path)
    root = path.parent
    d = json.loads(path.read_text())
    cats = tuple(d["categories"])
    concepts = [(int(i), str(n), str(c)) for i, n, c in d["concepts"]]
    images, labels = [], []
    for it in d["items"]:
        img = read_png(root / it["image"])
        lab = np.full((len(cats),) + img.shape[:2], -1, dtype=np.int16)
        for k, c in enumerate(cats):
            if c in it["labels"]:
                lab[k] = read_png(root / it["labels"][c]).astype(np.int16) - 1
        images.append(img)
        labels.append(lab)
    return ConceptDataset(np.stack(images), np.stack(labels), concepts, cats)


def quantile_thresholds(features, q: float = 0.005):
    """Per-neuron (1 - q) quantile over all samples and positions.

    ``features`` is (N, D, H, W) or (N, D).  Returns (T, degenerate) where
    ``degenerate`` flags constant neurons, whose threshold is the constant.
    """
    if not (0 < q < 1):
        raise ConfigError("q must lie in (0, 1)")
    a = np.asarray(features, dtype=np.float64)
    if a.ndim == 4:
        a = a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)
    elif a.ndim == 2:
        a = a.T
    else:
        raise ConfigError("features must be (N, D, H, W) or (N, D)")
    T = np.quantile(a, 1.0 - q, axis=1, method="linear")
    degenerate = a.max(axis=1) == a.min(axis=1)
    T[degenerate] = a[degenerate, 0]
    return T, degenerate


def exceedance(features, T) -> np.ndarray:
    a = np.asarray(features, dtype=np.float64)
    a = a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1) if a.ndim == 4 else a.T
    return (a > np.asarray(T)[:, None]).mean(axis=1)


@dataclass
class DissectionResult:
    best_concept: list
    best_iou: list
    thresholds: list
    degenerate: list
    counts: dict
    iou_threshold: float
    q: float
    concept_names: list = field(default_factory=list)
    encoder_id: str = ""
    stage: str = ""

    @property
    def detectors(self) -> list:
        return [i for i, v in enumerate(self.best_iou) if v > self.iou_threshold]

    def texture_count(self, categories=TEXTURE_CATEGORIES) -> int:
        return int(sum(self.counts.get(c, 0) for c in categories))

    def to_dict(self):
        return {
            "encoder_id": self.encoder_id, "stage": self.stage, "q": self.q,
            "iou_threshold": self.iou_threshold, "counts": dict(self.counts),
            "neurons": [
                {"index": i, "best_concept": int(c), "concept": self.concept_names[c] if self.concept_names else None,
                 "best_iou": float(v), "threshold": float(t), "degenerate": bool(g),
                 "detector": bool(v > self.iou_threshold)}
                for i, (c, v, t, g) in enumerate(zip(self.best_concept, self.best_iou, self.thresholds, self.degenerate))
            ],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path


def concept_iou(features, concepts: ConceptDataset, T, batch_size: int = 32):
    """IoU for every (neuron, concept) from exact integer pixel counts over the dataset."""
    feats = np.asarray(features)
    N, D = feats.shape[:2]
    H, W = concepts.labels.shape[2:]
    C = concepts.num_concepts
    inter = np.zeros((D, C), dtype=np.int64)
    area = np.zeros(D, dtype=np.int64)
    T_t = torch.as_tensor(np.asarray(T), dtype=torch.float64).view(1, D, 1, 1)
    for s in range(0, N, batch_size):
        f = torch.as_tensor(feats[s : s + batch_size], dtype=torch.float64)
        if f.shape[2:] != (H, W):
            f = F.interpolate(f, size=(H, W), mode="bilinear", align_corners=False)
        m = (f > T_t).numpy()
        area += m.sum(axis=(0, 2, 3))
        mm = m.transpose(1, 0, 2, 3).reshape(D, -1).astype(np.float64)
        lab = concepts.labels[s : s + batch_size]
        for k in range(lab.shape[1]):
            ids = lab[:, k].reshape(-1).astype(np.int64)
            valid = ids >= 0
            if not valid.any():
                continue
            ind = np.zeros((int(valid.sum()), C))
            ind[np.arange(ind.shape[0]), ids[valid]] = 1.0
            # float products of 0/1 entries are exact integers well below 2**53
            inter += np.rint(mm[:, valid] @ ind).astype(np.int64)
    cpix = concepts.pixel_counts()
    union = area[:, None] + cpix[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return iou, inter, union


def dissect_features(features, concepts: ConceptDataset, q: float = 0.005, iou_threshold: float = 0.04,
                     encoder_id: str = "", stage: str = "") -> DissectionResult:
    feats = np.asarray(features)
    if feats.ndim != 4:
        raise ConfigError("dissection needs unpooled (N, D, H, W) activations")
    if feats.shape[0] != len(concepts.images):
        raise ConsistencyError("feature rows must match concept images")
    T, degenerate = quantile_thresholds(feats, q)
    iou, _, _ = concept_iou(feats, concepts, T)
    best = np.argmax(iou, axis=1)  # first maximum, i.e. lowest concept id on ties
    best_iou = iou[np.arange(iou.shape[0]), best]
    counts = {c: 0 for c in concepts.categories}
    for b, v in zip(best, best_iou):
        if v > iou_threshold:
            counts[concepts.category_of(int(b))] += 1
    return DissectionResult([int(b) for b in best], [float(v) for v in best_iou], [float(t) for t in T],
                            [bool(g) for g in degenerate], counts, float(iou_threshold), float(q),
                            [n for _, n, _ in concepts.concepts], encoder_id, stage)


def dissect(encoder: EncoderHandle, stage: str, concepts: ConceptDataset, q: float = 0.005,
            iou_threshold: float = 0.04) -> DissectionResult:
    encoder.check_stage(stage)
    feats = stage_tensors(encoder, concepts.images, [stage])[stage]
    return dissect_features(feats, concepts, q, iou_threshold, encoder.encoder_id, stage)


def compare_texture_counts(dissection_results: dict, allocations: dict) -> dict:
    """Texture detectors vs allocated texture neurons per encoder, with Spearman rank correlation.

    Both arguments map encoder id -> result.  Texture detectors count the
    texture and colour categories.
    """
    if set(dissection_results) != set(allocations):
        raise ConsistencyError("dissection and allocation results cover different encoders")
    ids = sorted(dissection_results)
    rows = [{"encoder": e, "texture_detectors": dissection_results[e].texture_count(),
             "texture_dims": int(allocations[e].counts["texture"])} for e in ids]
    a = [r["texture_detectors"] for r in rows]
    b = [r["texture_dims"] for r in rows]
    if len(ids) < 2 or len(set(a)) < 2 or len(set(b)) < 2:
        rho = float("nan")
    else:
        rho = float(spearmanr(a, b).statistic)
    return {"rows": rows, "spearman": rho}
