"""Cue-conflict shape bias."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyDatasetError
from .pairgen import DatasetManifest


@dataclass(frozen=True)
class CueConflictItem:
    image: np.ndarray
    shape_label: int
    texture_label: int
    item_id: str = ""

    def __post_init__(self):
        if self.shape_label == self.texture_label:
            raise ConfigError("cue-conflict item needs different shape and texture labels")


@dataclass
class BiasResult:
    shape_bias: float | None
    texture_bias: float | None
    coverage: float
    n_shape: int
    n_texture: int
    n_items: int

    @property
    def defined(self) -> bool:
        return self.shape_bias is not None

    def to_dict(self):
        return {"shape_bias": self.shape_bias, "texture_bias": self.texture_bias, "coverage": self.coverage,
                "n_shape": self.n_shape, "n_texture": self.n_texture, "n_items": self.n_items,
                "defined": self.defined}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path


def bias_from_predictions(preds, shape_labels, texture_labels) -> BiasResult:
    preds = np.asarray(preds)
    s = np.asarray(shape_labels)
    t = np.asarray(texture_labels)
    if len(preds) == 0:
        raise EmptyDatasetError("no cue-conflict items")
    n_s = int(np.sum(preds == s))
    n_t = int(np.sum(preds == t))
    denom = n_s + n_t
    if denom == 0:
        return BiasResult(None, None, 0.0, 0, 0, len(preds))
    sb = n_s / denom
    return BiasResult(sb, 1.0 - sb, denom / len(preds), n_s, n_t, len(preds))


def evaluate_shape_bias(classifier, items) -> BiasResult:
    """Share of shape-label predictions among items predicted as either cue.

    ``classifier`` maps a uint8 image batch (N, H, W, 3) to predicted class
    ids in the items' label space.  ``shape_bias`` is ``None`` (not NaN) when
    no item is predicted as either label.
    """
    items = list(items)
    if not items:
        raise EmptyDatasetError("no cue-conflict items")
    preds = np.asarray(classifier(np.stack([it.image for it in items])))
    return bias_from_predictions(preds, [it.shape_label for it in items], [it.texture_label for it in items])


def cue_conflict_items(manifest: DatasetManifest) -> list:
    """Items of a generated cue-conflict set (class id = silhouette, attrs['texture_label'] = texture class)."""
    out = []
    for it in manifest.items:
        if "texture_label" not in it.attrs:
            raise ConfigError(f"item {it.image_id} has no texture_label")
        out.append(CueConflictItem(manifest.image(it), int(it.class_id), int(it.attrs["texture_label"]), it.image_id))
    return out


def classifier_predictor(model, batch_size: int = 128):
    """Wrap a trained :class:`~shapeprobe.training.Classifier` to predict one-based class ids."""
    from .training import predict

    return lambda images: predict(model, images, batch_size) + 1
