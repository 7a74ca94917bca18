"""Textured-shape datasets, stylisation and shape/texture pair sampling.

A *shape pair* is one base image rendered under two different styles; a
*texture pair* is two images of different classes rendered under the same
style.  Datasets live on disk as 8-bit RGB PNGs plus single-channel
class-indexed mask PNGs, described by a JSON manifest with relative paths.
"""
from __future__ import annotations

import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, InfeasiblePairError, StylizationError
from .textures import (
    PALETTES,
    PATTERNS,
    SHAPE_FAMILIES,
    TextureSpec,
    composite,
    random_texture,
    render_silhouette,
    render_texture,
    stable_seed,
    to_uint8,
)

SPLITS = ("train", "val")
TEXTURE_MODES = ("independent", "signature", "cue_conflict")


# --------------------------------------------------------------------------- io

def save_png(path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "L" if array.ndim == 2 else "RGB"
    Image.fromarray(array, mode=mode).save(path, format="PNG", optimize=False)


@lru_cache(maxsize=65536)
def _read_png(path: str, mtime_ns: int) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im).copy()
    arr.setflags(write=False)
    return arr


def read_png(path) -> np.ndarray:
    path = os.fspath(path)
    return _read_png(path, os.stat(path).st_mtime_ns)


# ---------------------------------------------------------------- domain types

@dataclass
class ManifestItem:
    image_id: str
    image_path: str
    mask_path: str
    class_id: int
    attrs: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"image_id": self.image_id, "image_path": self.image_path,
             "mask_path": self.mask_path, "class_id": self.class_id}
        if self.attrs:
            d["attrs"] = self.attrs
        return d


@dataclass
class DatasetManifest:
    """Image set with ground-truth masks.

    ``num_classes`` counts the background, so foreground class ids run from 1
    to ``num_classes - 1``.  Paths are relative to ``root``.
    """

    items: list
    num_classes: int
    split: str = "train"
    root: Path = Path(".")
    name: str = "dataset"

    def __post_init__(self):
        self.root = Path(self.root)
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        ids = [it.image_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ConfigError("image ids must be unique")
        for it in self.items:
            if not 0 <= it.class_id < self.num_classes:
                raise ConfigError(f"class id {it.class_id} of {it.image_id} outside [0, {self.num_classes})")
        self._by_id = {it.image_id: it for it in self.items}

    def __len__(self):
        return len(self.items)

    def item(self, image_id) -> ManifestItem:
        return self._by_id[image_id]

    def image(self, item) -> np.ndarray:
        return read_png(self.root / item.image_path)

    def mask(self, item) -> np.ndarray:
        return read_png(self.root / item.mask_path)

    @property
    def class_ids(self):
        return sorted({it.class_id for it in self.items})

    def check_sizes(self) -> None:
        for it in self.items:
            if self.image(it).shape[:2] != self.mask(it).shape:
                raise ConfigError(f"mask of {it.image_id} does not match its image size")

    def to_dict(self):
        return {"name": self.name, "split": self.split, "num_classes": self.num_classes,
                "items": [it.to_dict() for it in self.items]}

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        data = {}
        if path.exists():
            data = json.loads(path.read_text())
        data.update(self.to_dict())
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        items = [ManifestItem(d["image_id"], d["image_path"], d["mask_path"], int(d["class_id"]),
                              d.get("attrs", {})) for d in data["items"]]
        return cls(items, int(data["num_classes"]), data.get("split", "train"), path.parent,
                   data.get("name", path.parent.name))


@dataclass(frozen=True)
class Style:
    style_id: str
    texture_source: dict

    def textures(self):
        return TextureSpec.from_dict(self.texture_source["fg"]), TextureSpec.from_dict(self.texture_source["bg"])


def random_style(rng: np.random.Generator, style_id: str, jitter: float = 0.06) -> Style:
    """Foreground/background texture couple on two different palettes."""
    fg = random_texture(rng, jitter_scale=jitter)
    bg_palette = int((fg.palette + 1 + rng.integers(len(PALETTES) - 1)) % len(PALETTES))
    bg = random_texture(rng, palette=bg_palette, jitter_scale=jitter)
    return Style(style_id, {"fg": fg.to_dict(), "bg": bg.to_dict()})


@dataclass
class StyleBank:
    styles: list

    def __post_init__(self):
        if len(self.styles) < 2:
            raise ConfigError("a style bank needs at least two styles")
        ids = [s.style_id for s in self.styles]
        if len(set(ids)) != len(ids):
            raise ConfigError("style ids must be unique")
        self._by_id = {s.style_id: s for s in self.styles}

    @property
    def K(self) -> int:
        return len(self.styles)

    def __getitem__(self, style_id) -> Style:
        return self._by_id[style_id]

    @classmethod
    def procedural(cls, k: int = 5, seed: int = 0, jitter: float = 0.06) -> "StyleBank":
        """``k`` random styles, each a foreground/background texture couple.

        Foreground and background of a style never share a palette, so the
        silhouette stays visible after stylisation.
        """
        if k < 2:
            raise ConfigError("a style bank needs at least two styles")
        rng = np.random.default_rng(stable_seed("stylebank", k, seed))
        return cls([random_style(rng, f"s{i}", jitter) for i in range(k)])

    def to_dict(self):
        return {"styles": [{"style_id": s.style_id, "texture_source": s.texture_source} for s in self.styles]}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def from_dict(cls, data) -> "StyleBank":
        return cls([Style(d["style_id"], d["texture_source"]) for d in data["styles"]])

    @classmethod
    def load(cls, path) -> "StyleBank":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class StylizedRecord:
    image_id: str
    style_id: str
    stylized_image_path: str

    @property
    def key(self) -> str:
        return f"{self.image_id}/{self.style_id}"


@dataclass
class StylizedDataset:
    base: DatasetManifest
    bank: StyleBank
    records: list
    backend_id: str = "procedural"
    root: Path = None

    def __post_init__(self):
        self.root = Path(self.root) if self.root is not None else self.base.root
        per_image = {}
        for r in self.records:
            per_image.setdefault(r.image_id, set()).add(r.style_id)
        for it in self.base.items:
            if len(per_image.get(it.image_id, ())) != self.bank.K:
                raise ConfigError(f"image {it.image_id} needs exactly {self.bank.K} stylised records")
        self._by_key = {r.key: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def record(self, image_id, style_id) -> StylizedRecord:
        return self._by_key[f"{image_id}/{style_id}"]

    def class_of(self, record) -> int:
        return self.base.item(record.image_id).class_id

    def image(self, record) -> np.ndarray:
        return read_png(self.root / record.stylized_image_path)

    def mask(self, record) -> np.ndarray:
        return self.base.mask(self.base.item(record.image_id))

    def as_manifest(self, split=None, name=None) -> DatasetManifest:
        """Flatten to a plain manifest (one item per stylised record) for probes and training."""
        items = []
        for r in self.records:
            base_item = self.base.item(r.image_id)
            path = os.path.relpath(self.root / r.stylized_image_path, self.base.root)
            mask_path = base_item.mask_path
            attrs = dict(base_item.attrs, base_image_id=r.image_id, style_id=r.style_id)
            items.append(ManifestItem(r.key, path, mask_path, base_item.class_id, attrs))
        return DatasetManifest(items, self.base.num_classes, split or self.base.split, self.base.root,
                               name or f"{self.base.name}-stylized")

    def to_dict(self):
        return {"backend": self.backend_id, "bank": self.bank.to_dict(),
                "records": [{"image_id": r.image_id, "style_id": r.style_id,
                             "stylized_image_path": os.path.relpath(self.root / r.stylized_image_path,
                                                                    self.base.root)}
                            for r in self.records]}

    def save(self, path=None) -> Path:
        """Append the records to the base manifest under a ``stylized`` key."""
        path = Path(path) if path is not None else self.base.root / "manifest.json"
        data = json.loads(path.read_text()) if path.exists() else self.base.to_dict()
        data["stylized"] = self.to_dict()
        path.write_text(json.dumps(data, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "StylizedDataset":
        path = Path(path)
        base = DatasetManifest.load(path)
        data = json.loads(path.read_text())
        if "stylized" not in data:
            raise ConfigError(f"{path} has no stylized records")
        st = data["stylized"]
        records = [StylizedRecord(r["image_id"], r["style_id"], r["stylized_image_path"]) for r in st["records"]]
        return cls(base, StyleBank.from_dict(st["bank"]), records, st.get("backend", "procedural"), base.root)


@dataclass
class FreshlyStylized:
    """Training view of ``base`` where every draw renders each image under a newly sampled style.

    Nothing is written to disk.  A bank of a few styles lets an encoder learn
    style-specific shape cues; drawing an unbounded stream of styles is what
    forces style-invariant ones.
    """
    base: DatasetManifest
    seed: int = 0
    jitter: float = 0.06

    def __len__(self):
        return len(self.base)

    def draw(self, epoch_seed) -> np.ndarray:
        rng = np.random.default_rng(stable_seed("fresh-styles", self.seed, epoch_seed))
        stylizer = ProceduralStylizer(seed=stable_seed("fresh-offsets", self.seed, epoch_seed))
        out = []
        for it in self.base.items:
            style = random_style(rng, "fresh", self.jitter)
            out.append(stylizer.stylize(self.base.image(it), self.base.mask(it), style, it.image_id))
        return np.stack(out)


@dataclass
class ImagePairSet:
    factor: str
    pairs: list

    def __len__(self):
        return len(self.pairs)


# ------------------------------------------------------------------ generation

@dataclass
class GeneratorConfig:
    num_images: int = 120
    num_classes: int = 4
    image_size: int = 32
    seed: int = 0
    split: str = "train"
    texture_mode: str = "independent"
    name: str = "shapes"
    signature_prob: float = 1.0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.num_classes > len(SHAPE_FAMILIES):
            raise ConfigError(f"at most {len(SHAPE_FAMILIES)} silhouette families are available")
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        if self.num_images < 1:
            raise ConfigError("num_images must be >= 1")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")
        if self.texture_mode not in TEXTURE_MODES:
            raise ConfigError(f"texture_mode must be one of {TEXTURE_MODES}")
        if not (0.0 <= self.signature_prob <= 1.0):
            raise ConfigError("signature_prob must lie in [0, 1]")


def signature_texture(class_id: int, rng: np.random.Generator) -> TextureSpec:
    """Class-characteristic texture: fixed pattern and palette, random period and angle."""
    pattern = PATTERNS[(class_id - 1) % len(PATTERNS)]
    palette = (3 * (class_id - 1)) % len(PALETTES)
    return random_texture(rng, pattern=pattern, palette=palette)


def _background_for(fg: TextureSpec, rng) -> TextureSpec:
    palette = int((fg.palette + 1 + rng.integers(len(PALETTES) - 1)) % len(PALETTES))
    return random_texture(rng, palette=palette)


def render_item(config: GeneratorConfig, index: int, class_id: int):
    """Render one image; returns (rgb uint8, mask uint8, attrs)."""
    rng = np.random.default_rng(stable_seed("item", config.name, config.split, config.seed, index))
    family = SHAPE_FAMILIES[class_id - 1]
    sil = render_silhouette(family, config.image_size, rng)
    attrs = {"family": family}
    if config.texture_mode == "independent":
        fg = random_texture(rng)
    elif config.texture_mode == "signature":
        # draw unconditionally so the stream does not depend on signature_prob
        use_signature = rng.uniform() < config.signature_prob
        fg = signature_texture(class_id, rng) if use_signature else random_texture(rng)
        attrs["signature"] = bool(use_signature)
    else:
        others = [c for c in range(1, config.num_classes + 1) if c != class_id]
        tex_class = int(others[int(rng.integers(len(others)))])
        fg = signature_texture(tex_class, rng)
        attrs["texture_label"] = tex_class
    bg = _background_for(fg, rng)
    offset = tuple(rng.uniform(0, 16, size=2))
    img = composite(sil, render_texture(fg, config.image_size, offset), render_texture(bg, config.image_size, offset))
    attrs["fg_texture"] = fg.to_dict()
    attrs["bg_texture"] = bg.to_dict()
    mask = (sil * class_id).astype(np.uint8)
    return to_uint8(img), mask, attrs


def generate_textured_shapes(config: GeneratorConfig, out_dir) -> DatasetManifest:
    """Render a textured-shapes dataset into ``out_dir`` and write its manifest.

    ``config.num_classes`` is the number of silhouette families; the returned
    manifest's ``num_classes`` adds one for the background.  Classes are
    assigned round-robin and then shuffled, so counts differ by at most one.
    """
    config.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(stable_seed("classes", config.name, config.split, config.seed))
    labels = np.arange(config.num_images) % config.num_classes + 1
    labels = rng.permutation(labels)
    items = []
    for i, c in enumerate(labels):
        img, mask, attrs = render_item(config, i, int(c))
        image_id = f"{config.split}_{i:05d}"
        ip, mp = f"images/{image_id}.png", f"masks/{image_id}.png"
        save_png(out_dir / ip, img)
        save_png(out_dir / mp, mask)
        items.append(ManifestItem(image_id, ip, mp, int(c), attrs))
    manifest = DatasetManifest(items, config.num_classes + 1, config.split, out_dir, config.name)
    manifest.save()
    return manifest


# ----------------------------------------------------------------- stylisation

class StylizerBackend(Protocol):
    backend_id: str

    def stylize(self, image: np.ndarray, mask: np.ndarray, style: Style, image_id: str) -> np.ndarray: ...


class ProceduralStylizer:
    """Replace all appearance with the style's foreground/background textures.

    The silhouette is taken from the mask, so it is preserved pixel-exactly.
    """

    backend_id = "procedural"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def stylize(self, image, mask, style, image_id):
        size = image.shape[0]
        fg, bg = style.textures()
        rng = np.random.default_rng(stable_seed("stylize", image_id, style.style_id, self.seed))
        offset = tuple(rng.uniform(0, 16, size=2))
        out = composite(mask > 0, render_texture(fg, size, offset), render_texture(bg, size, offset))
        return to_uint8(out)


class ExternalStylizer:
    """Adapter around a user-supplied ``fn(content_rgb, style) -> rgb`` (e.g. an AdaIN model).

    Results are cached under ``cache_dir`` keyed by (image_id, style_id, backend_id).
    """

    def __init__(self, fn: Callable, cache_dir, backend_id: str = "external-adain"):
        self.fn = fn
        self.cache_dir = Path(cache_dir)
        self.backend_id = backend_id

    def _cache_path(self, image_id, style_id):
        return self.cache_dir / self.backend_id / style_id / f"{image_id}.png"

    def stylize(self, image, mask, style, image_id):
        path = self._cache_path(image_id, style.style_id)
        if path.exists():
            return np.asarray(read_png(path))
        out = np.asarray(self.fn(image, style))
        if out.dtype != np.uint8:
            out = to_uint8(out)
        if out.shape != image.shape:
            raise ValueError(f"stylizer returned shape {out.shape}, expected {image.shape}")
        save_png(path, out)
        return out


def stylize_dataset(dataset: DatasetManifest, bank: StyleBank, backend: StylizerBackend | None = None,
                    out_dir=None, workers: int = 1) -> StylizedDataset:
    """Render every base image under every style of ``bank``.

    Any backend failure aborts the whole run with a :class:`StylizationError`
    naming the offending image; no partial dataset is returned.
    """
    backend = backend or ProceduralStylizer()
    out_dir = Path(out_dir) if out_dir is not None else dataset.root
    jobs = [(it, st) for it in dataset.items for st in bank.styles]

    def run(job):
        it, st = job
        try:
            img = backend.stylize(dataset.image(it), dataset.mask(it), st, it.image_id)
        except Exception as exc:
            raise StylizationError(it.image_id, st.style_id, exc) from exc
        rel = f"stylized/{backend.backend_id}/{st.style_id}/{it.image_id}.png"
        save_png(out_dir / rel, img)
        return StylizedRecord(it.image_id, st.style_id, os.path.relpath(out_dir / rel, dataset.root))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(j) for j in jobs]
    return StylizedDataset(dataset, bank, records, backend.backend_id, dataset.root)


# -------------------------------------------------------------------- sampling

def _limit_to_int(limit, total):
    if limit is None or limit == "all":
        return total
    limit = int(limit)
    if limit < 0:
        raise ConfigError("pair limit must be non-negative")
    return min(limit, total)


def sample_pairs(sd: StylizedDataset, factor: str, limit="all", seed: int = 0) -> ImagePairSet:
    """Sample shape pairs or texture pairs from a stylised dataset.

    Shape mode enumerates all C(K, 2) style pairs of every image.  Texture
    mode draws same-style, cross-class pairs uniformly without replacement;
    ``limit=None`` means "as many as there are shape pairs".
    """
    K = sd.bank.K
    if K < 2:
        raise InfeasiblePairError("need at least two styles")
    style_ids = [s.style_id for s in sd.bank.styles]
    rng = np.random.default_rng(stable_seed("pairs", factor, seed))
    if factor == "shape":
        combos = list(itertools.combinations(style_ids, 2))
        pairs = [(sd.record(it.image_id, a), sd.record(it.image_id, b))
                 for it in sd.base.items for a, b in combos]
        n = _limit_to_int(limit, len(pairs))
        if n < len(pairs):
            keep = np.sort(rng.choice(len(pairs), size=n, replace=False))
            pairs = [pairs[i] for i in keep]
        return ImagePairSet("shape", pairs)
    if factor != "texture":
        raise ConfigError(f"unknown factor {factor!r}")
    items = sd.base.items
    labels = np.array([it.class_id for it in items])
    if len(set(labels.tolist())) < 2:
        raise InfeasiblePairError("texture pairs need at least two classes")
    ia, ib = np.triu_indices(len(items), k=1)
    cross = labels[ia] != labels[ib]
    ia, ib = ia[cross], ib[cross]
    total = len(ia) * K
    if limit is None:
        limit = len(items) * K * (K - 1) // 2
    n = _limit_to_int(limit, total)
    flat = np.sort(rng.choice(total, size=n, replace=False)) if n < total else np.arange(total)
    pairs = []
    for f in flat:
        s, p = divmod(int(f), len(ia))
        pairs.append((sd.record(items[ia[p]].image_id, style_ids[s]),
                      sd.record(items[ib[p]].image_id, style_ids[s])))
    return ImagePairSet("texture", pairs)


def check_pair_invariants(sd: StylizedDataset, ps: ImagePairSet) -> None:
    for a, b in ps.pairs:
        if ps.factor == "shape":
            assert a.image_id == b.image_id and a.style_id != b.style_id, (a, b)
        else:
            assert a.style_id == b.style_id and sd.class_of(a) != sd.class_of(b), (a, b)


def records_in(pair_sets: Sequence[ImagePairSet]) -> list:
    """Unique records referenced by the pair sets, in first-seen order."""
    seen = {}
    for ps in pair_sets:
        for a, b in ps.pairs:
            seen.setdefault(a.key, a)
            seen.setdefault(b.key, b)
    return list(seen.values())
