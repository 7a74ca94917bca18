"""Procedural tileable textures and silhouette rasterisation.

Everything here is a pure function of its arguments; randomness only enters
through explicit ``numpy.random.Generator`` objects or integer seeds.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

PATTERNS = ("stripes", "checker", "dots", "waves", "grid", "blobs", "zigzag", "rings")

# Base hues (RGB in [0, 1]); a texture alternates a hue with a darker shade of
# itself.  The palette index doubles as a colour concept id.
HUES = (
    (0.90, 0.20, 0.15),
    (0.15, 0.50, 0.95),
    (0.20, 0.80, 0.25),
    (0.95, 0.85, 0.20),
    (0.70, 0.30, 0.90),
    (0.95, 0.55, 0.10),
    (0.85, 0.85, 0.85),
    (0.20, 0.85, 0.80),
    (0.60, 0.40, 0.25),
    (0.95, 0.45, 0.70),
)
SHADE = 0.55
PALETTES = tuple((h, tuple(SHADE * c for c in h)) for h in HUES)

SHAPE_FAMILIES = ("triangle", "square", "circle", "star", "cross", "hexagon", "crescent", "arrow")


def stable_seed(*parts) -> int:
    """Process-independent 32-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


@dataclass(frozen=True)
class TextureSpec:
    pattern: str
    period: float
    angle: float
    palette: int
    jitter: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["jitter"] = list(self.jitter)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            pattern=d["pattern"],
            period=float(d["period"]),
            angle=float(d["angle"]),
            palette=int(d["palette"]),
            jitter=tuple(float(v) for v in d.get("jitter", (0.0, 0.0, 0.0))),
            seed=int(d.get("seed", 0)),
        )

    @property
    def pattern_id(self) -> int:
        return PATTERNS.index(self.pattern)


def random_texture(rng: np.random.Generator, pattern=None, palette=None, jitter_scale=0.0,
                   period_range=(3.0, 7.0)) -> TextureSpec:
    if pattern is None:
        pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
    if palette is None:
        palette = int(rng.integers(len(PALETTES)))
    period = float(rng.uniform(*period_range))
    angle = float(rng.uniform(0.0, np.pi))
    jitter = tuple(float(v) for v in rng.uniform(-jitter_scale, jitter_scale, size=3))
    return TextureSpec(pattern, period, angle, int(palette), jitter, int(rng.integers(2**31)))


def _pattern_field(spec: TextureSpec, size: int, offset=(0.0, 0.0)) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = yy + offset[0]
    xx = xx + offset[1]
    c, s = np.cos(spec.angle), np.sin(spec.angle)
    u = (xx * c + yy * s) / spec.period
    v = (-xx * s + yy * c) / spec.period
    p = spec.pattern
    if p == "stripes":
        f = (np.sin(2 * np.pi * u) > 0).astype(np.float64)
    elif p == "checker":
        f = ((np.floor(u) + np.floor(v)) % 2).astype(np.float64)
    elif p == "dots":
        du = u - np.round(u)
        dv = v - np.round(v)
        f = (du**2 + dv**2 < 0.09).astype(np.float64)
    elif p == "waves":
        f = 0.5 + 0.5 * np.sin(2 * np.pi * u) * np.sin(2 * np.pi * v)
    elif p == "grid":
        du = np.abs(u - np.round(u))
        dv = np.abs(v - np.round(v))
        f = ((du < 0.15) | (dv < 0.15)).astype(np.float64)
    elif p == "blobs":
        rng = np.random.default_rng(spec.seed)
        pad, span = 8, 32
        noise = rng.standard_normal((size + 2 * pad + span, size + 2 * pad + span))
        sm = gaussian_filter(noise, sigma=spec.period / 3.0, mode="wrap")
        oy = pad + int(offset[0]) % span
        ox = pad + int(offset[1]) % span
        sm = sm[oy : oy + size, ox : ox + size]
        f = (sm > 0).astype(np.float64)
    elif p == "zigzag":
        tri = np.abs((v * 2) % 2 - 1)
        f = (np.sin(2 * np.pi * (u + 0.5 * tri)) > 0).astype(np.float64)
    elif p == "rings":
        r = np.sqrt(u**2 + v**2)
        f = (np.sin(2 * np.pi * r) > 0).astype(np.float64)
    else:
        raise ValueError(f"unknown texture pattern {p!r}")
    return f


def render_texture(spec: TextureSpec, size: int, offset=(0.0, 0.0)) -> np.ndarray:
    """Render ``spec`` as a float RGB array in [0, 1] of shape (size, size, 3)."""
    f = _pattern_field(spec, size, offset)[..., None]
    a, b = (np.asarray(col, dtype=np.float64) for col in PALETTES[spec.palette])
    img = a * f + b * (1.0 - f) + np.asarray(spec.jitter, dtype=np.float64)
    return np.clip(img, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _polygon(family: str, cx, cy, r, rot):
    def ring(n, radius, phase=0.0):
        t = rot + phase + 2 * np.pi * np.arange(n) / n
        return [(cx + radius * np.cos(a), cy + radius * np.sin(a)) for a in t]

    if family == "triangle":
        return ring(3, r)
    if family == "square":
        return ring(4, r)
    if family == "hexagon":
        return ring(6, r)
    if family == "circle":
        return ring(48, r * 0.85)
    if family == "star":
        outer = ring(5, r)
        inner = ring(5, r * 0.42, np.pi / 5)
        return [p for pair in zip(outer, inner) for p in pair]
    if family == "cross":
        w = 0.36 * r
        pts = [(-w, -r), (w, -r), (w, -w), (r, -w), (r, w), (w, w), (w, r), (-w, r),
               (-w, w), (-r, w), (-r, -w), (-w, -w)]
    elif family == "arrow":
        pts = [(-r, -0.3 * r), (0.1 * r, -0.3 * r), (0.1 * r, -0.8 * r), (r, 0.0),
               (0.1 * r, 0.8 * r), (0.1 * r, 0.3 * r), (-r, 0.3 * r)]
    elif family == "crescent":
        t = np.linspace(-0.8 * np.pi, 0.8 * np.pi, 24)
        outer_pts = [(r * np.cos(a), r * np.sin(a)) for a in t]
        inner_pts = [(0.35 * r + 0.7 * r * np.cos(a), 0.7 * r * np.sin(a)) for a in t[::-1]]
        pts = outer_pts + inner_pts
    else:
        raise ValueError(f"unknown shape family {family!r}")
    c, s = np.cos(rot), np.sin(rot)
    return [(cx + x * c - y * s, cy + x * s + y * c) for x, y in pts]


def render_silhouette(family: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean (size, size) silhouette with random pose."""
    r = float(rng.uniform(0.30, 0.42)) * size
    margin = r * 0.8
    cx = float(rng.uniform(margin, size - margin))
    cy = float(rng.uniform(margin, size - margin))
    rot = float(rng.uniform(0, 2 * np.pi))
    im = Image.new("L", (size, size), 0)
    ImageDraw.Draw(im).polygon(_polygon(family, cx, cy, r, rot), fill=1)
    return np.asarray(im, dtype=bool)


def composite(mask: np.ndarray, fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    return np.where(mask[..., None], fg, bg)
