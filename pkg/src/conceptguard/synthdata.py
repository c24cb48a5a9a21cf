"""Procedural sprite concepts: specs, rendered images, masks and captions.

Each concept is a (shape, color, texture) sprite. Colors sit at the centers
of an 8-bin-per-channel quantization grid and always have at least one
channel far from mid-gray, while backgrounds stay near mid-gray; this keeps
foreground/background separable by a simple channel-distance threshold.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ArgumentError, ConfigurationError, DataError, PlacementError

DEFAULT_SIDE = 32
SUPERSAMPLE = 4

SHAPES = ("circle", "square", "triangle", "star", "cross")
TEXTURES = ("solid", "stripes", "dots")


def _bin_center(b: int) -> float:
    return (b + 0.5) / 8.0


# Color name -> 8-bin indices per channel. Every color has at least one
# channel in bin 0 or 7 (>= 0.4375 from mid-gray), so sprites never blend
# into the near-mid backgrounds below.
_PALETTE_BINS = {
    "red": (7, 0, 0),
    "green": (0, 7, 0),
    "blue": (0, 0, 7),
    "yellow": (7, 7, 0),
    "magenta": (7, 0, 7),
    "cyan": (0, 7, 7),
    "orange": (7, 3, 0),
    "purple": (4, 0, 7),
}
PALETTE = {
    name: tuple(_bin_center(b) for b in bins) for name, bins in _PALETTE_BINS.items()
}
COLOR_NAMES = tuple(PALETTE)

# Flat near-mid-gray background styles (base color; per-pixel noise added at
# render time). All channels within 0.13 of 0.5.
BACKGROUND_STYLES = {
    "plain": (0.56, 0.56, 0.56),
    "night": (0.42, 0.45, 0.60),
    "meadow": (0.44, 0.58, 0.44),
    "sand": (0.62, 0.56, 0.42),
}
BACKGROUND_NAMES = tuple(BACKGROUND_STYLES)

_BG_NOISE = 0.03
_COLOR_JITTER = 0.03
_SIZE_RANGE = (0.28, 0.55)

# Fill ratio of each shape within its bounding box (continuum area / bbox
# area); used to scale the bbox so mask coverage tracks size_frac**2.
_FILL_RATIO = {
    "circle": np.pi / 4.0,
    "square": 1.0,
    "triangle": 0.5,
    "star": 0.404,
    "cross": 0.5775,
}

_STAR_INNER = 0.55
_CROSS_ARM = 0.35


@dataclass(frozen=True)
class ConceptSpec:
    """Visual identity of one concept."""

    concept_id: int
    shape: str
    fill_color: tuple[float, float, float]
    texture: str
    size_frac: float


@dataclass(frozen=True)
class ConceptImage:
    """One rendered training image with its ground-truth mask."""

    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) bool, True = foreground
    caption_attributes: frozenset[str]


def color_name_for(rgb) -> str:
    """Nearest palette entry by squared RGB distance."""
    rgb = np.asarray(rgb, dtype=np.float64)
    best, best_d = None, np.inf
    for name in COLOR_NAMES:
        d = float(np.sum((rgb - np.asarray(PALETTE[name])) ** 2))
        if d < best_d:
            best, best_d = name, d
    return best


def generate_concept_spec(seed: int, concept_id: int) -> ConceptSpec:
    """Deterministic spec for (seed, concept_id).

    The (shape, color, texture) combination is drawn from a seed-permuted
    enumeration of all 120 combinations, so any two ids up to 120 differ in
    at least one attribute regardless of seed.
    """
    if concept_id < 1:
        raise ArgumentError(f"concept_id must be >= 1, got {concept_id}")
    combos = [
        (shape, cname, texture)
        for shape in SHAPES
        for cname in COLOR_NAMES
        for texture in TEXTURES
    ]
    perm = np.random.default_rng(seed).permutation(len(combos))
    shape, cname, texture = combos[perm[(concept_id - 1) % len(combos)]]

    rng = np.random.default_rng((seed, concept_id))
    size_frac = float(rng.uniform(*_SIZE_RANGE))
    base = np.asarray(PALETTE[cname])
    jitter = rng.uniform(-_COLOR_JITTER, _COLOR_JITTER, size=3)
    color = tuple(float(c) for c in base + jitter)
    return ConceptSpec(concept_id, shape, color, texture, size_frac)


def _shape_inside(shape: str, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Boolean inside-test over unit-bbox coordinates in [-1, 1]."""
    if shape == "circle":
        return xs * xs + ys * ys <= 1.0
    if shape == "square":
        return np.maximum(np.abs(xs), np.abs(ys)) <= 1.0
    if shape == "triangle":
        return (ys >= -1.0) & (ys <= 1.0) & (np.abs(xs) <= (1.0 - ys) / 2.0)
    if shape == "cross":
        inside_box = np.maximum(np.abs(xs), np.abs(ys)) <= 1.0
        return inside_box & ((np.abs(xs) <= _CROSS_ARM) | (np.abs(ys) <= _CROSS_ARM))
    if shape == "star":
        # Star polygon is star-shaped around the origin: fold the angle into
        # one half-sector and test against the outer->inner edge half-plane.
        theta = np.arctan2(ys, xs) - np.pi / 2.0
        sector = np.pi / 5.0
        phi = np.abs((theta + sector) % (2.0 * sector) - sector)
        r = np.hypot(xs, ys)
        px, py = r * np.cos(phi), r * np.sin(phi)
        # Edge from outer vertex A=(1, 0) to inner vertex B at angle 36 deg.
        bx = _STAR_INNER * np.cos(sector)
        by = _STAR_INNER * np.sin(sector)
        cross = (bx - 1.0) * (py - 0.0) - (by - 0.0) * (px - 1.0)
        return cross >= 0.0
    raise ConfigurationError(f"unknown shape {shape!r}")


def _rasterize_at(shape: str, half: float, center: tuple[float, float],
                  side: int) -> np.ndarray:
    n = side * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    ys = (coords[:, None] - center[0]) / half
    xs = (coords[None, :] - center[1]) / half
    sub = _shape_inside(shape, np.broadcast_to(xs, (n, n)), np.broadcast_to(ys, (n, n)))
    counts = sub.reshape(side, SUPERSAMPLE, side, SUPERSAMPLE).sum(axis=(1, 3))
    return counts >= (SUPERSAMPLE * SUPERSAMPLE) // 2


def _rasterize_mask(shape: str, size_frac: float, center: tuple[float, float],
                    side: int) -> np.ndarray:
    """Supersampled boolean mask with area matched to size_frac**2.

    Coverage is clamped into [0.04, 0.36] with a single deterministic
    rescale pass when rasterization noise pushes it over a bound.
    """
    half = size_frac * side / np.sqrt(_FILL_RATIO[shape]) / 2.0
    mask = _rasterize_at(shape, half, center, side)
    for _ in range(4):
        coverage = mask.mean()
        if coverage > 0.36:
            half *= float(np.sqrt(0.35 / coverage))
        elif 0.0 < coverage < 0.04:
            half *= float(np.sqrt(0.045 / coverage))
        else:
            break
        mask = _rasterize_at(shape, half, center, side)
    return mask


def _sprite_half_extent(spec: ConceptSpec, side: int) -> float:
    return spec.size_frac * side / np.sqrt(_FILL_RATIO[spec.shape]) / 2.0


def _texture_scale(texture: str, mask: np.ndarray, phase: int) -> np.ndarray:
    """Per-pixel brightness multiplier implementing the sprite texture."""
    h, w = mask.shape
    scale = np.ones((h, w), dtype=np.float32)
    if texture == "solid":
        return scale
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    if texture == "stripes":
        band = ((cols + phase) // 3) % 2 == 1
        scale[np.broadcast_to(band, (h, w))] = 0.75
        return scale
    if texture == "dots":
        dots = ((rows + phase) % 4 < 2) & ((cols + phase) % 4 < 2)
        scale[dots] = 0.75
        return scale
    raise ConfigurationError(f"unknown texture {texture!r}")


def _paint_sprite(pixels: np.ndarray, spec: ConceptSpec, mask: np.ndarray,
                  phase: int) -> None:
    scale = _texture_scale(spec.texture, mask, phase)
    color = np.asarray(spec.fill_color, dtype=np.float32)
    fg = mask[:, :, None] * (scale[:, :, None] * color[None, None, :])
    pixels[mask] = fg[mask]


def _background(style: str, side: int, rng: np.random.Generator) -> np.ndarray:
    if style not in BACKGROUND_STYLES:
        raise ConfigurationError(
            f"unknown background {style!r}; expected one of {BACKGROUND_NAMES}"
        )
    base = np.asarray(BACKGROUND_STYLES[style], dtype=np.float32)
    noise = rng.uniform(-_BG_NOISE, _BG_NOISE, size=(side, side, 3)).astype(np.float32)
    return np.clip(base[None, None, :] + noise, 0.0, 1.0)


def render_concept_images(spec: ConceptSpec, n: int, background: str,
                          rng_seed: int, side: int = DEFAULT_SIDE) -> list[ConceptImage]:
    """n images of `spec` on the named background with per-image jitter."""
    if n < 1:
        raise ArgumentError(f"n must be >= 1, got {n}")
    if background not in BACKGROUND_STYLES:
        raise ConfigurationError(
            f"unknown background {background!r}; expected one of {BACKGROUND_NAMES}"
        )
    rng = np.random.default_rng((rng_seed, spec.concept_id))
    caption = frozenset({spec.shape, color_name_for(spec.fill_color), background})
    half = _sprite_half_extent(spec, side)
    lo, hi = half + 1.0, side - half - 1.0
    if hi < lo:
        lo = hi = side / 2.0
    images = []
    for _ in range(n):
        pixels = _background(background, side, rng)
        u = rng.uniform(0.0, 1.0, size=2)
        center = (lo + float(u[0]) * (hi - lo), lo + float(u[1]) * (hi - lo))
        phase = int(rng.integers(0, 4))
        mask = _rasterize_mask(spec.shape, spec.size_frac, center, side)
        _paint_sprite(pixels, spec, mask, phase)
        images.append(ConceptImage(pixels, mask, caption))
    return images


def render_composition(specs: list[ConceptSpec], placements: list[tuple[float, float]],
                       background: str, side: int = DEFAULT_SIDE,
                       rng_seed: int = 0) -> tuple[np.ndarray, list[np.ndarray]]:
    """Compose several sprites on one canvas; returns (pixels, per-spec masks).

    Placements are (row, col) sprite centers. Sprites must stay fully inside
    the canvas and must not overlap.
    """
    if not 1 <= len(specs) <= 5:
        raise ArgumentError(f"need 1..5 specs, got {len(specs)}")
    if len(placements) != len(specs):
        raise ArgumentError("one placement per spec required")
    masks = []
    for spec, center in zip(specs, placements):
        half = _sprite_half_extent(spec, side)
        if not (half <= center[0] <= side - half and half <= center[1] <= side - half):
            raise PlacementError(
                f"sprite for concept {spec.concept_id} extends outside the canvas"
            )
        masks.append(_rasterize_mask(spec.shape, spec.size_frac, center, side))
    union = np.zeros((side, side), dtype=bool)
    for spec, mask in zip(specs, masks):
        if (union & mask).any():
            raise PlacementError("sprite placements overlap")
        union |= mask
    rng = np.random.default_rng((rng_seed, 0))
    pixels = _background(background, side, rng)
    for spec, mask in zip(specs, masks):
        _paint_sprite(pixels, spec, mask, phase=0)
    return pixels, masks


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)


def spec_to_dict(spec: ConceptSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["fill_color"] = list(spec.fill_color)
    return d


def spec_from_dict(d: dict) -> ConceptSpec:
    return ConceptSpec(
        concept_id=int(d["concept_id"]),
        shape=str(d["shape"]),
        fill_color=tuple(float(c) for c in d["fill_color"]),
        texture=str(d["texture"]),
        size_frac=float(d["size_frac"]),
    )


def write_concept_dir(dir_path: str, spec: ConceptSpec,
                      images: list[ConceptImage]) -> None:
    """Export one concept: img_{k}.png, mask_{k}.png and meta.json."""
    os.makedirs(dir_path, exist_ok=True)
    for k, img in enumerate(images):
        Image.fromarray(_to_uint8(img.pixels)).save(os.path.join(dir_path, f"img_{k}.png"))
        Image.fromarray(np.where(img.mask, 255, 0).astype(np.uint8), mode="L").save(
            os.path.join(dir_path, f"mask_{k}.png")
        )
    meta = {
        "spec": spec_to_dict(spec),
        "captions": [sorted(img.caption_attributes) for img in images],
    }
    with open(os.path.join(dir_path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_concept_dir(dir_path: str) -> tuple[ConceptSpec, list[ConceptImage]]:
    """Load a concept directory written by write_concept_dir."""
    meta_path = os.path.join(dir_path, "meta.json")
    if not os.path.isfile(meta_path):
        raise DataError(f"missing meta.json in {dir_path}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = spec_from_dict(meta["spec"])
    images = []
    for k, caption in enumerate(meta["captions"]):
        img_path = os.path.join(dir_path, f"img_{k}.png")
        mask_path = os.path.join(dir_path, f"mask_{k}.png")
        if not (os.path.isfile(img_path) and os.path.isfile(mask_path)):
            raise DataError(f"missing image/mask pair {k} in {dir_path}")
        pixels = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(mask_path)) >= 128
        images.append(ConceptImage(pixels, mask, frozenset(caption)))
    return spec, images
