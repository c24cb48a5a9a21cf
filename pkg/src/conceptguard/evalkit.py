"""Alignment and forgetting metrics with a deterministic feature extractor.

Image features are a foreground-masked 8x8x8 RGB histogram concatenated
with log-scaled translation/scale-invariant shape moments of the mask,
unit-normalized. Text alignment is the fraction of prompt attributes a
rule-based detector finds in the image.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import synthdata
from .composer import estimate_foreground
from .errors import ArgumentError, ConfigurationError, ConsistencyError

_HIST_BINS = 8
_HIST_WEIGHT = np.sqrt(0.92)
_MOMENT_WEIGHT = np.sqrt(0.08)
_TEMPLATE_SIZE_FRAC = 0.4


def _hu_moments(mask: np.ndarray) -> np.ndarray:
    """Seven translation/scale-invariant moments of a binary mask."""
    m00 = float(mask.sum())
    if m00 == 0.0:
        return np.zeros(7)
    rows, cols = np.nonzero(mask)
    rows = rows.astype(np.float64)
    cols = cols.astype(np.float64)
    rbar, cbar = rows.mean(), cols.mean()
    dr, dc = rows - rbar, cols - cbar

    def eta(p, q):
        mu = float(np.sum(dc**p * dr**q))
        return mu / m00 ** (1.0 + (p + q) / 2.0)

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03, n21, n12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    h1 = n20 + n02
    h2 = (n20 - n02) ** 2 + 4 * n11**2
    h3 = (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2
    h4 = (n30 + n12) ** 2 + (n21 + n03) ** 2
    h5 = (n30 - 3 * n12) * (n30 + n12) * ((n30 + n12) ** 2 - 3 * (n21 + n03) ** 2) + (
        3 * n21 - n03
    ) * (n21 + n03) * (3 * (n30 + n12) ** 2 - (n21 + n03) ** 2)
    h6 = (n20 - n02) * ((n30 + n12) ** 2 - (n21 + n03) ** 2) + 4 * n11 * (
        n30 + n12
    ) * (n21 + n03)
    h7 = (3 * n21 - n03) * (n30 + n12) * ((n30 + n12) ** 2 - 3 * (n21 + n03) ** 2) - (
        n30 - 3 * n12
    ) * (n21 + n03) * (3 * (n30 + n12) ** 2 - (n21 + n03) ** 2)
    return np.array([h1, h2, h3, h4, h5, h6, h7])


def _log_scaled(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.log10(np.abs(values) + 1e-30)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


class HistogramMomentExtractor:
    """Deterministic stand-in for a learned image/text feature space."""

    def __init__(self):
        self._shape_templates = None

    def features(self, pixels: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Unit-norm feature of the foreground region."""
        if mask is None:
            mask = estimate_foreground(pixels)
        if not mask.any():
            mask = np.ones(pixels.shape[:2], dtype=bool)
        fg = pixels[mask]
        bins = np.clip((fg * _HIST_BINS).astype(int), 0, _HIST_BINS - 1)
        flat = (bins[:, 0] * _HIST_BINS + bins[:, 1]) * _HIST_BINS + bins[:, 2]
        hist = np.bincount(flat, minlength=_HIST_BINS**3).astype(np.float64)
        moments = _log_scaled(_hu_moments(mask))
        return np.concatenate(
            [_HIST_WEIGHT * _unit(hist), _MOMENT_WEIGHT * _unit(moments)]
        )

    # -- attribute detection -------------------------------------------------

    def _templates(self) -> dict[str, np.ndarray]:
        if self._shape_templates is None:
            self._shape_templates = {}
            for shape in synthdata.SHAPES:
                mask = synthdata._rasterize_mask(
                    shape, _TEMPLATE_SIZE_FRAC, (16.0, 16.0), 32
                )
                self._shape_templates[shape] = _log_scaled(_hu_moments(mask))
        return self._shape_templates

    def detect_shape(self, mask: np.ndarray) -> str | None:
        if not mask.any():
            return None
        sig = _log_scaled(_hu_moments(mask))
        best, best_d = None, np.inf
        for shape, tmpl in self._templates().items():
            d = float(np.sum((sig - tmpl) ** 2))
            if d < best_d:
                best, best_d = shape, d
        return best

    def detect_color(self, pixels: np.ndarray, mask: np.ndarray) -> str | None:
        if not mask.any():
            return None
        return synthdata.color_name_for(pixels[mask].mean(axis=0))

    def detect_background(self, pixels: np.ndarray, mask: np.ndarray) -> str | None:
        bg = pixels[~mask] if not mask.all() else pixels.reshape(-1, 3)
        if bg.size == 0:
            return None
        mean = bg.mean(axis=0)
        best, best_d = None, np.inf
        for name, rgb in synthdata.BACKGROUND_STYLES.items():
            d = float(np.sum((mean - np.asarray(rgb)) ** 2))
            if d < best_d:
                best, best_d = name, d
        return best

    def detect_attributes(self, pixels: np.ndarray,
                          mask: np.ndarray | None = None) -> set[str]:
        if mask is None:
            mask = estimate_foreground(pixels)
        detected = set()
        for value in (
            self.detect_shape(mask),
            self.detect_color(pixels, mask),
            self.detect_background(pixels, mask),
        ):
            if value is not None:
                detected.add(value)
        return detected

    @property
    def known_attributes(self) -> frozenset[str]:
        return frozenset(synthdata.SHAPES) | frozenset(synthdata.COLOR_NAMES) | frozenset(
            synthdata.BACKGROUND_NAMES
        )


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def image_alignment(generated: list, references: list, fx,
                    generated_masks: list | None = None,
                    reference_masks: list | None = None) -> float:
    """Mean pairwise cosine similarity between foreground features."""
    if not generated or not references:
        raise ArgumentError("image_alignment needs nonempty image sets")
    gen_masks = generated_masks or [None] * len(generated)
    ref_masks = reference_masks or [None] * len(references)
    gen_feats = [fx.features(img, m) for img, m in zip(generated, gen_masks)]
    ref_feats = [fx.features(img, m) for img, m in zip(references, ref_masks)]
    total = 0.0
    for g in gen_feats:
        for r in ref_feats:
            total += _cosine(g, r)
    return total / (len(gen_feats) * len(ref_feats))


def text_alignment(generated: list, prompt_attributes: set[str], fx,
                   generated_masks: list | None = None) -> float:
    """Mean fraction of prompt attributes detected per image."""
    if not generated:
        raise ArgumentError("text_alignment needs a nonempty image set")
    if not prompt_attributes:
        raise ArgumentError("prompt attribute set is empty")
    unknown = set(prompt_attributes) - fx.known_attributes
    if unknown:
        raise ConfigurationError(f"unknown attribute tags {sorted(unknown)}")
    gen_masks = generated_masks or [None] * len(generated)
    total = 0.0
    for img, mask in zip(generated, gen_masks):
        detected = fx.detect_attributes(img, mask)
        total += len(detected & set(prompt_attributes)) / len(prompt_attributes)
    return total / len(generated)


@dataclass
class AlignmentTable:
    """IA/TA values keyed by (checkpoint i, concept j), defined for i >= j."""

    ia: dict[tuple[int, int], float] = field(default_factory=dict)
    ta: dict[tuple[int, int], float] = field(default_factory=dict)

    def record(self, i: int, j: int, ia: float, ta: float) -> None:
        self.ia[(i, j)] = ia
        self.ta[(i, j)] = ta


def forgetting_per_concept(table: AlignmentTable, t: int) -> dict[int, tuple[float, float]]:
    """Worst historical drop per concept j in 1..t-1 at checkpoint t."""
    if t < 2:
        raise ArgumentError(f"forgetting undefined for t={t}")
    out = {}
    for j in range(1, t):
        for i in range(j, t + 1):
            if (i, j) not in table.ia or (i, j) not in table.ta:
                raise ConsistencyError(f"alignment table missing entry ({i}, {j})")
        fi = max(table.ia[(i, j)] for i in range(j, t)) - table.ia[(t, j)]
        ft = max(table.ta[(i, j)] for i in range(j, t)) - table.ta[(t, j)]
        out[j] = (fi, ft)
    return out


def forgetting(table: AlignmentTable, t: int) -> tuple[float, float]:
    """Mean over concepts of the per-concept forgetting; no clamping."""
    per = forgetting_per_concept(table, t)
    fi = sum(v[0] for v in per.values()) / len(per)
    ft = sum(v[1] for v in per.values()) / len(per)
    return fi, ft


# -- persistence -------------------------------------------------------------

METRICS_HEADER = "task_t,concept_j,IA,TA\n"


def append_metrics_row(path: str, t: int, j: int, ia: float, ta: float) -> None:
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(METRICS_HEADER)
        fh.write(f"{t},{j},{format(ia, '.17g')},{format(ta, '.17g')}\n")


def write_forgetting_json(path: str, fi: float, ft: float,
                          per_concept: dict[int, tuple[float, float]]) -> None:
    payload = {
        "FI": fi,
        "FT": ft,
        "per_concept": {
            str(j): {"FI": v[0], "FT": v[1]} for j, v in sorted(per_concept.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
