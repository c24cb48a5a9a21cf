"""Replay set construction: focus, chrono-weighted composition, binding prompts.

Replay images come from the frozen pre-task model; backgrounds are stripped
(focus), several concepts are pasted onto one neutral canvas with
recency-interpolated weights, and each sample's binding-prompt rows couple
the concepts' shift embeddings through a shared trainable vector.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .errors import ArgumentError, ShapeError, StateError
from .registry import ConceptEntry
from .seeding import derive_seed

NEUTRAL_FILL = 0.5
FOREGROUND_THRESHOLD = 0.25
CHRONO_FAR = 0.6
CHRONO_NEAR = 0.2
SINGLE_CONCEPT_WEIGHT = 0.4


def concept_focus(pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep foreground pixels; replace background with the neutral fill."""
    if mask.shape != pixels.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match image {pixels.shape[:2]}")
    out = np.full_like(pixels, NEUTRAL_FILL)
    out[mask] = pixels[mask]
    return out


def estimate_foreground(pixels: np.ndarray,
                        threshold: float = FOREGROUND_THRESHOLD) -> np.ndarray:
    """Pixels whose max-channel distance from the neutral fill exceeds the
    threshold; sprites are saturated while backgrounds stay near mid-gray."""
    return np.abs(pixels - NEUTRAL_FILL).max(axis=-1) > threshold


def chrono_weights(n: int) -> list[float]:
    """Recency weights, farthest first: 0.6 down to 0.2, linear in rank."""
    if n < 1:
        raise ArgumentError(f"n must be >= 1, got {n}")
    if n == 1:
        return [SINGLE_CONCEPT_WEIGHT]
    span = CHRONO_FAR - CHRONO_NEAR
    return [CHRONO_FAR - span * k / (n - 1) for k in range(n)]


def binding_prompt(concepts: list[ConceptEntry], p_b: torch.Tensor) -> torch.Tensor:
    """Rows [alpha_c * s_c] elementwise-multiplied by the shared vector."""
    if p_b.ndim != 1:
        raise ShapeError("binding vector must be 1-D")
    rows = []
    for entry in concepts:
        if entry.s.shape != p_b.shape:
            raise ShapeError(
                f"shift dim {tuple(entry.s.shape)} != binding dim {tuple(p_b.shape)}"
            )
        rows.append(entry.alpha * entry.s * p_b)
    return torch.stack(rows)


@dataclass
class PoolImage:
    """One focused replay image with its estimated foreground mask."""

    pixels: np.ndarray  # (H, W, 3) float32, background = neutral fill
    mask: np.ndarray  # (H, W) bool


@dataclass
class ReplaySample:
    """One composed replay training image.

    `concepts` is in recency order (farthest first). `P` holds the
    binding-prompt rows at composition time; training recomputes them from
    the live shift/importance tensors so their gradients flow.
    """

    pixels: np.ndarray
    concepts: list[int]
    prompt_tokens: list[int]
    mu: float
    P: np.ndarray  # (len(concepts), d)


def generate_replay_pool(model, entries: list[ConceptEntry], per_concept: int,
                         seed: int) -> dict[int, list[PoolImage]]:
    """Sample per_concept focused images for every selected previous concept.

    `model` is a frozen pre-task snapshot exposing
    sample_images(concept_id, n, seed) -> (n, H, W, 3) array in [0, 1].
    """
    pool: dict[int, list[PoolImage]] = {}
    for entry in entries:
        cid = entry.concept_id
        images = model.sample_images(cid, per_concept, derive_seed(seed, "pool", cid))
        focused = []
        for img in images:
            mask = estimate_foreground(img)
            focused.append(PoolImage(concept_focus(img, mask), mask))
        pool[cid] = focused
    return pool


def _slot_grid(n_slots: int, side: int) -> list[tuple[int, int, int, int]]:
    """Non-overlapping slot rectangles (r0, c0, r1, c1), end-exclusive."""
    if n_slots == 1:
        return [(1, 1, side - 1, side - 1)]
    if n_slots == 2:
        half = side // 2
        return [(1, 1, side - 1, half - 1), (1, half + 1, side - 1, side - 1)]
    if n_slots <= 4:
        half = side // 2
        cells = []
        for r0, r1 in ((1, half - 1), (half + 1, side - 1)):
            for c0, c1 in ((1, half - 1), (half + 1, side - 1)):
                cells.append((r0, c0, r1, c1))
        return cells
    third = side // 3
    half = side // 2
    cells = []
    for r0, r1 in ((1, half - 1), (half + 1, side - 1)):
        for c0, c1 in ((1, third - 1), (third + 1, 2 * third - 1), (2 * third + 1, side - 1)):
            cells.append((r0, c0, r1, c1))
    return cells


def _resize_nearest(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum((np.arange(h) * arr.shape[0]) // h, arr.shape[0] - 1)
    cols = np.minimum((np.arange(w) * arr.shape[1]) // w, arr.shape[1] - 1)
    return arr[rows][:, cols]


def _cut_sprite(img: PoolImage) -> tuple[np.ndarray, np.ndarray]:
    """Crop the image to its foreground bounding box."""
    if not img.mask.any():
        return img.pixels, np.ones(img.mask.shape, dtype=bool)
    rows = np.where(img.mask.any(axis=1))[0]
    cols = np.where(img.mask.any(axis=0))[0]
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    return img.pixels[r0:r1, c0:c1], img.mask[r0:r1, c0:c1]


def place_sprites(sprites: list[tuple[np.ndarray, np.ndarray]], side: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, list[np.ndarray]]:
    """Paste sprites into disjoint slots on a neutral canvas."""
    canvas = np.full((side, side, 3), NEUTRAL_FILL, dtype=np.float32)
    slots = _slot_grid(len(sprites), side)
    chosen = rng.permutation(len(slots))[: len(sprites)]
    pasted_masks = []
    for (pix, msk), slot_idx in zip(sprites, chosen):
        r0, c0, r1, c1 = slots[slot_idx]
        sh, sw = r1 - r0, c1 - c0
        bh, bw = pix.shape[0], pix.shape[1]
        scale = min(sh / bh, sw / bw)
        th = max(1, min(sh, int(round(bh * scale))))
        tw = max(1, min(sw, int(round(bw * scale))))
        rp = _resize_nearest(pix, th, tw)
        rm = _resize_nearest(msk, th, tw)
        off_r = r0 + int(rng.integers(0, sh - th + 1))
        off_c = c0 + int(rng.integers(0, sw - tw + 1))
        region = canvas[off_r:off_r + th, off_c:off_c + tw]
        region[rm] = rp[rm]
        full = np.zeros((side, side), dtype=bool)
        full[off_r:off_r + th, off_c:off_c + tw] = rm
        pasted_masks.append(full)
    return canvas, pasted_masks


def recency_sorted(entries: list[ConceptEntry]) -> list[ConceptEntry]:
    """Ascending order index (farthest first); ties by concept id."""
    return sorted(entries, key=lambda e: (e.order_i, e.concept_id))


def compose_replay_set(pool: dict[int, list[PoolImage]],
                       entries: list[ConceptEntry], n_images: int,
                       prompt_fn, p_b: torch.Tensor, seed: int,
                       size_range: tuple[int, int] = (2, 5),
                       side: int = 32) -> list[ReplaySample]:
    """Compose n_images replay samples from the pool.

    Each sample places 2..min(5, len(entries)) distinct concepts (or the
    single available concept) at non-overlapping positions; its weight is
    the sum of the included concepts' chrono weights.
    """
    if n_images < 1:
        raise ArgumentError(f"n_images must be >= 1, got {n_images}")
    if not pool or not entries:
        raise StateError("replay pool is empty")
    for entry in entries:
        if entry.concept_id not in pool or not pool[entry.concept_id]:
            raise StateError(f"pool missing images for concept {entry.concept_id}")

    ordered = recency_sorted(entries)
    weights = chrono_weights(len(ordered))
    weight_by_id = {e.concept_id: w for e, w in zip(ordered, weights)}
    entry_by_id = {e.concept_id: e for e in ordered}

    rng = np.random.default_rng(derive_seed(seed, "compose"))
    lo = max(2, size_range[0])
    hi = min(size_range[1], 5, len(ordered))
    samples = []
    for _ in range(n_images):
        if len(ordered) == 1:
            chosen_ids = [ordered[0].concept_id]
        else:
            size = int(rng.integers(lo, hi + 1))
            picks = rng.choice(len(ordered), size=size, replace=False)
            chosen_ids = [ordered[i].concept_id for i in sorted(picks)]
        sprites = []
        for cid in chosen_ids:
            images = pool[cid]
            sprites.append(_cut_sprite(images[int(rng.integers(0, len(images)))]))
        canvas, _ = place_sprites(sprites, side, rng)
        mu = float(sum(weight_by_id[cid] for cid in chosen_ids))
        chosen_entries = [entry_by_id[cid] for cid in chosen_ids]
        with torch.no_grad():
            p_rows = binding_prompt(chosen_entries, p_b).cpu().numpy()
        samples.append(
            ReplaySample(
                pixels=canvas,
                concepts=chosen_ids,
                prompt_tokens=prompt_fn(chosen_ids),
                mu=mu,
                P=p_rows,
            )
        )
    return samples


def dump_replay_set(run_dir: str, task_index: int,
                    samples: list[ReplaySample]) -> None:
    """Write replay/{task}/sample_{k}.png plus a manifest for inspection."""
    out_dir = os.path.join(run_dir, "replay", str(task_index))
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    for k, s in enumerate(samples):
        arr = np.clip(np.rint(s.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(out_dir, f"sample_{k}.png"))
        manifest.append(
            {"concepts": s.concepts, "mu": s.mu, "prompt_tokens": s.prompt_tokens}
        )
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
