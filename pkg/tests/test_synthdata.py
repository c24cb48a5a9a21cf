import dataclasses
from collections import deque

import numpy as np
import pytest

from conceptguard import synthdata
from conceptguard.errors import ArgumentError, ConfigurationError, PlacementError
from conceptguard.synthdata import (
    BACKGROUND_STYLES,
    PALETTE,
    ConceptSpec,
    color_name_for,
    generate_concept_spec,
    load_concept_dir,
    render_composition,
    render_concept_images,
    write_concept_dir,
)


def _attribute_tuple(spec: ConceptSpec):
    quantized = tuple(min(int(c * 8), 7) for c in spec.fill_color)
    return (spec.shape, quantized, spec.texture)


def _flood_from_corners(mask: np.ndarray) -> np.ndarray:
    """BFS over non-mask pixels starting from the four corners."""
    h, w = mask.shape
    visited = np.zeros_like(mask, dtype=bool)
    queue = deque()
    for r, c in [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]:
        if not mask[r, c]:
            visited[r, c] = True
            queue.append((r, c))
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and not visited[rr, cc] and not mask[rr, cc]:
                visited[rr, cc] = True
                queue.append((rr, cc))
    return visited


def test_spec_deterministic():
    assert generate_concept_spec(0, 1) == generate_concept_spec(0, 1)


def test_spec_distinctness_ids_1_to_32():
    for seed in (0, 1, 7, 123):
        tuples = [_attribute_tuple(generate_concept_spec(seed, cid)) for cid in range(1, 33)]
        assert len(set(tuples)) == 32


def test_spec_seed_dependence_allowed():
    a = generate_concept_spec(1, 1)
    b = generate_concept_spec(0, 1)
    assert a.concept_id == b.concept_id == 1  # may otherwise differ freely


def test_spec_rejects_bad_id():
    with pytest.raises(ArgumentError):
        generate_concept_spec(0, 0)


def test_render_three_images_coverage_bounds():
    spec = generate_concept_spec(0, 1)
    images = render_concept_images(spec, 3, "plain", rng_seed=5)
    assert len(images) == 3
    for img in images:
        assert 0.04 <= img.mask.mean() <= 0.36


def test_render_max_size_coverage_upper_bound():
    for shape in synthdata.SHAPES:
        spec = ConceptSpec(1, shape, PALETTE["red"], "solid", 0.6)
        img = render_concept_images(spec, 1, "plain", rng_seed=0)[0]
        assert img.mask.mean() <= 0.36


def test_render_deterministic():
    spec = generate_concept_spec(0, 3)
    a = render_concept_images(spec, 4, "night", rng_seed=9)
    b = render_concept_images(spec, 4, "night", rng_seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x.pixels, y.pixels)
        assert np.array_equal(x.mask, y.mask)


def test_render_rejects_unknown_background():
    spec = generate_concept_spec(0, 1)
    with pytest.raises(ConfigurationError):
        render_concept_images(spec, 1, "void", rng_seed=0)


def test_foreground_matches_fill_color_within_tolerance():
    for cid in range(1, 9):
        spec = generate_concept_spec(2, cid)
        img = render_concept_images(spec, 1, "sand", rng_seed=cid)[0]
        fg = img.pixels[img.mask]
        diff = np.abs(fg - np.asarray(spec.fill_color))
        assert diff.max() <= 0.3


def test_captions_list_shape_color_background():
    spec = generate_concept_spec(0, 5)
    img = render_concept_images(spec, 1, "meadow", rng_seed=1)[0]
    assert spec.shape in img.caption_attributes
    assert color_name_for(spec.fill_color) in img.caption_attributes
    assert "meadow" in img.caption_attributes
    assert len(img.caption_attributes) == 3


def test_mask_flood_fill_never_reaches_sprite():
    rng = np.random.default_rng(0)
    for trial in range(100):
        cid = int(rng.integers(1, 33))
        seed = int(rng.integers(0, 10))
        bg = synthdata.BACKGROUND_NAMES[int(rng.integers(0, 4))]
        spec = generate_concept_spec(seed, cid)
        img = render_concept_images(spec, 1, bg, rng_seed=trial)[0]
        visited = _flood_from_corners(img.mask)
        assert not (visited & img.mask).any()
        # background is connected: every non-mask pixel is reachable
        assert (visited | img.mask).all()


def test_solid_renders_dominant_hue_matches_caption():
    count = 0
    for seed in range(4):
        for cid in range(1, 33):
            spec = generate_concept_spec(seed, cid)
            if spec.texture != "solid":
                continue
            count += 1
            img = render_concept_images(spec, 1, "plain", rng_seed=cid)[0]
            mean_fg = img.pixels[img.mask].mean(axis=0)
            assert color_name_for(mean_fg) in img.caption_attributes
    assert count > 10


def test_composition_single_concept_matches_direct_render():
    spec = dataclasses.replace(generate_concept_spec(0, 1), size_frac=0.4)
    pixels, masks = render_composition([spec], [(16.0, 16.0)], "plain")
    assert len(masks) == 1
    expected_mask = synthdata._rasterize_mask(spec.shape, spec.size_frac, (16.0, 16.0), 32)
    assert np.array_equal(masks[0], expected_mask)
    oracle = np.zeros((32, 32, 3), dtype=np.float32)
    synthdata._paint_sprite(oracle, spec, expected_mask, phase=0)
    assert np.array_equal(pixels[expected_mask], oracle[expected_mask])


def test_composition_two_concepts_disjoint_masks_with_pixel_count_oracle():
    a = dataclasses.replace(generate_concept_spec(0, 1), size_frac=0.3)
    b = dataclasses.replace(generate_concept_spec(0, 2), size_frac=0.3)
    pixels, masks = render_composition([a, b], [(16.0, 8.0), (16.0, 24.0)], "night")
    assert not (masks[0] & masks[1]).any()
    for mask in masks:
        count = int(mask.sum())
        assert 0.04 * 1024 <= count <= 0.36 * 1024
    assert pixels.shape == (32, 32, 3)


def test_composition_overlap_raises():
    a = dataclasses.replace(generate_concept_spec(0, 1), size_frac=0.3)
    b = dataclasses.replace(generate_concept_spec(0, 2), size_frac=0.3)
    with pytest.raises(PlacementError):
        render_composition([a, b], [(16.0, 15.0), (16.0, 17.0)], "plain")


def test_composition_outside_canvas_raises():
    a = dataclasses.replace(generate_concept_spec(0, 1), size_frac=0.5)
    with pytest.raises(PlacementError):
        render_composition([a], [(3.0, 3.0)], "plain")


def test_palette_colors_have_extreme_channel():
    for rgb in PALETTE.values():
        assert max(abs(c - 0.5) for c in rgb) >= 0.4


def test_background_styles_near_mid_gray():
    for rgb in BACKGROUND_STYLES.values():
        assert max(abs(c - 0.5) for c in rgb) <= 0.15


def test_export_round_trip(tmp_path):
    spec = generate_concept_spec(0, 2)
    images = render_concept_images(spec, 3, "sand", rng_seed=4)
    write_concept_dir(str(tmp_path / "c2"), spec, images)
    loaded_spec, loaded = load_concept_dir(str(tmp_path / "c2"))
    assert loaded_spec == spec
    assert len(loaded) == 3
    for orig, got in zip(images, loaded):
        assert np.array_equal(orig.mask, got.mask)
        assert np.abs(orig.pixels - got.pixels).max() <= 1.0 / 255.0 + 1e-6
        assert got.caption_attributes == orig.caption_attributes
