"""Superpixels, probability fusion, vote labeling, rendering, scoring."""

import numpy as np
import pytest
from PIL import Image

from ftmnet.data import PatchGrid, tile_image
from ftmnet.errors import ConfigError, ContractError, DimensionError, TaxonomyError
from ftmnet.mapping import (
    Segmentation,
    build_land_cover_map,
    classify_patches,
    decode_map,
    default_palette,
    fine_to_coarse,
    label_superpixels,
    paint_raster,
    patch_majority,
    render_map,
    score_map,
    slic_segment,
    votes_to_csv,
)
from ftmnet.network import build_model, desk_config


def grid_for(h, w, patch, stride=None):
    img = np.broadcast_to(np.zeros(1, dtype=np.float32), (3, h, w))
    return tile_image(img, patch, stride if stride is not None else patch)


def one_segment(h, w):
    return Segmentation(labels=np.zeros((h, w), dtype=np.int64), n_segments=1, n_requested=1)


# ---------------------------------------------------------------------------
# SLIC
# ---------------------------------------------------------------------------


def test_slic_single_segment():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(3, 20, 30)).astype(np.float32)
    seg = slic_segment(img, 1)
    assert seg.n_segments == 1
    assert np.all(seg.labels == 0)


def test_slic_uniform_image_quarters_evenly():
    img = np.full((3, 64, 64), 0.5, dtype=np.float32)
    seg = slic_segment(img, 4)
    assert seg.n_segments == 4
    counts = np.bincount(seg.labels.ravel())
    assert counts.sum() == 64 * 64
    assert np.all(counts >= 1024 * 0.8)
    assert np.all(counts <= 1024 * 1.2)


def test_slic_two_color_halves_split_on_the_color_edge():
    img = np.zeros((3, 64, 64), dtype=np.float32)
    img[0, :, :32] = 1.0  # left red
    img[2, :, 32:] = 1.0  # right blue
    seg = slic_segment(img, 2)
    assert seg.n_segments == 2
    labels = seg.labels
    assert np.all(labels[:, :31] == labels[0, 0])
    assert np.all(labels[:, 34:] == labels[0, -1])
    assert labels[0, 0] != labels[0, -1]
    boundary_cols = np.nonzero(labels[:, 1:] != labels[:, :-1])[1]
    assert boundary_cols.size >= 64
    assert boundary_cols.min() >= 30 and boundary_cols.max() <= 33


def test_slic_labels_form_a_compact_partition():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(3, 48, 40)).astype(np.float32)
    seg = slic_segment(img, 12)
    assert 1 <= seg.n_segments <= 12
    assert seg.n_requested == 12
    counts = np.bincount(seg.labels.ravel(), minlength=seg.n_segments)
    assert counts.shape[0] == seg.n_segments  # ids are contiguous from 0
    assert np.all(counts > 0)
    assert counts.sum() == 48 * 40


def test_slic_segments_are_connected():
    rng = np.random.default_rng(8)
    img = rng.uniform(size=(3, 32, 32)).astype(np.float32)
    seg = slic_segment(img, 9)
    # flood fill each label from one seed pixel; must reach every pixel of it
    for label in range(seg.n_segments):
        mask = seg.labels == label
        seen = np.zeros_like(mask)
        ys, xs = np.nonzero(mask)
        stack = [(ys[0], xs[0])]
        seen[ys[0], xs[0]] = True
        while stack:
            y, x = stack.pop()
            for ny, nx in ((y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)):
                if 0 <= ny < 32 and 0 <= nx < 32 and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
        assert seen.sum() == mask.sum(), f"segment {label} is disconnected"


def test_slic_rejects_bad_arguments():
    img = np.zeros((3, 8, 8), dtype=np.float32)
    with pytest.raises(ConfigError):
        slic_segment(img, 0)
    with pytest.raises(ConfigError):
        slic_segment(img, 65)
    with pytest.raises(ConfigError):
        slic_segment(img, 4, compactness=0.0)


# ---------------------------------------------------------------------------
# probability fusion
# ---------------------------------------------------------------------------


def test_fine_to_coarse_sums_subclass_mass():
    probs = np.array([[0.2, 0.1, 0.3, 0.4]])
    out = fine_to_coarse(probs, np.array([0, 0, 0, 1]), 2)
    assert np.allclose(out, [[0.6, 0.4]])


def test_fine_to_coarse_identity_taxonomy():
    rng = np.random.default_rng(1)
    probs = rng.dirichlet(np.ones(5), size=4)
    out = fine_to_coarse(probs, np.arange(5), 5)
    assert np.allclose(out, probs)


def test_fine_to_coarse_uniform_symmetry():
    probs = np.full((2, 15), 1.0 / 15.0)
    out = fine_to_coarse(probs, np.repeat(np.arange(5), 3), 5)
    assert np.allclose(out, 0.2)


def test_fine_to_coarse_conserves_mass():
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(9), size=6)
    lut = rng.integers(0, 4, size=9)
    out = fine_to_coarse(probs, lut, 4)
    assert np.allclose(out.sum(axis=1), probs.sum(axis=1), atol=1e-6)


def test_fine_to_coarse_rejects_bad_lut():
    probs = np.full((1, 4), 0.25)
    with pytest.raises(TaxonomyError):
        fine_to_coarse(probs, np.array([0, 1]), 2)  # wrong length
    with pytest.raises(TaxonomyError):
        fine_to_coarse(probs, np.array([0, 1, 2, 3]), 3)  # entry out of range


# ---------------------------------------------------------------------------
# vote fusion
# ---------------------------------------------------------------------------


def test_superpixel_fully_inside_one_patch_takes_its_label():
    seg = one_segment(8, 8)
    grid = grid_for(8, 8, 8)
    labels, votes = label_superpixels(seg, grid, np.array([1]), n_classes=2)
    assert labels.tolist() == [1]
    assert votes.tolist() == [[0, 64]]


def test_superpixel_weighted_majority():
    # one segment under 10 patches: 6 patches of class 1, 4 of class 0
    seg = one_segment(10, 100)
    grid = grid_for(10, 100, 10)
    patch_labels = np.array([1, 1, 1, 1, 1, 1, 0, 0, 0, 0])
    labels, votes = label_superpixels(seg, grid, patch_labels, n_classes=2)
    assert votes.tolist() == [[400, 600]]
    assert labels.tolist() == [1]


def test_superpixel_tie_breaks_to_smaller_class_index():
    seg = one_segment(10, 100)
    grid = grid_for(10, 100, 10)
    patch_labels = np.array([1, 1, 1, 1, 1, 0, 0, 0, 0, 0])
    labels, votes = label_superpixels(seg, grid, patch_labels, n_classes=3)
    assert votes.tolist() == [[500, 500, 0]]
    assert labels.tolist() == [0]


def test_superpixel_split_across_patch_boundary():
    # segment edge at column 55 does not align with the 50-pixel patches
    labels_raster = np.zeros((10, 100), dtype=np.int64)
    labels_raster[:, 55:] = 1
    seg = Segmentation(labels=labels_raster, n_segments=2, n_requested=2)
    grid = grid_for(10, 100, 10)
    patch_labels = np.array([0] * 5 + [1] * 5)
    labels, votes = label_superpixels(seg, grid, patch_labels, n_classes=2)
    assert votes[0].tolist() == [500, 50]
    assert votes[1].tolist() == [0, 450]
    assert labels.tolist() == [0, 1]


def test_winner_holds_the_vote_plurality():
    rng = np.random.default_rng(3)
    raster = rng.integers(0, 5, size=(40, 40))
    seg = Segmentation(labels=raster, n_segments=5, n_requested=5)
    grid = grid_for(40, 40, 8)
    patch_labels = rng.integers(0, 3, size=len(grid))
    labels, votes = label_superpixels(seg, grid, patch_labels, n_classes=3)
    assert np.array_equal(labels, votes.argmax(axis=1))
    assert np.all(votes[np.arange(5), labels] == votes.max(axis=1))


def test_label_superpixels_rejects_mismatched_grids():
    seg = one_segment(8, 8)
    grid = grid_for(8, 8, 8)
    with pytest.raises(ContractError):
        label_superpixels(seg, grid, np.array([0, 1]), n_classes=2)
    with pytest.raises(ContractError):
        label_superpixels(seg, grid, np.array([5]), n_classes=2)


def test_paint_raster_expands_segment_labels():
    labels_raster = np.array([[0, 0, 1], [2, 2, 1]], dtype=np.int64)
    seg = Segmentation(labels=labels_raster, n_segments=3, n_requested=3)
    out = paint_raster(seg, np.array([7, 8, 9]))
    assert out.tolist() == [[7, 7, 8], [9, 9, 8]]


# ---------------------------------------------------------------------------
# classification plumbing
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def probe_model():
    return build_model(desk_config(num_classes=4, image_size=32), seed=6)


@pytest.fixture(scope="module")
def probe_image():
    rng = np.random.default_rng(7)
    return rng.uniform(size=(3, 64, 64)).astype(np.float32)


def test_classify_patches_probability_contract(probe_model, probe_image):
    grid = tile_image(probe_image, 32, 32)
    probs = classify_patches(probe_model, probe_image, grid)
    assert probs.shape == (4, 4)
    assert probs.min() >= 0.0
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)


def test_classify_patches_duplicate_patch_identical(probe_model, probe_image):
    grid = PatchGrid(patch_size=32, origins=((0, 0), (0, 32), (0, 0)), height=64, width=64)
    probs = classify_patches(probe_model, probe_image, grid)
    assert np.array_equal(probs[0], probs[2])


def test_classify_patches_batch_size_invariant(probe_model, probe_image):
    grid = tile_image(probe_image, 32, 16)
    a = classify_patches(probe_model, probe_image, grid, batch_size=1)
    b = classify_patches(probe_model, probe_image, grid, batch_size=32)
    assert np.max(np.abs(a - b)) < 1e-5


def test_classify_patches_resizes_to_model_resolution(probe_image):
    model = build_model(desk_config(num_classes=4, image_size=16), seed=6)
    grid = tile_image(probe_image, 32, 32)
    probs = classify_patches(model, probe_image, grid)
    assert probs.shape == (4, 4)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)


def test_build_land_cover_map_contract(probe_model, probe_image):
    names = ["a", "b", "c", "d"]
    lcm = build_land_cover_map(probe_model, probe_image, names, n_segments=10, patch_size=32, stride=16)
    assert lcm.class_raster.shape == (64, 64)
    assert lcm.class_raster.min() >= 0 and lcm.class_raster.max() < 4
    assert lcm.votes.shape == (lcm.segmentation.n_segments, 4)
    assert np.all(lcm.votes.sum(axis=1) > 0)
    assert np.array_equal(lcm.class_raster, paint_raster(lcm.segmentation, lcm.segment_labels))

    again = build_land_cover_map(probe_model, probe_image, names, n_segments=10, patch_size=32, stride=16)
    assert np.array_equal(lcm.class_raster, again.class_raster)


def test_build_land_cover_map_with_grouping(probe_model, probe_image):
    lcm = build_land_cover_map(
        probe_model, probe_image, ["x", "y"], n_segments=6, patch_size=32,
        lut=np.array([0, 0, 1, 1]),
    )
    assert lcm.class_raster.max() < 2
    assert lcm.votes.shape[1] == 2


def test_build_land_cover_map_rejects_name_count_mismatch(probe_model, probe_image):
    with pytest.raises(ContractError):
        build_land_cover_map(probe_model, probe_image, ["only", "two"], n_segments=6, patch_size=32)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def test_patch_majority_ties_to_smaller_id():
    raster = np.zeros((4, 8), dtype=np.int64)
    raster[:, 4:] = 3
    grid = grid_for(4, 8, 4, 4)
    assert patch_majority(raster, grid, 4).tolist() == [0, 3]
    half = np.repeat([[1], [2]], [2, 2], axis=0) * np.ones((1, 4), dtype=np.int64)
    grid1 = grid_for(4, 4, 4)
    assert patch_majority(half, grid1, 3).tolist() == [1]  # 8 vs 8 tie -> smaller id


def test_score_map_perfect_prediction():
    truth = np.repeat(np.arange(3), 8 * 8 * 8 // 3 + 1)[: 8 * 24].reshape(8, 24)
    grid = grid_for(8, 24, 8)
    scores = score_map(truth, truth, grid, ["a", "b", "c"])
    assert scores["accuracy"] == 1.0
    assert scores["macro_f1"] == 1.0


def test_score_map_hand_case_at_patch_granularity():
    # three patches: pred [A,A,B], truth [A,B,B]
    grid = grid_for(8, 24, 8)
    pred = np.zeros((8, 24), dtype=np.int64)
    pred[:, 16:] = 1
    truth = np.zeros((8, 24), dtype=np.int64)
    truth[:, 8:] = 1
    scores = score_map(pred, truth, grid, ["A", "B"])
    assert scores["accuracy"] == pytest.approx(2 / 3)
    assert scores["macro_f1"] == pytest.approx(2 / 3)
    assert scores["confusion"].total == 3


def test_score_map_excludes_class_missing_from_both(probe_image):
    grid = grid_for(8, 24, 8)
    pred = np.zeros((8, 24), dtype=np.int64)
    pred[:, 16:] = 1
    truth = np.zeros((8, 24), dtype=np.int64)
    truth[:, 8:] = 1
    with_ghost = score_map(pred, truth, grid, ["A", "B", "ghost"])
    assert with_ghost["present"]["ghost"] is False
    assert with_ghost["macro_f1"] == pytest.approx(2 / 3)


def test_score_map_rejects_shape_mismatch():
    grid = grid_for(8, 8, 8)
    with pytest.raises(DimensionError):
        score_map(np.zeros((8, 8), dtype=np.int64), np.zeros((8, 9), dtype=np.int64), grid, ["a"])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def test_render_decode_round_trip(tmp_path):
    raster = np.array([[0, 1], [1, 2]], dtype=np.int64)
    names = ["water", "farm", "urban"]
    palette = default_palette(names)
    path = tmp_path / "map.png"
    render_map(raster, names, palette, path)
    assert np.array_equal(decode_map(path, names, palette), raster)
    arr = np.asarray(Image.open(path).convert("RGB"))
    assert len({tuple(px) for px in arr.reshape(-1, 3)}) == 3


def test_render_rejects_missing_palette_entry(tmp_path):
    raster = np.zeros((2, 2), dtype=np.int64)
    with pytest.raises(ConfigError):
        render_map(raster, ["a", "b"], {"a": (1, 2, 3)}, tmp_path / "x.png")


def test_decode_rejects_unknown_colors(tmp_path):
    path = tmp_path / "odd.png"
    Image.fromarray(np.full((2, 2, 3), 123, dtype=np.uint8)).save(path)
    with pytest.raises(ConfigError):
        decode_map(path, ["a"], {"a": (0, 0, 0)})


def test_default_palette_colors_are_distinct():
    names = [f"c{i}" for i in range(12)]
    palette = default_palette(names)
    assert len(set(palette.values())) == 12


def test_votes_csv_audit(tmp_path, probe_model, probe_image):
    lcm = build_land_cover_map(
        probe_model, probe_image, ["a", "b", "c", "d"], n_segments=5, patch_size=32
    )
    path = tmp_path / "votes.csv"
    votes_to_csv(lcm, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "segment,winner,a,b,c,d"
    assert len(lines) == 1 + lcm.segmentation.n_segments
    first = lines[1].split(",")
    assert first[0] == "0"
    assert first[1] in {"a", "b", "c", "d"}
    # non-overlapping grid: each pixel votes once, so the tally is the segment size
    assert sum(int(v) for v in first[2:]) == int(np.bincount(lcm.segmentation.labels.ravel())[0])
