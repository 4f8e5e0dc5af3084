"""Land-cover mapping: superpixels + patch classification + vote fusion.

The pipeline tiles a scene into classifier-sized patches, predicts a
class per patch, oversegments the scene into superpixels, and labels
each superpixel by a pixel-overlap-weighted vote over the patches that
touch it. Scores are computed at patch level so they match what the
classifier actually saw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import kernels
from .autograd import Tensor, softmax_probs
from .data import PatchGrid, tile_image
from .errors import ConfigError, ContractError, DimensionError, NumericError, TaxonomyError
from .metrics import ConfusionMatrix, cm_scores
from .network import ModelState, forward_model


@dataclass
class Segmentation:
    """Superpixel assignment: labels[y, x] in [0, n_segments).

    n_segments is the realized count; merging during connectivity
    enforcement can leave it below n_requested, never above.
    """

    labels: np.ndarray
    n_segments: int
    n_requested: int


@dataclass
class LandCoverMap:
    class_raster: np.ndarray  # [H, W] class ids
    segmentation: Segmentation
    segment_labels: np.ndarray  # [n_segments]
    votes: np.ndarray  # [n_segments, n_classes] overlap pixel counts
    class_names: list[str]


# ---------------------------------------------------------------------------
# SLIC
# ---------------------------------------------------------------------------


def _connected_components(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """4-connected components of equal-label regions via row runs + union-find.

    Returns (comp raster, comp sizes, comp segment-label). Component ids
    are assigned in row-major order of first appearance.
    """
    h, w = labels.shape
    runs: list[tuple[int, int, int, int]] = []  # (row, x0, x1, label)
    row_runs: list[list[int]] = []
    for y in range(h):
        row = labels[y]
        cuts = np.nonzero(row[1:] != row[:-1])[0] + 1
        starts = np.concatenate(([0], cuts))
        ends = np.concatenate((cuts, [w]))
        ids = []
        for x0, x1 in zip(starts, ends):
            ids.append(len(runs))
            runs.append((y, int(x0), int(x1), int(row[x0])))
        row_runs.append(ids)

    parent = list(range(len(runs)))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            # keep the smaller root so component ids follow first appearance
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb

    for y in range(1, h):
        up = row_runs[y - 1]
        cur = row_runs[y]
        i = j = 0
        while i < len(up) and j < len(cur):
            ua, ub = runs[up[i]][1], runs[up[i]][2]
            ca, cb = runs[cur[j]][1], runs[cur[j]][2]
            if ua < cb and ca < ub and runs[up[i]][3] == runs[cur[j]][3]:
                union(up[i], cur[j])
            if ub <= cb:
                i += 1
            else:
                j += 1

    root_to_comp: dict[int, int] = {}
    comp = np.empty((h, w), dtype=np.int64)
    sizes: list[int] = []
    seg_label: list[int] = []
    for rid, (y, x0, x1, lab) in enumerate(runs):
        r = find(rid)
        cid = root_to_comp.get(r)
        if cid is None:
            cid = len(sizes)
            root_to_comp[r] = cid
            sizes.append(0)
            seg_label.append(lab)
        comp[y, x0:x1] = cid
        sizes[cid] += x1 - x0
    return comp, np.asarray(sizes, dtype=np.int64), np.asarray(seg_label, dtype=np.int64)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep the largest component of each segment; absorb the rest.

    Orphan components are merged, in component order, into the adjacent
    segment with the largest pixel area (ties to the smaller label).
    """
    comp, sizes, seg_label = _connected_components(labels)
    n_comp = sizes.shape[0]

    keep = {}
    for cid in range(n_comp):
        lab = int(seg_label[cid])
        best = keep.get(lab)
        if best is None or sizes[cid] > sizes[best]:
            keep[lab] = cid

    out = labels.copy()
    area = np.bincount(labels.ravel())
    h, w = labels.shape
    for cid in range(n_comp):
        if keep[int(seg_label[cid])] == cid:
            continue
        mask = comp == cid
        ys, xs = np.nonzero(mask)
        neighbor_labels: set[int] = set()
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny = ys + dy
            nx = xs + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            cand = out[ny[ok], nx[ok]]
            neighbor_labels.update(int(v) for v in np.unique(cand) if v != seg_label[cid])
        if not neighbor_labels:
            continue  # segment fills the image; nothing to merge into
        target = max(neighbor_labels, key=lambda lab: (area[lab] if lab < area.shape[0] else 0, -lab))
        out[mask] = target
        area[target] += sizes[cid]
    return out


def slic_segment(
    image: np.ndarray, n_segments: int, compactness: float = 10.0, n_iters: int = 10
) -> Segmentation:
    """SLIC superpixels on raw RGB with grid-seeded k-means.

    Distance is 5-d (r, g, b, y*m/S, x*m/S) where S is the grid spacing
    and m the compactness; each cluster searches a +-2S window. After the
    final sweep every segment is made 4-connected.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected [3,H,W] image, got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    if n_segments < 1:
        raise ConfigError("n_segments must be >= 1")
    if n_segments > h * w:
        raise ConfigError(f"n_segments {n_segments} exceeds pixel count {h * w}")
    if compactness <= 0:
        raise ConfigError("compactness must be positive")
    if n_segments == 1:
        return Segmentation(labels=np.zeros((h, w), dtype=np.int64), n_segments=1, n_requested=1)

    rgb = np.ascontiguousarray(image.transpose(1, 2, 0).astype(np.float32))
    spacing = float(np.sqrt(h * w / n_segments))
    # grid shaped to the aspect ratio; ny*nx <= n_segments always holds
    ny = min(n_segments, max(1, int(round(np.sqrt(n_segments * h / w)))))
    nx = max(1, n_segments // ny)
    centers = np.empty((ny * nx, 5), dtype=np.float32)
    i = 0
    for gy in range(ny):
        cy = (gy + 0.5) * h / ny
        for gx in range(nx):
            cx = (gx + 0.5) * w / nx
            centers[i, :3] = rgb[min(h - 1, int(cy)), min(w - 1, int(cx))]
            centers[i, 3] = cy
            centers[i, 4] = cx
            i += 1

    window = max(1, int(round(2.0 * spacing)))
    scale = np.float32(compactness / spacing)
    labels = np.zeros((h, w), dtype=np.int64)
    dists = np.empty((h, w), dtype=np.float32)
    for _ in range(n_iters):
        dists.fill(np.inf)
        kernels.slic_assign(rgb, centers, scale, window, labels, dists)
        centers, counts = kernels.slic_update(rgb, labels, centers.shape[0])
    dists.fill(np.inf)
    kernels.slic_assign(rgb, centers, scale, window, labels, dists)

    unassigned = ~np.isfinite(dists)
    if unassigned.any():
        ys, xs = np.nonzero(unassigned)
        dy = ys[:, None] - centers[None, :, 3]
        dx = xs[:, None] - centers[None, :, 4]
        labels[ys, xs] = np.argmin(dy * dy + dx * dx, axis=1)

    labels = _enforce_connectivity(labels)
    kept = np.unique(labels)
    labels = np.searchsorted(kept, labels)
    return Segmentation(
        labels=labels.astype(np.int64), n_segments=int(kept.shape[0]), n_requested=n_segments
    )


# ---------------------------------------------------------------------------
# patch classification
# ---------------------------------------------------------------------------


def _resize_bilinear(batch: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resize of [N,3,H,W] to square out_size (half-pixel centers)."""
    n, c, h, w = batch.shape
    if h == out_size and w == out_size:
        return batch
    ys = np.clip((np.arange(out_size) + 0.5) * h / out_size - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_size) + 0.5) * w / out_size - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(batch.dtype)[:, None]
    wx = (xs - x0).astype(batch.dtype)[None, :]
    v00 = batch[:, :, y0[:, None], x0[None, :]]
    v01 = batch[:, :, y0[:, None], x1[None, :]]
    v10 = batch[:, :, y1[:, None], x0[None, :]]
    v11 = batch[:, :, y1[:, None], x1[None, :]]
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    return (top * (1 - wy) + bot * wy).astype(batch.dtype)


def extract_patches(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    ps = grid.patch_size
    return np.stack([image[:, r : r + ps, c : c + ps] for r, c in grid.origins])


def classify_patches(
    model: ModelState, image: np.ndarray, grid: PatchGrid, batch_size: int = 32
) -> np.ndarray:
    """Eval-mode class probabilities for every patch in the grid."""
    patches = extract_patches(image, grid)
    patches = _resize_bilinear(patches, model.config.image_size)
    probs = []
    for i in range(0, patches.shape[0], batch_size):
        logits = forward_model(model, Tensor(patches[i : i + batch_size]), mode="eval")
        probs.append(softmax_probs(logits.data))
    out = np.concatenate(probs, axis=0)
    if not np.allclose(out.sum(axis=1), 1.0, atol=1e-5):
        raise NumericError("patch probability rows do not sum to 1")
    return out


def fine_to_coarse(probs: np.ndarray, lut: np.ndarray, n_coarse: int) -> np.ndarray:
    """Sum fine-class probability mass into coarse classes via a lookup table."""
    lut = np.asarray(lut, dtype=np.int64)
    if n_coarse < 1:
        raise TaxonomyError("n_coarse must be >= 1")
    if lut.ndim != 1 or lut.shape[0] != probs.shape[1]:
        raise TaxonomyError(f"lut length {lut.shape} does not match {probs.shape[1]} fine classes")
    if lut.min() < 0 or lut.max() >= n_coarse:
        raise TaxonomyError("lut entries must lie in [0, n_coarse)")
    out = np.zeros((probs.shape[0], n_coarse), dtype=probs.dtype)
    for fine in range(lut.shape[0]):
        out[:, lut[fine]] += probs[:, fine]
    return out


# ---------------------------------------------------------------------------
# vote fusion
# ---------------------------------------------------------------------------


def label_superpixels(
    seg: Segmentation, grid: PatchGrid, patch_labels: np.ndarray, n_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Overlap-weighted winner-take-all labeling of each superpixel.

    Every patch casts one vote per pixel it covers, for its own class.
    Ties break toward the smaller class index. Returns (segment labels,
    vote counts [n_segments, n_classes]).
    """
    patch_labels = np.asarray(patch_labels, dtype=np.int64)
    if patch_labels.shape[0] != len(grid):
        raise ContractError(f"{patch_labels.shape[0]} labels for {len(grid)} patches")
    if patch_labels.size and (patch_labels.min() < 0 or patch_labels.max() >= n_classes):
        raise ContractError("patch labels out of range")
    votes = np.zeros((seg.n_segments, n_classes), dtype=np.int64)
    ps = grid.patch_size
    for (r, c), cls in zip(grid.origins, patch_labels):
        region = seg.labels[r : r + ps, c : c + ps]
        votes[:, cls] += np.bincount(region.ravel(), minlength=seg.n_segments)
    if (votes.sum(axis=1) == 0).any():
        raise ContractError("superpixel with no overlapping patch; grid does not cover the image")
    return votes.argmax(axis=1), votes


def paint_raster(seg: Segmentation, segment_labels: np.ndarray) -> np.ndarray:
    return np.asarray(segment_labels, dtype=np.int64)[seg.labels]


def build_land_cover_map(
    model: ModelState,
    image: np.ndarray,
    class_names: list[str],
    n_segments: int = 100,
    patch_size: int = 224,
    stride: int | None = None,
    lut: np.ndarray | None = None,
    compactness: float = 10.0,
    batch_size: int = 32,
) -> LandCoverMap:
    """Full mapping pipeline: tile, classify, segment, vote, paint."""
    grid = tile_image(image, patch_size, stride if stride is not None else patch_size)
    probs = classify_patches(model, image, grid, batch_size)
    if lut is not None:
        probs = fine_to_coarse(probs, lut, len(class_names))
    if probs.shape[1] != len(class_names):
        raise ContractError(f"{probs.shape[1]} classifier outputs for {len(class_names)} class names")
    patch_labels = probs.argmax(axis=1)
    seg = slic_segment(image, n_segments, compactness)
    segment_labels, votes = label_superpixels(seg, grid, patch_labels, len(class_names))
    return LandCoverMap(
        class_raster=paint_raster(seg, segment_labels),
        segmentation=seg,
        segment_labels=segment_labels,
        votes=votes,
        class_names=list(class_names),
    )


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def patch_majority(raster: np.ndarray, grid: PatchGrid, n_classes: int) -> np.ndarray:
    """Majority class id inside each patch rect (ties to the smaller id)."""
    ps = grid.patch_size
    out = np.empty(len(grid), dtype=np.int64)
    for i, (r, c) in enumerate(grid.origins):
        counts = np.bincount(raster[r : r + ps, c : c + ps].ravel(), minlength=n_classes)
        out[i] = counts.argmax()
    return out


def score_map(
    pred_raster: np.ndarray,
    truth_raster: np.ndarray,
    grid: PatchGrid,
    class_names: list[str],
) -> dict:
    """Patch-level confusion scores between predicted and truth rasters."""
    if pred_raster.shape != truth_raster.shape:
        raise DimensionError(f"raster shapes differ: {pred_raster.shape} vs {truth_raster.shape}")
    n = len(class_names)
    pred = patch_majority(pred_raster, grid, n)
    truth = patch_majority(truth_raster, grid, n)
    cm = ConfusionMatrix(class_names)
    cm.update_batch(truth, pred)
    scores = cm_scores(cm)
    scores["confusion"] = cm
    return scores


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def default_palette(class_names: list[str]) -> dict[str, tuple[int, int, int]]:
    """Deterministic distinct colors spread around the hue wheel."""
    n = len(class_names)
    palette = {}
    for i, name in enumerate(class_names):
        hue = i / max(1, n)
        r, g, b = _hsv_to_rgb(hue, 0.75, 0.95)
        palette[name] = (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))
    return palette


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def render_map(
    class_raster: np.ndarray, class_names: list[str], palette: dict[str, tuple[int, int, int]], path
) -> None:
    """Write the class raster as an RGB PNG using the palette."""
    missing = [n for n in class_names if n not in palette]
    if missing:
        raise ConfigError(f"palette missing colors for: {missing}")
    lut = np.array([palette[n] for n in class_names], dtype=np.uint8)
    if class_raster.min() < 0 or class_raster.max() >= len(class_names):
        raise ContractError("class raster ids out of range")
    Image.fromarray(lut[class_raster]).save(path, format="PNG")


def decode_map(path, class_names: list[str], palette: dict[str, tuple[int, int, int]]) -> np.ndarray:
    """Invert render_map; unknown colors raise ConfigError."""
    arr = np.asarray(Image.open(path).convert("RGB"))
    raster = np.full(arr.shape[:2], -1, dtype=np.int64)
    for i, name in enumerate(class_names):
        if name not in palette:
            raise ConfigError(f"palette missing color for {name!r}")
        raster[(arr == np.array(palette[name], dtype=np.uint8)).all(axis=2)] = i
    if (raster < 0).any():
        raise ConfigError("image contains colors not present in the palette")
    return raster


def votes_to_csv(lcm: LandCoverMap, path) -> None:
    """Audit log: one row per superpixel with its winner and vote counts."""
    header = "segment,winner," + ",".join(lcm.class_names)
    lines = [header]
    for s in range(lcm.votes.shape[0]):
        counts = ",".join(str(int(v)) for v in lcm.votes[s])
        lines.append(f"{s},{lcm.class_names[int(lcm.segment_labels[s])]},{counts}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
