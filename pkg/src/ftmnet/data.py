"""Dataset ingestion, synthetic domain-shift benchmark, image tiling.

The synthetic benchmark builds a source domain of procedural texture
families (oriented sinusoid + family colors + a fixed blob layout) and a
target domain that reuses a subset of the families, splits each into
subclasses (frequency band, hue offset), and pushes every image through
a per-channel affine shift plus noise. That shift is the distribution
gap the channel transforms are meant to absorb.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, DimensionError, TaxonomyError

TRAIN, VAL, TEST = 0, 1, 2
_SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class LabeledDataset:
    """In-memory image classification dataset with fine/coarse taxonomy."""

    images: np.ndarray  # [n, 3, S, S] float32 in [0, 1]
    labels: np.ndarray  # [n] indices into fine_classes
    fine_classes: list[str]
    taxonomy: dict[str, str]  # fine name -> coarse name, total
    split: np.ndarray  # [n] of TRAIN/VAL/TEST

    def __post_init__(self):
        missing = [f for f in self.fine_classes if f not in self.taxonomy]
        if missing:
            raise TaxonomyError(f"fine classes without coarse mapping: {missing}")

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def num_classes(self) -> int:
        return len(self.fine_classes)

    @property
    def coarse_classes(self) -> list[str]:
        seen: list[str] = []
        for f in self.fine_classes:
            c = self.taxonomy[f]
            if c not in seen:
                seen.append(c)
        return seen

    @property
    def coarse_lut(self) -> np.ndarray:
        coarse = self.coarse_classes
        return np.array([coarse.index(self.taxonomy[f]) for f in self.fine_classes], dtype=np.int64)

    def indices(self, split: int) -> np.ndarray:
        return np.nonzero(self.split == split)[0]

    def class_indices(self, split: int, label: int) -> np.ndarray:
        return np.nonzero((self.split == split) & (self.labels == label))[0]


def _split_tags(per_class: int) -> np.ndarray:
    n_train = int(round(per_class * _SPLIT_FRACTIONS[0]))
    n_val = int(round(per_class * _SPLIT_FRACTIONS[1]))
    tags = np.full(per_class, TEST, dtype=np.int8)
    tags[:n_train] = TRAIN
    tags[n_train : n_train + n_val] = VAL
    return tags


def channel_stats(ds: LabeledDataset, split: int = TRAIN) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over one split, for input standardization."""
    idx = ds.indices(split)
    if idx.size == 0:
        raise DataError("cannot compute channel stats of an empty split")
    sel = ds.images[idx]
    mean = sel.mean(axis=(0, 2, 3))
    std = sel.std(axis=(0, 2, 3))
    std = np.maximum(std, 1e-4)
    return mean.astype(np.float32), std.astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic domain pair
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticShiftConfig:
    n_source_classes: int = 8
    n_target_coarse: int = 3
    subclasses_per_coarse: int = 2
    channel_gain: tuple[float, float, float] = (0.62, 1.35, 0.85)
    channel_bias: tuple[float, float, float] = (0.22, -0.10, 0.14)
    noise_sigma: float = 0.06
    image_size: int = 64
    images_per_class: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.subclasses_per_coarse < 1:
            raise ConfigError("subclasses_per_coarse must be >= 1")
        if self.n_target_coarse < 1 or self.n_source_classes < 1:
            raise ConfigError("class counts must be >= 1")
        if self.n_target_coarse > self.n_source_classes:
            raise ConfigError("target coarse classes must reuse a subset of source families")
        if min(self.channel_gain) <= 0:
            raise ConfigError("channel gains must be positive")
        if self.noise_sigma < 0 or self.image_size < 8 or self.images_per_class < 5:
            raise ConfigError("bad synthetic geometry")


def fast_shift_config(seed: int = 0, **overrides) -> SyntheticShiftConfig:
    """Reduced preset for quick end-to-end runs: 32 px images, 120 per class."""
    base = dict(image_size=32, images_per_class=120, seed=seed)
    base.update(overrides)
    return SyntheticShiftConfig(**base)


def _family_params(cfg: SyntheticShiftConfig, family: int) -> dict:
    rng = np.random.default_rng([cfg.seed, 77, family])
    # keep fg/bg colors separated so the family has a stable palette
    fg = rng.uniform(0.35, 0.95, size=3)
    bg = rng.uniform(0.05, 0.55, size=3)
    if np.abs(fg - bg).sum() < 0.6:
        fg = np.clip(fg + 0.35, 0.0, 1.0)
    n_blobs = int(rng.integers(2, 5))
    return {
        "theta": rng.uniform(0.0, np.pi),
        "freq": rng.uniform(2.5, 6.5),
        "fg": fg,
        "bg": bg,
        "blob_pos": rng.uniform(0.12, 0.88, size=(n_blobs, 2)),
        "blob_r": rng.uniform(0.06, 0.14),
        "blob_color": rng.uniform(0.0, 1.0, size=3),
    }


def _hue_rotation(angle: float) -> np.ndarray:
    # rotation of RGB space about the gray diagonal
    c, s = np.cos(angle), np.sin(angle)
    m = np.full((3, 3), (1.0 - c) / 3.0)
    m += np.eye(3) * c
    k = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]]) / np.sqrt(3.0)
    return m + k * s


def _sub_mods(cfg: SyntheticShiftConfig, sub: int) -> tuple[float, np.ndarray]:
    n = cfg.subclasses_per_coarse
    if n == 1:
        return 1.0, np.eye(3)
    freq_mult = float(np.geomspace(0.7, 1.5, n)[sub])
    hue = np.linspace(-0.45, 0.45, n)[sub]
    return freq_mult, _hue_rotation(hue)


def _render_texture(cfg: SyntheticShiftConfig, fam: dict, freq_mult: float, hue_m: np.ndarray, rng) -> np.ndarray:
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float32) / s
    theta = fam["theta"] + rng.uniform(-0.12, 0.12)
    freq = fam["freq"] * freq_mult * rng.uniform(0.95, 1.05)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    fg = hue_m @ fam["fg"]
    bg = hue_m @ fam["bg"]
    img = fg[:, None, None] * wave[None] + bg[:, None, None] * (1.0 - wave[None])
    jitter = rng.uniform(-0.04, 0.04, size=2)
    for py, px in fam["blob_pos"]:
        cy, cx = (py + jitter[0]) * s, (px + jitter[1]) * s
        r2 = (fam["blob_r"] * s) ** 2
        mask = (yy * s - cy) ** 2 + (xx * s - cx) ** 2 < r2
        img[:, mask] = (hue_m @ fam["blob_color"])[:, None]
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def source_image(cfg: SyntheticShiftConfig, family: int, index: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0, family, index])
    return _render_texture(cfg, _family_params(cfg, family), 1.0, np.eye(3), rng)


def target_image_unshifted(cfg: SyntheticShiftConfig, coarse: int, sub: int, index: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 1, coarse, sub, index])
    freq_mult, hue_m = _sub_mods(cfg, sub)
    return _render_texture(cfg, _family_params(cfg, coarse), freq_mult, hue_m, rng)


def apply_domain_shift(img: np.ndarray, cfg: SyntheticShiftConfig, rng) -> np.ndarray:
    gain = np.asarray(cfg.channel_gain, dtype=np.float32)[:, None, None]
    bias = np.asarray(cfg.channel_bias, dtype=np.float32)[:, None, None]
    out = gain * img + bias
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=img.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def target_image(cfg: SyntheticShiftConfig, coarse: int, sub: int, index: int) -> np.ndarray:
    raw = target_image_unshifted(cfg, coarse, sub, index)
    rng = np.random.default_rng([cfg.seed, 2, coarse, sub, index])
    return apply_domain_shift(raw, cfg, rng)


def synth_domain_pair(cfg: SyntheticShiftConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic (source, target) pair with balanced classes and 60/20/20 splits."""
    cfg.validate()
    s = cfg.image_size
    per = cfg.images_per_class

    src_imgs = np.empty((cfg.n_source_classes * per, 3, s, s), dtype=np.float32)
    src_labels = np.empty(cfg.n_source_classes * per, dtype=np.int64)
    src_split = np.empty_like(src_labels, dtype=np.int8)
    for j in range(cfg.n_source_classes):
        tags = _split_tags(per)
        for i in range(per):
            src_imgs[j * per + i] = source_image(cfg, j, i)
        src_labels[j * per : (j + 1) * per] = j
        src_split[j * per : (j + 1) * per] = tags
    src_names = [f"fam{j}" for j in range(cfg.n_source_classes)]
    source = LabeledDataset(
        images=src_imgs,
        labels=src_labels,
        fine_classes=src_names,
        taxonomy={n: n for n in src_names},
        split=src_split,
    )

    n_fine = cfg.n_target_coarse * cfg.subclasses_per_coarse
    tgt_imgs = np.empty((n_fine * per, 3, s, s), dtype=np.float32)
    tgt_labels = np.empty(n_fine * per, dtype=np.int64)
    tgt_split = np.empty_like(tgt_labels, dtype=np.int8)
    tgt_names: list[str] = []
    taxonomy: dict[str, str] = {}
    fine = 0
    for j in range(cfg.n_target_coarse):
        for k in range(cfg.subclasses_per_coarse):
            name = f"fam{j}_sub{k}"
            tgt_names.append(name)
            taxonomy[name] = f"fam{j}"
            tags = _split_tags(per)
            for i in range(per):
                tgt_imgs[fine * per + i] = target_image(cfg, j, k, i)
            tgt_labels[fine * per : (fine + 1) * per] = fine
            tgt_split[fine * per : (fine + 1) * per] = tags
            fine += 1
    target = LabeledDataset(
        images=tgt_imgs,
        labels=tgt_labels,
        fine_classes=tgt_names,
        taxonomy=taxonomy,
        split=tgt_split,
    )
    return source, target


def synth_mosaic(
    cfg: SyntheticShiftConfig, size: int = 512, seed: int = 0
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Quadrant mosaic of target-domain textures for mapping runs.

    Returns (image [3,size,size], truth raster [size,size] of coarse ids,
    coarse class names). Requires a target config with >= 4 coarse classes.
    """
    cfg.validate()
    if cfg.n_target_coarse < 4:
        raise ConfigError("mosaic needs at least 4 target coarse classes")
    rng = np.random.default_rng([cfg.seed, 9, seed])
    tile = cfg.image_size
    img = np.zeros((3, size, size), dtype=np.float32)
    truth = np.zeros((size, size), dtype=np.int64)
    half = size // 2
    regions = [(0, 0, 0), (0, half, 1), (half, 0, 2), (half, half, 3)]
    for y0, x0, coarse in regions:
        truth[y0 : y0 + half, x0 : x0 + half] = coarse
        for ty in range(y0, y0 + half, tile):
            for tx in range(x0, x0 + half, tile):
                sub = int(rng.integers(cfg.subclasses_per_coarse))
                idx = int(rng.integers(1_000_000, 2_000_000))
                patch = target_image(cfg, coarse, sub, idx)
                th = min(tile, y0 + half - ty)
                tw = min(tile, x0 + half - tx)
                img[:, ty : ty + th, tx : tx + tw] = patch[:, :th, :tw]
    names = [f"fam{j}" for j in range(4)]
    return img, truth, names


# ---------------------------------------------------------------------------
# folder datasets
# ---------------------------------------------------------------------------


def parse_taxonomy_file(path) -> dict[str, str]:
    """Read 'fine_name=coarse_name' lines; blank lines and # comments ignored."""
    mapping: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise TaxonomyError(f"malformed taxonomy line {line!r}")
        fine, coarse = line.split("=", 1)
        mapping[fine.strip()] = coarse.strip()
    return mapping


def load_folder_dataset(root_path, taxonomy_file=None, image_size: int | None = None) -> LabeledDataset:
    """Load root/<class_name>/<images> with deterministic lexicographic order."""
    root = Path(root_path)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class directories under {root}")

    images: list[np.ndarray] = []
    labels: list[int] = []
    split: list[int] = []
    fine_classes = [d.name for d in class_dirs]
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file())
        if not files:
            raise DataError(f"class directory {d} is empty")
        tags = _split_tags(len(files))
        for i, p in enumerate(files):
            try:
                with Image.open(p) as im:
                    im = im.convert("RGB")
                    if image_size is not None and im.size != (image_size, image_size):
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as exc:
                raise DataError(f"cannot decode {p}: {exc}") from exc
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
            split.append(int(tags[i]))

    sizes = {im.shape for im in images}
    if len(sizes) != 1:
        raise DataError(f"images disagree in size: {sorted(sizes)}; pass image_size to resize")

    if taxonomy_file is not None:
        taxonomy = parse_taxonomy_file(taxonomy_file)
        missing = [f for f in fine_classes if f not in taxonomy]
        if missing:
            raise TaxonomyError(f"taxonomy file lacks entries for: {missing}")
    else:
        taxonomy = {n: n for n in fine_classes}

    return LabeledDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        fine_classes=fine_classes,
        taxonomy=taxonomy,
        split=np.asarray(split, dtype=np.int8),
    )


def save_folder_dataset(ds: LabeledDataset, root_path) -> None:
    """Export to the folder layout as 8-bit PNGs plus taxonomy.txt."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    counters = [0] * ds.num_classes
    for img, label in zip(ds.images, ds.labels):
        d = root / ds.fine_classes[label]
        d.mkdir(exist_ok=True)
        arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(d / f"{counters[label]:05d}.png")
        counters[label] += 1
    lines = [f"{f}={ds.taxonomy[f]}" for f in ds.fine_classes]
    (root / "taxonomy.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    """Edge-snapped tiling of an H x W image into fixed-size patches."""

    patch_size: int
    origins: tuple[tuple[int, int], ...]
    height: int
    width: int

    def __len__(self) -> int:
        return len(self.origins)


def _axis_origins(extent: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] + patch < extent:
        origins.append(extent - patch)  # snap the last patch to the edge
    return origins


def tile_image(image: np.ndarray, patch_size: int, stride: int) -> PatchGrid:
    """Full-coverage grid; a short final row/column overlaps its neighbor."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected [3,H,W] image, got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    if patch_size > min(h, w):
        raise DimensionError(f"patch {patch_size} exceeds image {h}x{w}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    rows = _axis_origins(h, patch_size, stride)
    cols = _axis_origins(w, patch_size, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(patch_size=patch_size, origins=origins, height=h, width=w)
