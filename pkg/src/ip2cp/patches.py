"""Binary-labeled patch mining from encoded change images.

A sliding window over the encoded image becomes a training patch when the
largest 4-connected footprint of one binary class covers enough of the
window: the no-damage class must exceed the delta1 area fraction, the
with-damage class delta2. When both qualify the larger fraction wins (exact
ties go to with-damage, the safety-critical class), and footprints of the
losing class are erased back to post-image values so each patch carries a
single label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .encoder import Ip2cpImage
from .errors import DataError, ShapeError
from .raster import (
    BinaryLabel,
    LabelMask,
    RasterImage,
    binarize_mask,
    load_image,
    save_image,
)

# 4-connectivity structuring element for footprint components.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class MinerConfig:
    """Patch mining parameters.

    delta1 / delta2 are area fractions of the window that the largest
    connected no-damage / with-damage footprint must exceed (strictly).
    A stride of None means non-overlapping windows (stride = patch_size).
    """

    patch_size: int = 64
    delta1: float = 0.12
    delta2: float = 0.04
    stride: int | None = None

    def __post_init__(self):
        if self.patch_size < 8:
            raise ValueError(f"patch_size must be >= 8, got {self.patch_size}")
        if not (0.0 < self.delta2 <= self.delta1 < 1.0):
            raise ValueError(
                f"need 0 < delta2 <= delta1 < 1, got delta1={self.delta1}, "
                f"delta2={self.delta2}"
            )
        if self.stride is None:
            object.__setattr__(self, "stride", self.patch_size)
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class LabeledPatch:
    """Fixed-size encoded tile with its binary label and provenance."""

    pixels: np.ndarray  # (s, s, 3) float64 in [0, 1]
    label: BinaryLabel
    source: tuple[str, int, int]  # (image id, row origin, col origin)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != arr.shape[1] or arr.shape[2] != 3:
            raise ShapeError(f"expected square (s, s, 3) patch, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("patch values outside [0, 1]")
        object.__setattr__(self, "pixels", arr)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def patch_id(self) -> str:
        img, row, col = self.source
        return f"{img}_r{row:05d}_c{col:05d}"


@dataclass(frozen=True)
class StatsRow:
    """Mining counts for one (patch size, threshold pair) setting."""

    patch_size: int
    delta1: float
    delta2: float
    no_damage: int
    with_damage: int
    discarded: int


def _largest_fraction(class_pixels: np.ndarray) -> float:
    """Fraction of the window covered by the largest 4-connected True blob."""
    if not class_pixels.any():
        return 0.0
    labeled, count = ndimage.label(class_pixels, structure=_CROSS)
    sizes = np.bincount(labeled.ravel())[1:]
    return float(sizes.max()) / class_pixels.size


def assign_patch_label(window: np.ndarray, cfg: MinerConfig) -> BinaryLabel | None:
    """Label one mask window, or None when neither class qualifies.

    `window` holds damage codes (a LabelMask sub-window) of exactly
    patch_size x patch_size pixels.
    """
    if window.shape != (cfg.patch_size, cfg.patch_size):
        raise ShapeError(
            f"window shape {window.shape} does not match patch size {cfg.patch_size}"
        )
    binary = binarize_mask(window)
    f_nd = _largest_fraction(binary == int(BinaryLabel.NO_DAMAGE))
    f_wd = _largest_fraction(binary == int(BinaryLabel.WITH_DAMAGE))
    nd_ok = f_nd > cfg.delta1
    wd_ok = f_wd > cfg.delta2
    if nd_ok and wd_ok:
        return BinaryLabel.NO_DAMAGE if f_nd > f_wd else BinaryLabel.WITH_DAMAGE
    if nd_ok:
        return BinaryLabel.NO_DAMAGE
    if wd_ok:
        return BinaryLabel.WITH_DAMAGE
    return None


def erase_other_class(
    patch: LabeledPatch, window: np.ndarray, post_window: np.ndarray
) -> LabeledPatch:
    """Replace losing-class footprint pixels with post-image values.

    Erased pixels are re-encoded as background, so the returned patch still
    looks like a valid encoded tile; winning-class and background pixels are
    untouched.
    """
    s = patch.size
    if window.shape != (s, s) or post_window.shape != (s, s, 3):
        raise ShapeError(
            f"windows {window.shape} / {post_window.shape} do not match patch size {s}"
        )
    losing = int(BinaryLabel.WITH_DAMAGE if patch.label == BinaryLabel.NO_DAMAGE
                 else BinaryLabel.NO_DAMAGE)
    erase = binarize_mask(window) == losing
    if not erase.any():
        return patch
    pixels = patch.pixels.copy()
    pixels[erase] = post_window[erase]
    return LabeledPatch(pixels, patch.label, patch.source)


def mine_patches(
    z: Ip2cpImage,
    mask: LabelMask,
    post: RasterImage,
    cfg: MinerConfig,
    image_id: str = "",
) -> list[LabeledPatch]:
    """Slide a window over the encoded image and keep qualifying patches.

    Window origins sit at multiples of the stride; windows extending past
    the border are skipped. Output order is row-major over origins.
    """
    h, w = z.image.height, z.image.width
    if (mask.height, mask.width) != (h, w) or (post.height, post.width) != (h, w):
        raise ShapeError("z, mask, and post must share dimensions")
    s = cfg.patch_size
    if h < s or w < s:
        raise DataError(f"image {h}x{w} smaller than one {s}x{s} patch")
    out: list[LabeledPatch] = []
    for row in range(0, h - s + 1, cfg.stride):
        for col in range(0, w - s + 1, cfg.stride):
            window = mask.labels[row:row + s, col:col + s]
            label = assign_patch_label(window, cfg)
            if label is None:
                continue
            patch = LabeledPatch(
                z.image.data[row:row + s, col:col + s].copy(),
                label,
                (image_id, row, col),
            )
            out.append(
                erase_other_class(patch, window, post.data[row:row + s, col:col + s])
            )
    return out


def count_windows(height: int, width: int, cfg: MinerConfig) -> int:
    """Number of candidate windows the miner will visit."""
    if height < cfg.patch_size or width < cfg.patch_size:
        return 0
    rows = (height - cfg.patch_size) // cfg.stride + 1
    cols = (width - cfg.patch_size) // cfg.stride + 1
    return rows * cols


def sweep_patch_stats(
    dataset: list[tuple[Ip2cpImage, LabelMask, RasterImage]],
    sizes: list[int],
    deltas: list[tuple[float, float]],
) -> list[StatsRow]:
    """Count mined labels across the dataset for every (size, deltas) setting.

    Rows come back sorted by (patch_size, delta1, delta2). Images smaller
    than the patch size contribute zero candidates.
    """
    if not dataset:
        raise DataError("empty dataset")
    rows = []
    for size in sorted(sizes):
        for d1, d2 in sorted(deltas):
            cfg = MinerConfig(patch_size=size, delta1=d1, delta2=d2)
            counts = {BinaryLabel.NO_DAMAGE: 0, BinaryLabel.WITH_DAMAGE: 0}
            candidates = 0
            for z, mask, post in dataset:
                candidates += count_windows(z.image.height, z.image.width, cfg)
                if z.image.height < size or z.image.width < size:
                    continue
                for patch in mine_patches(z, mask, post, cfg):
                    counts[patch.label] += 1
            kept = counts[BinaryLabel.NO_DAMAGE] + counts[BinaryLabel.WITH_DAMAGE]
            rows.append(
                StatsRow(size, d1, d2, counts[BinaryLabel.NO_DAMAGE],
                         counts[BinaryLabel.WITH_DAMAGE], candidates - kept)
            )
    return rows


STATS_CSV_HEADER = "patch_size,delta1,delta2,no_damage,with_damage,discarded"


def stats_to_csv(rows: list[StatsRow]) -> str:
    lines = [STATS_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.patch_size},{r.delta1!r},{r.delta2!r},"
            f"{r.no_damage},{r.with_damage},{r.discarded}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

AUGMENT_KINDS = ("rotate90", "flip", "shear", "scale", "color_jitter")

_SHEAR_RANGE = (-0.2, 0.2)
_SCALE_RANGE = (0.8, 1.25)
_JITTER_RANGE = (0.0, 0.1)


@dataclass(frozen=True)
class AugmentSpec:
    """One augmentation: kind plus its single parameter.

    rotate90: amount is k in {0, 1, 2, 3} quarter turns.
    flip: amount is "horizontal" or "vertical".
    shear: amount is the shear factor in [-0.2, 0.2].
    scale: amount is the zoom factor in [0.8, 1.25].
    color_jitter: amount is the max per-channel offset in [0, 0.1].
    """

    kind: str
    amount: int | float | str = field(default=0)

    def __post_init__(self):
        if self.kind == "rotate90":
            if self.amount not in (0, 1, 2, 3):
                raise ValueError(f"rotate90 k must be in 0..3, got {self.amount}")
        elif self.kind == "flip":
            if self.amount not in ("horizontal", "vertical"):
                raise ValueError(f"flip axis must be horizontal|vertical, got {self.amount}")
        elif self.kind == "shear":
            if not _SHEAR_RANGE[0] <= self.amount <= _SHEAR_RANGE[1]:
                raise ValueError(f"shear factor {self.amount} outside {_SHEAR_RANGE}")
        elif self.kind == "scale":
            if not _SCALE_RANGE[0] <= self.amount <= _SCALE_RANGE[1]:
                raise ValueError(f"scale factor {self.amount} outside {_SCALE_RANGE}")
        elif self.kind == "color_jitter":
            if not _JITTER_RANGE[0] <= self.amount <= _JITTER_RANGE[1]:
                raise ValueError(f"jitter delta {self.amount} outside {_JITTER_RANGE}")
        else:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")


def _bilinear_sample(pixels: np.ndarray, src_rows: np.ndarray, src_cols: np.ndarray) -> np.ndarray:
    """Sample pixels at fractional coordinates with edge clamping."""
    n = pixels.shape[0]
    sr = np.clip(src_rows, 0.0, n - 1.0)
    sc = np.clip(src_cols, 0.0, n - 1.0)
    r0 = np.floor(sr).astype(np.intp)
    c0 = np.floor(sc).astype(np.intp)
    r1 = np.minimum(r0 + 1, n - 1)
    c1 = np.minimum(c0 + 1, n - 1)
    fr = (sr - r0)[..., None]
    fc = (sc - c0)[..., None]
    top = pixels[r0, c0] * (1 - fc) + pixels[r0, c1] * fc
    bot = pixels[r1, c0] * (1 - fc) + pixels[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def augment(patch: LabeledPatch, spec: AugmentSpec, rng: np.random.Generator) -> LabeledPatch:
    """Apply one augmentation; the label is never altered.

    Geometric transforms use bilinear resampling about the patch center with
    edge clamping; color jitter adds one uniform offset per channel and
    clamps to [0, 1]. Identical (patch, spec, rng state) triples give
    identical outputs.
    """
    px = patch.pixels
    if spec.kind == "rotate90":
        out = np.rot90(px, k=int(spec.amount), axes=(0, 1)).copy()
    elif spec.kind == "flip":
        axis = 1 if spec.amount == "horizontal" else 0
        out = np.flip(px, axis=axis).copy()
    elif spec.kind in ("shear", "scale"):
        n = patch.size
        center = (n - 1) / 2.0
        rows, cols = np.meshgrid(
            np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij"
        )
        if spec.kind == "scale":
            src_r = center + (rows - center) / spec.amount
            src_c = center + (cols - center) / spec.amount
        else:
            src_r = rows
            src_c = cols - spec.amount * (rows - center)
        out = np.clip(_bilinear_sample(px, src_r, src_c), 0.0, 1.0)
    else:  # color_jitter
        offsets = rng.uniform(-spec.amount, spec.amount, size=3)
        out = np.clip(px + offsets, 0.0, 1.0)
    return LabeledPatch(out, patch.label, patch.source)


def random_augment_spec(rng: np.random.Generator) -> AugmentSpec:
    """Draw one augmentation uniformly over the five families."""
    kind = AUGMENT_KINDS[int(rng.integers(len(AUGMENT_KINDS)))]
    if kind == "rotate90":
        return AugmentSpec(kind, int(rng.integers(4)))
    if kind == "flip":
        return AugmentSpec(kind, "horizontal" if rng.random() < 0.5 else "vertical")
    if kind == "shear":
        return AugmentSpec(kind, float(rng.uniform(*_SHEAR_RANGE)))
    if kind == "scale":
        return AugmentSpec(kind, float(rng.uniform(*_SCALE_RANGE)))
    return AugmentSpec(kind, float(rng.uniform(*_JITTER_RANGE)))


# ---------------------------------------------------------------------------
# Patch set files: one PNG per patch plus a TSV manifest
# ---------------------------------------------------------------------------

PATCH_MANIFEST = "manifest.tsv"


def write_patch_set(patches: list[LabeledPatch], out_dir) -> None:
    """Write patches as PNGs plus a `manifest.tsv` with one line per patch:
    id<TAB>label<TAB>source_image<TAB>row<TAB>col (UTF-8, LF)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for p in patches:
        img_id, row, col = p.source
        save_image(RasterImage(p.pixels), out / f"{p.patch_id}.png")
        lines.append(f"{p.patch_id}\t{p.label.text}\t{img_id}\t{row}\t{col}")
    (out / PATCH_MANIFEST).write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8", newline="\n"
    )


def read_patch_set(in_dir) -> list[LabeledPatch]:
    """Load a patch set written by write_patch_set, in manifest order."""
    src = Path(in_dir)
    manifest = src / PATCH_MANIFEST
    if not manifest.is_file():
        raise DataError(f"no {PATCH_MANIFEST} in {src}")
    patches = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{manifest}:{lineno}: expected 5 tab-separated fields")
        pid, label_text, img_id, row, col = parts
        img = load_image(src / f"{pid}.png")
        patches.append(
            LabeledPatch(img.data, BinaryLabel.from_text(label_text),
                         (img_id, int(row), int(col)))
        )
    return patches
