"""Synthetic pre/post disaster scenes with exact ground truth.

Scenes are a smooth textured background with flat-colored, axis-aligned
rectangular buildings placed without overlap. In the post image each
building is independently destroyed with the configured probability: its
footprint is darkened by damage_intensity, with a random subset of pixels
speckled by a varied drop to texture the rubble. Destroyed footprints are
labeled DESTROYED, intact ones NO_DAMAGE, so binarization is unambiguous.
The value bands are chosen so the encoded image separates cleanly: rubble
encodes near 0, background texture near the middle, intact footprints near
1, making the downstream patch task separable by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import Manifest, ManifestEntry, write_manifest
from .raster import DamageLabel, LabelMask, RasterImage, save_image, save_mask

# Fraction of a destroyed footprint speckled with a varied brightness drop.
_SPECKLE_FRACTION = 0.25
# Speckle pixels drop by damage_intensity scaled by a draw from this range,
# texturing the rubble while keeping it well below the background band.
_SPECKLE_SCALE = (0.85, 1.15)
# Flat building colors (per channel uniform draw); kept above the default
# darkening so intact footprints sit clearly above the background texture
# and darkened ones clearly below it.
_COLOR_RANGE = (0.55, 0.95)
# Smooth background texture band, between rubble and intact footprints.
_BACKGROUND_RANGE = (0.35, 0.65)
_PLACEMENT_TRIES = 1000


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 256
    building_count: int = 10
    building_size_range: tuple[int, int] = (32, 56)
    damage_probability: float = 0.5
    damage_intensity: float = 0.5
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.building_size_range
        if not (0 < lo <= hi <= self.image_size):
            raise ValueError(
                f"building sizes {self.building_size_range} do not fit a "
                f"{self.image_size}px scene"
            )
        if not (0.0 <= self.damage_probability <= 1.0):
            raise ValueError(f"damage_probability {self.damage_probability} outside [0, 1]")
        if not (0.0 < self.damage_intensity <= 1.0):
            raise ValueError(f"damage_intensity {self.damage_intensity} outside (0, 1]")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma {self.noise_sigma} must be >= 0")
        if self.building_count < 1:
            raise ValueError("building_count must be >= 1")


@dataclass(frozen=True)
class Building:
    row: int
    col: int
    height: int
    width: int
    damaged: bool


@dataclass(frozen=True)
class Scene:
    pre: RasterImage
    post: RasterImage
    mask: LabelMask
    buildings: tuple[Building, ...]


def _smooth_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Low-resolution noise upsampled bilinearly into a smooth texture."""
    coarse_n = max(2, size // 16)
    coarse = rng.uniform(*_BACKGROUND_RANGE, (coarse_n, coarse_n, 3))
    pos = np.linspace(0, coarse_n - 1, size)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, coarse_n - 1)
    frac = pos - i0
    # separable bilinear upsample
    along_rows = coarse[i0] * (1 - frac)[:, None, None] + coarse[i1] * frac[:, None, None]
    return (
        along_rows[:, i0] * (1 - frac)[None, :, None]
        + along_rows[:, i1] * frac[None, :, None]
    )


def _place_buildings(cfg: SceneConfig, rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    lo, hi = cfg.building_size_range
    rects: list[tuple[int, int, int, int]] = []
    occupied = np.zeros((cfg.image_size, cfg.image_size), dtype=bool)
    for _ in range(cfg.building_count):
        for attempt in range(_PLACEMENT_TRIES):
            h = int(rng.integers(lo, hi + 1))
            w = int(rng.integers(lo, hi + 1))
            r = int(rng.integers(0, cfg.image_size - h + 1))
            c = int(rng.integers(0, cfg.image_size - w + 1))
            if not occupied[r:r + h, c:c + w].any():
                occupied[r:r + h, c:c + w] = True
                rects.append((r, c, h, w))
                break
        else:
            raise DataError(
                f"could not place {cfg.building_count} non-overlapping buildings "
                f"after {_PLACEMENT_TRIES} attempts each"
            )
    return rects


def generate_scene(cfg: SceneConfig) -> Scene:
    """One deterministic scene per (config, seed)."""
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    pre = _smooth_background(size, rng)
    rects = _place_buildings(cfg, rng)
    mask = np.zeros((size, size), dtype=np.uint8)
    buildings = []
    for r, c, h, w in rects:
        color = rng.uniform(*_COLOR_RANGE, 3)
        pre[r:r + h, c:c + w] = color
        buildings.append((r, c, h, w))
    post = pre.copy()
    damage_draw = rng.random(cfg.building_count)
    records = []
    for (r, c, h, w), coin in zip(buildings, damage_draw):
        damaged = bool(coin < cfg.damage_probability)
        if damaged:
            footprint = post[r:r + h, c:c + w]
            base = footprint.copy()
            footprint -= cfg.damage_intensity
            speckle = rng.random((h, w)) < _SPECKLE_FRACTION
            scale = rng.uniform(*_SPECKLE_SCALE, (h, w))
            rubble = base - cfg.damage_intensity * scale[..., None]
            footprint[speckle] = rubble[speckle]
            np.clip(footprint, 0.0, 1.0, out=footprint)
            mask[r:r + h, c:c + w] = int(DamageLabel.DESTROYED)
        else:
            mask[r:r + h, c:c + w] = int(DamageLabel.NO_DAMAGE)
        records.append(Building(r, c, h, w, damaged))
    if cfg.noise_sigma > 0:
        pre = pre + rng.normal(0.0, cfg.noise_sigma, pre.shape)
        post = post + rng.normal(0.0, cfg.noise_sigma, post.shape)
    pre = np.clip(pre, 0.0, 1.0)
    post = np.clip(post, 0.0, 1.0)
    return Scene(
        RasterImage(pre), RasterImage(post), LabelMask(mask), tuple(records)
    )


def make_dataset(
    cfg: SceneConfig, scenes: int, split: float, out_dir: str | Path
) -> Manifest:
    """Generate scenes with seeds seed, seed+1, ... and write them plus a manifest.

    The first round(scenes * split) scenes (clamped so both splits are
    non-empty) are assigned to train, the rest to test. Per-scene truth
    records land in truth.json beside the images.
    """
    if scenes < 2:
        raise ValueError(f"need at least 2 scenes, got {scenes}")
    if not (0.0 < split < 1.0):
        raise ValueError(f"split must be in (0, 1), got {split}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = min(max(int(round(scenes * split)), 1), scenes - 1)
    entries = []
    truth: dict[str, list[dict]] = {}
    for i in range(scenes):
        scene_cfg = SceneConfig(
            image_size=cfg.image_size,
            building_count=cfg.building_count,
            building_size_range=cfg.building_size_range,
            damage_probability=cfg.damage_probability,
            damage_intensity=cfg.damage_intensity,
            noise_sigma=cfg.noise_sigma,
            seed=cfg.seed + i,
        )
        scene = generate_scene(scene_cfg)
        scene_id = f"scene_{i:03d}"
        save_image(scene.pre, out / f"{scene_id}_pre.png")
        save_image(scene.post, out / f"{scene_id}_post.png")
        save_mask(scene.mask, out / f"{scene_id}_mask.png")
        entries.append(
            ManifestEntry(
                id=scene_id,
                pre=out / f"{scene_id}_pre.png",
                post=out / f"{scene_id}_post.png",
                labels=out / f"{scene_id}_mask.png",
                split="train" if i < n_train else "test",
            )
        )
        truth[scene_id] = [
            {"row": b.row, "col": b.col, "height": b.height, "width": b.width,
             "damaged": b.damaged}
            for b in scene.buildings
        ]
    manifest = Manifest(tuple(entries))
    write_manifest(manifest, out / "manifest.json")
    (out / "truth.json").write_text(
        json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest
