"""Fused change image: post-image background, normalized pre/post difference on OOI.

The encoder produces one image Z from a registered (pre, post, mask) triple.
Background pixels (mask code 0) copy the post image verbatim; object-of-interest
pixels carry the min-max rescaled difference post - pre, so per-pixel change
inside the annotated footprints is stretched to span [0, 1].

A DiffField is a plain 1-D float64 array: the masked differences of all OOI
pixels in row-major pixel order, channels innermost. Each entry lies in
[-1, 1] since it is a difference of two [0, 1] values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .raster import DamageLabel, LabelMask, RasterImage

# Below this spread the difference field is treated as constant and mapped to
# all zeros instead of dividing by a vanishing range.
RANGE_EPS = 1e-9


@dataclass(frozen=True)
class Ip2cpImage:
    """Encoded image plus the boolean OOI footprint it was built from."""

    image: RasterImage
    ooi: np.ndarray  # (H, W) bool, True where mask != BACKGROUND

    def __post_init__(self):
        flags = np.ascontiguousarray(self.ooi, dtype=bool)
        if flags.shape != (self.image.height, self.image.width):
            raise ShapeError(
                f"ooi shape {flags.shape} does not match image "
                f"{(self.image.height, self.image.width)}"
            )
        object.__setattr__(self, "ooi", flags)


def norm_minmax(values: np.ndarray) -> np.ndarray:
    """Affinely rescale a 1-D difference field so min -> 0 and max -> 1.

    Degenerate fields (max - min < RANGE_EPS) map to all zeros: a constant
    difference carries no per-pixel variation to stretch.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty difference field")
    lo = values.min()
    hi = values.max()
    if hi - lo < RANGE_EPS:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def ip2cp_encode(
    pre: RasterImage,
    post: RasterImage,
    mask: LabelMask,
    per_channel: bool = False,
) -> Ip2cpImage:
    """Encode a registered pre/post pair into one change image.

    One joint min/max is taken over all OOI pixels and all three channels
    (set per_channel=True to rescale each channel independently). Non-OOI
    pixels of the output are bitwise equal to the post image.
    """
    if pre.data.shape != post.data.shape:
        raise ShapeError(
            f"pre {pre.data.shape} and post {post.data.shape} differ in shape"
        )
    if (mask.height, mask.width) != (post.height, post.width):
        raise ShapeError(
            f"mask {(mask.height, mask.width)} does not match images "
            f"{(post.height, post.width)}"
        )
    ooi = mask.labels != int(DamageLabel.BACKGROUND)
    z = post.data.copy()
    if ooi.any():
        diff = post.data[ooi] - pre.data[ooi]  # (n_ooi, 3)
        if per_channel:
            normed = np.empty_like(diff)
            for ch in range(3):
                normed[:, ch] = norm_minmax(diff[:, ch])
        else:
            normed = norm_minmax(diff.ravel()).reshape(diff.shape)
        z[ooi] = normed
    return Ip2cpImage(RasterImage(z), ooi)
