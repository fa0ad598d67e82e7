"""Dataset manifests and polygon label ingestion.

Manifests are JSON files pairing pre/post images with their label source
(a mask PNG or a polygon label JSON) and a train/test split. Label JSONs
follow the public pre/post building-annotation convention: a feature list
where each feature carries a WKT POLYGON in pixel space and a damage
subtype string. Polygons rasterize by even-odd scanline fill tested at
pixel centers (col + 0.5, row + 0.5).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ManifestError, WktError
from .raster import DamageLabel, LabelMask, load_mask

logger = logging.getLogger(__name__)

_SPLITS = ("train", "test")

_SUBTYPES = {
    "no-damage": DamageLabel.NO_DAMAGE,
    "minor-damage": DamageLabel.MINOR,
    "major-damage": DamageLabel.MAJOR,
    "destroyed": DamageLabel.DESTROYED,
}


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    pre: Path
    post: Path
    labels: Path
    split: str


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


@dataclass(frozen=True)
class LabeledPolygon:
    """Closed pixel-space ring with a damage subtype (never background)."""

    ring: tuple[tuple[float, float], ...]
    subtype: DamageLabel

    def __post_init__(self):
        if self.subtype == DamageLabel.BACKGROUND:
            raise DataError("polygon subtype cannot be background")
        ring = tuple((float(x), float(y)) for x, y in self.ring)
        if len(ring) < 2 or ring[0] != ring[-1]:
            ring = ring + (ring[0],)
        distinct = set(ring[:-1])
        if len(distinct) < 3:
            raise WktError(f"ring has {len(distinct)} distinct vertices, need >= 3")
        for x, y in ring:
            if not (np.isfinite(x) and np.isfinite(y)):
                raise WktError("non-finite polygon coordinate")
        object.__setattr__(self, "ring", ring)


def load_manifest(path: str | Path) -> Manifest:
    """Read and validate a manifest, resolving relative paths against its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(
            f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise ManifestError(f"{path}: expected an object with an \"entries\" list")
    base = path.parent
    entries = []
    seen = set()
    for i, raw in enumerate(doc["entries"]):
        if not isinstance(raw, dict):
            raise ManifestError(f"{path}: entry {i} is not an object")
        for key in ("id", "pre", "post", "labels", "split"):
            if not isinstance(raw.get(key), str) or not raw[key]:
                raise ManifestError(f"{path}: entry {i} missing field {key!r}")
        if raw["split"] not in _SPLITS:
            raise ManifestError(
                f"{path}: entry {i} ({raw['id']}): split {raw['split']!r} "
                f"not one of {list(_SPLITS)}"
            )
        if raw["id"] in seen:
            raise ManifestError(f"{path}: duplicate entry id {raw['id']!r}")
        seen.add(raw["id"])
        entries.append(
            ManifestEntry(
                id=raw["id"],
                pre=base / raw["pre"],
                post=base / raw["post"],
                labels=base / raw["labels"],
                split=raw["split"],
            )
        )
    return Manifest(tuple(entries))


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest with paths relative to its own directory where possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        p = Path(p)
        try:
            return p.resolve().relative_to(base).as_posix()
        except ValueError:
            return str(p)

    doc = {
        "entries": [
            {"id": e.id, "pre": rel(e.pre), "post": rel(e.post),
             "labels": rel(e.labels), "split": e.split}
            for e in manifest.entries
        ]
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _parse_wkt_polygon(wkt: str, feature_index: int) -> tuple[tuple[float, float], ...]:
    """Parse `POLYGON ((x y, x y, ...))`, citing character offsets on error."""
    text = wkt.strip()
    if not text.upper().startswith("POLYGON"):
        raise WktError(
            f"feature {feature_index}: expected POLYGON at offset 0, got {text[:16]!r}"
        )
    body = text[len("POLYGON"):].strip()
    if not (body.startswith("((") and body.endswith("))")):
        raise WktError(
            f"feature {feature_index}: expected '((...))' ring at offset "
            f"{wkt.find(body) if body else len(wkt)}"
        )
    inner = body[2:-2]
    if "(" in inner or ")" in inner:
        raise WktError(
            f"feature {feature_index}: interior rings are not supported "
            f"(offset {wkt.find('(', wkt.find('((') + 2)})"
        )
    ring = []
    for part in inner.split(","):
        coords = part.split()
        if len(coords) != 2:
            raise WktError(
                f"feature {feature_index}: expected 'x y' pair at offset "
                f"{wkt.find(part)}, got {part.strip()!r}"
            )
        try:
            ring.append((float(coords[0]), float(coords[1])))
        except ValueError:
            raise WktError(
                f"feature {feature_index}: non-numeric coordinate at offset "
                f"{wkt.find(part)}: {part.strip()!r}"
            ) from None
    return tuple(ring)


def parse_label_json(path: str | Path) -> list[LabeledPolygon]:
    """Parse a polygon label file into labeled rings.

    Accepts either a top-level feature list or an object with a "features"
    list; each feature needs "wkt" and "subtype" fields. Features with the
    un-classified subtype are skipped (counted in a warning).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read label file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(
            f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    features = doc if isinstance(doc, list) else doc.get("features")
    if not isinstance(features, list):
        raise DataError(f"{path}: expected a feature list")
    polygons = []
    skipped = 0
    for i, feature in enumerate(features):
        if not isinstance(feature, dict) or "wkt" not in feature or "subtype" not in feature:
            raise DataError(f"{path}: feature {i} needs 'wkt' and 'subtype' fields")
        subtype = feature["subtype"]
        if subtype == "un-classified":
            skipped += 1
            continue
        if subtype not in _SUBTYPES:
            raise DataError(
                f"{path}: feature {i}: unknown subtype {subtype!r} "
                f"(known: {sorted(_SUBTYPES)} or un-classified)"
            )
        try:
            ring = _parse_wkt_polygon(feature["wkt"], i)
            polygons.append(LabeledPolygon(ring, _SUBTYPES[subtype]))
        except WktError as exc:
            raise WktError(f"{path}: {exc}") from None
    if skipped:
        logger.warning("%s: skipped %d un-classified feature(s)", path, skipped)
    return polygons


def wkt_of(polygon: LabeledPolygon) -> str:
    """Serialize the ring back to WKT (inverse of the parser on vertex sequences)."""
    coords = ", ".join(f"{x!r} {y!r}" for x, y in polygon.ring)
    return f"POLYGON (({coords}))"


def rasterize(polygons, height: int, width: int) -> LabelMask:
    """Scanline even-odd fill at pixel centers; later polygons overwrite earlier.

    A pixel (row, col) belongs to a polygon when the center (col + 0.5,
    row + 0.5) sees an odd number of edge crossings strictly to its right,
    with edges counted half-open in y. Untouched pixels stay background.
    """
    out = np.zeros((height, width), dtype=np.uint8)
    centers_x = np.arange(width) + 0.5
    for poly in polygons:
        ring = poly.ring
        for row in range(height):
            y = row + 0.5
            crossings = []
            for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
                if (y1 <= y < y2) or (y2 <= y < y1):
                    t = (y - y1) / (y2 - y1)
                    crossings.append(x1 + t * (x2 - x1))
            if not crossings:
                continue
            xs = np.sort(np.asarray(crossings))
            # odd number of crossings strictly right of the center -> inside
            right = len(xs) - np.searchsorted(xs, centers_x, side="right")
            inside = (right % 2) == 1
            out[row, inside] = int(poly.subtype)
    return LabelMask(out)


def load_label_mask(path: str | Path, height: int, width: int) -> LabelMask:
    """Load labels from a mask PNG or rasterize a polygon JSON to (height, width)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return rasterize(parse_label_json(path), height, width)
    mask = load_mask(path)
    if (mask.height, mask.width) != (height, width):
        raise DataError(
            f"{path}: mask {mask.height}x{mask.width} does not match image "
            f"{height}x{width}"
        )
    return mask
