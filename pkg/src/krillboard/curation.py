"""Crop extraction, fixed-canvas padding, taxonomy filtering, class weights
and the resolution ladder that turns detections + manifest into model-ready
per-specimen datasets.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import BBox, BoardImage, SpecimenRecord, Taxonomy

log = logging.getLogger(__name__)

DEFAULT_RESOLUTIONS = ((340, 100), (680, 200), (1020, 300), (1360, 400), (1700, 500))
CANVAS_ASPECT = 3.4


@dataclass(frozen=True)
class CropSpec:
    canvas_w: int = 1700
    canvas_h: int = 500
    bg: tuple[int, int, int] = (56, 127, 245)

    def __post_init__(self):
        if self.canvas_w < 1 or self.canvas_h < 1:
            raise ValueError("canvas dimensions must be positive")
        if any(not 0 <= c <= 255 for c in self.bg):
            raise ValueError(f"bg channels must lie in [0, 255], got {self.bg}")


@dataclass
class CuratedSample:
    image: np.ndarray                 # (canvas_h, canvas_w, 3) uint8
    record: SpecimenRecord
    view: str
    mask: np.ndarray | None = None    # binary, same canvas size

    @property
    def label(self) -> str | None:
        return self.record.maturity


@dataclass(frozen=True)
class ClassWeights:
    weights: dict[str, float]

    def vector(self, class_order) -> np.ndarray:
        missing = [c for c in class_order if c not in self.weights]
        if missing:
            raise ValueError(f"classes missing from weights: {missing}")
        return np.array([self.weights[c] for c in class_order], dtype=np.float64)


def extract_crop(board, bbox: BBox) -> np.ndarray:
    """Exact sub-raster of the board; out-of-bounds boxes are an error."""
    pixels = board.load() if isinstance(board, BoardImage) else np.asarray(board)
    h, w = pixels.shape[:2]
    if not bbox.within(w, h):
        raise ValueError(f"bbox {bbox.as_list()} exceeds board bounds ({w}, {h})")
    return pixels[bbox.y:bbox.bottom, bbox.x:bbox.right].copy()


def center_offset(crop_w: int, crop_h: int, spec: CropSpec) -> tuple[int, int]:
    """Top-left placement offset for a centred crop (floor on odd remainders)."""
    return (spec.canvas_w - crop_w) // 2, (spec.canvas_h - crop_h) // 2


def pad_center(crop: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Place the crop at the canvas centre on an exact-background canvas."""
    ch, cw = crop.shape[:2]
    if cw > spec.canvas_w or ch > spec.canvas_h:
        raise ValueError(
            f"crop {cw}x{ch} exceeds canvas {spec.canvas_w}x{spec.canvas_h}")
    canvas = np.empty((spec.canvas_h, spec.canvas_w, 3), dtype=np.uint8)
    canvas[:] = np.asarray(spec.bg, dtype=np.uint8)
    ox, oy = center_offset(cw, ch, spec)
    canvas[oy:oy + ch, ox:ox + cw] = crop
    return canvas


def unpad(canvas: np.ndarray, crop_w: int, crop_h: int, spec: CropSpec) -> np.ndarray:
    """Recover the original crop from a padded canvas."""
    ox, oy = center_offset(crop_w, crop_h, spec)
    return canvas[oy:oy + crop_h, ox:ox + crop_w].copy()


def _pad_mask(mask: np.ndarray, spec: CropSpec) -> np.ndarray:
    mh, mw = mask.shape
    canvas = np.zeros((spec.canvas_h, spec.canvas_w), dtype=bool)
    ox, oy = center_offset(mw, mh, spec)
    canvas[oy:oy + mh, ox:ox + mw] = mask
    return canvas


def curate_record(board, record: SpecimenRecord, spec: CropSpec | None = None,
                  mask: np.ndarray | None = None) -> CuratedSample:
    """Extract a record's crop and pad it onto the canonical canvas."""
    spec = spec or CropSpec()
    crop = extract_crop(board, record.bbox)
    image = pad_center(crop, spec)
    padded_mask = None
    if mask is not None:
        if mask.shape != crop.shape[:2]:
            raise ValueError("mask must match the crop dimensions")
        padded_mask = _pad_mask(np.asarray(mask, dtype=bool), spec)
    return CuratedSample(image=image, record=record, view=record.view, mask=padded_mask)


def filter_taxonomy(samples, taxonomy: Taxonomy):
    """Drop excluded / unknown labels, then classes below the count floor.

    Returns ``(kept, removals)`` where removals maps label -> {count, reason}.
    The operation is idempotent.
    """
    removals: dict[str, dict] = {}
    kept: list = []
    for s in samples:
        label = s.label
        if label is None or label in taxonomy.excluded:
            reason = "explicitly excluded" if label else "unlabelled"
            entry = removals.setdefault(str(label), {"count": 0, "reason": reason})
            entry["count"] += 1
        elif taxonomy.included and label not in taxonomy.included:
            entry = removals.setdefault(label, {"count": 0, "reason": "not in taxonomy"})
            entry["count"] += 1
        else:
            kept.append(s)

    counts = {}
    for s in kept:
        counts[s.label] = counts.get(s.label, 0) + 1
    small = {c for c, n in counts.items() if n < taxonomy.min_class_count}
    if small:
        final = []
        for s in kept:
            if s.label in small:
                entry = removals.setdefault(
                    s.label, {"count": 0,
                              "reason": f"class count below {taxonomy.min_class_count}"})
                entry["count"] += 1
            else:
                final.append(s)
        kept = final
    if not kept:
        log.warning("filter_taxonomy removed every sample")
    return kept, removals


def class_weights(counts) -> ClassWeights:
    """Inverse-frequency weights w = n / (s_j * s) over the class counts."""
    if not counts:
        raise ValueError("no classes to weight")
    bad = {c: v for c, v in counts.items() if v < 1}
    if bad:
        raise ValueError(f"zero/negative class counts (filter first): {bad}")
    n = sum(counts.values())
    s = len(counts)
    return ClassWeights(weights={c: n / (v * s) for c, v in counts.items()})


def _resize(image: np.ndarray, size: tuple[int, int], nearest: bool = False) -> np.ndarray:
    if (image.shape[1], image.shape[0]) == size:
        return image.copy()
    resample = Image.NEAREST if nearest else Image.BOX  # BOX = area averaging
    return np.asarray(Image.fromarray(image).resize(size, resample))


def build_resolution_ladder(samples, resolutions=DEFAULT_RESOLUTIONS):
    """Resize the curated set to each target resolution, split by view.

    Returns ``{(view, (w, h)): [CuratedSample, ...]}``.  Lateral and dorsal
    are separate datasets; targets off the canonical 3.4:1 aspect are
    allowed but flagged.
    """
    out: dict[tuple[str, tuple[int, int]], list[CuratedSample]] = {}
    for w, h in resolutions:
        if abs(w / h - CANVAS_ASPECT) > 1e-6:
            log.warning("resolution %dx%d deviates from the %.1f:1 canvas aspect",
                        w, h, CANVAS_ASPECT)
    for s in samples:
        for w, h in resolutions:
            resized = CuratedSample(
                image=_resize(s.image, (w, h)),
                record=s.record, view=s.view,
                mask=None if s.mask is None else _resize(
                    s.mask.astype(np.uint8), (w, h), nearest=True).astype(bool),
            )
            out.setdefault((s.view, (w, h)), []).append(resized)
    return out


RESIZE_METHOD = "pillow-box-area-average"


def write_curated(datasets, out_dir, spec: CropSpec, taxonomy: Taxonomy,
                  weights: ClassWeights | None = None) -> Path:
    """Write ladder datasets to ``{view}/{WxH}/{id}.png`` + labels + metadata."""
    out_dir = Path(out_dir)
    for (view, (w, h)), samples in datasets.items():
        cell = out_dir / view / f"{w}x{h}"
        cell.mkdir(parents=True, exist_ok=True)
        rows = ["id,length_mm,maturity,cruise"]
        for s in samples:
            sid = s.record.id.render()
            Image.fromarray(s.image).save(cell / f"{sid}.png")
            rows.append(f"{sid},{s.record.length_mm},{s.record.maturity},{s.record.cruise}")
        (cell / "labels.csv").write_text("\n".join(rows) + "\n")
    meta = {
        "crop_spec": {"canvas_w": spec.canvas_w, "canvas_h": spec.canvas_h,
                      "bg": list(spec.bg)},
        "resize_method": RESIZE_METHOD,
        "taxonomy": {"included": list(taxonomy.included),
                     "excluded": sorted(taxonomy.excluded),
                     "min_class_count": taxonomy.min_class_count},
        "weights": None if weights is None else weights.weights,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    return out_dir
