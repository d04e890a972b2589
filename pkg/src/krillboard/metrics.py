"""Detection evaluation: IoU, interpolated average precision over an IoU
threshold sweep, and a small-instance exhaustive-matching oracle.

Inputs are per-image lists.  Predictions are ``(geometry, score)`` pairs and
ground truths bare geometries, where a geometry is either a :class:`BBox` or
a 2-D binary mask array.  AP uses greedy highest-score-first matching and
101-point interpolated precision-recall, averaged over the threshold sweep
(default 0.50:0.05:0.95).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .manifest import BBox

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class MatchSpec:
    iou_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    iou_kind: str = "mask"  # "mask" | "box"
    max_dets: int = 100

    def __post_init__(self):
        ts = self.iou_thresholds
        if not ts or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("iou_thresholds must be strictly increasing")
        if ts[0] <= 0 or ts[-1] > 1:
            raise ValueError("iou_thresholds must lie in (0, 1]")
        if self.iou_kind not in ("mask", "box"):
            raise ValueError(f"unknown iou_kind {self.iou_kind!r}")


@dataclass
class APReport:
    ap: float
    ap50: float
    ap75: float
    recall: float
    per_threshold: dict[float, float]
    n_images: int = 0
    n_gts: int = 0
    n_preds: int = 0
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "ap": self.ap, "ap50": self.ap50, "ap75": self.ap75, "recall": self.recall,
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "n_images": self.n_images, "n_gts": self.n_gts, "n_preds": self.n_preds,
            "flags": self.flags,
        }


def box_iou(a: BBox, b: BBox) -> float:
    ix = max(a.x, b.x)
    iy = max(a.y, b.y)
    ix2 = min(a.right, b.right)
    iy2 = min(a.bottom, b.bottom)
    inter = max(0, ix2 - ix) * max(0, iy2 - iy)
    union = a.area + b.area - inter
    return inter / union


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union)


def iou(a, b) -> float:
    """Intersection over union of two boxes or two binary masks."""
    if isinstance(a, BBox) and isinstance(b, BBox):
        return box_iou(a, b)
    if isinstance(a, BBox) or isinstance(b, BBox):
        raise ValueError("iou operands must be the same kind")
    if not np.any(a) or not np.any(b):
        raise ValueError("iou of an empty region is undefined")
    return mask_iou(a, b)


def _geom_key(geom):
    """Content-based tiebreak so score ties are order-independent."""
    if isinstance(geom, BBox):
        return (0, geom.x, geom.y, geom.width, geom.height)
    arr = np.asarray(geom, dtype=bool)
    ys, xs = np.nonzero(arr)
    digest = hashlib.sha1(np.packbits(arr).tobytes()).hexdigest()
    return (1, int(arr.sum()), int(ys.min()), int(xs.min()), digest)


def _check_nonempty(geom, what: str):
    if isinstance(geom, BBox):
        return
    if not np.any(geom):
        raise ValueError(f"empty {what} mask")


@dataclass
class _Pred:
    image: int
    geom: object
    score: float
    key: tuple = ()


def _prepare(preds_by_image, gts_by_image, spec: MatchSpec):
    if len(preds_by_image) != len(gts_by_image):
        raise ValueError("preds and gts must cover the same images")
    preds: list[_Pred] = []
    gts: list[list] = []
    for img, (img_preds, img_gts) in enumerate(zip(preds_by_image, gts_by_image)):
        for g in img_gts:
            _check_nonempty(g, "ground-truth")
        gts.append(list(img_gts))
        img_list = []
        for geom, score in img_preds:
            _check_nonempty(geom, "prediction")
            img_list.append(_Pred(image=img, geom=geom, score=float(score)))
        img_list.sort(key=lambda p: (-p.score,) + _geom_key(p.geom))
        preds.extend(img_list[: spec.max_dets])
    preds.sort(key=lambda p: (-p.score,) + _geom_key(p.geom) + (p.image,))
    # IoU against every same-image GT, computed once and reused per threshold
    iou_rows = []
    for p in preds:
        iou_rows.append([iou(p.geom, g) for g in gts[p.image]])
    return preds, gts, iou_rows


def _greedy_tp_flags(preds, gts, iou_rows, threshold: float) -> list[bool]:
    taken = [set() for _ in gts]
    flags = []
    for p, row in zip(preds, iou_rows):
        best_iou = -1.0
        best_g = None
        for g, v in enumerate(row):
            if g in taken[p.image]:
                continue
            if v >= threshold and v > best_iou:
                best_iou = v
                best_g = g
        if best_g is None:
            flags.append(False)
        else:
            taken[p.image].add(best_g)
            flags.append(True)
    return flags


_RECALL_GRID = np.arange(101) / 100.0


def _interp_ap(tp_flags, n_gts: int) -> float:
    """101-point interpolated AP from score-ordered TP/FP flags."""
    if n_gts == 0:
        return 0.0
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    precision = tp / (tp + fp)
    recall = tp / n_gts
    # precision envelope: best precision achievable at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, _RECALL_GRID, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


@dataclass
class ThresholdDetail:
    threshold: float
    tp_flags: tuple[bool, ...]
    matched: int
    ap: float


def average_precision(preds_by_image, gts_by_image, spec: MatchSpec | None = None,
                      return_details: bool = False):
    """Greedy-matched interpolated AP over the threshold sweep.

    Matching is one-to-one per image and threshold: predictions in
    descending score order each take the unmatched ground truth with the
    highest IoU at or above the threshold (GT input order breaks ties).
    """
    spec = spec or MatchSpec()
    preds, gts, iou_rows = _prepare(preds_by_image, gts_by_image, spec)
    n_gts = sum(len(g) for g in gts)

    flags: list[str] = []
    per_threshold: dict[float, float] = {}
    details: list[ThresholdDetail] = []
    recalls = []

    if n_gts == 0 and not preds:
        flags.append("degenerate: no ground truths and no predictions; AP defined as 1.0")
        per_threshold = {t: 1.0 for t in spec.iou_thresholds}
        recalls = [1.0]
    elif n_gts == 0:
        flags.append("no ground truth instances; AP defined as 0.0")
        per_threshold = {t: 0.0 for t in spec.iou_thresholds}
        recalls = [0.0]
    else:
        for t in spec.iou_thresholds:
            tp = _greedy_tp_flags(preds, gts, iou_rows, t)
            ap_t = _interp_ap(tp, n_gts)
            per_threshold[t] = ap_t
            recalls.append(sum(tp) / n_gts)
            details.append(ThresholdDetail(t, tuple(tp), sum(tp), ap_t))

    report = APReport(
        ap=float(np.mean(list(per_threshold.values()))),
        ap50=per_threshold.get(0.50, 0.0),
        ap75=per_threshold.get(0.75, 0.0),
        recall=float(np.mean(recalls)),
        per_threshold=per_threshold,
        n_images=len(gts_by_image),
        n_gts=n_gts,
        n_preds=len(preds),
        flags=flags,
    )
    if return_details:
        return report, details
    return report


# ---------------------------------------------------------------------------
# Exhaustive oracle (test-only): enumerates every admissible one-to-one
# matching, maximizes matched count, then takes the best-AP assignment.
# The AP curve here is a deliberate plain-loop reimplementation.
# ---------------------------------------------------------------------------

def _reference_interp_ap(tp_flags, n_gts: int) -> float:
    if n_gts == 0 or not tp_flags:
        return 0.0
    precisions = []
    recalls = []
    tp = 0
    fp = 0
    for is_tp in tp_flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gts)
    total = 0.0
    for i in range(101):
        r = i / 100
        best = 0.0
        for p, rec in zip(precisions, recalls):
            if rec >= r and p > best:
                best = p
        total += best
    return total / 101


def _enumerate_tp_vectors(preds, gts, iou_rows, threshold: float) -> set[tuple[bool, ...]]:
    vectors: set[tuple[bool, ...]] = set()
    taken = [set() for _ in gts]

    def recurse(i: int, acc: list[bool]):
        if i == len(preds):
            vectors.add(tuple(acc))
            return
        p = preds[i]
        recurse(i + 1, acc + [False])  # leave unmatched
        for g, v in enumerate(iou_rows[i]):
            if v >= threshold and g not in taken[p.image]:
                taken[p.image].add(g)
                recurse(i + 1, acc + [True])
                taken[p.image].remove(g)

    recurse(0, [])
    return vectors


def brute_force_ap(preds_by_image, gts_by_image, spec: MatchSpec | None = None,
                   return_details: bool = False):
    """Oracle AP for tiny cases (at most 6 predictions and 6 ground truths)."""
    spec = spec or MatchSpec()
    n_preds_total = sum(len(p) for p in preds_by_image)
    n_gts_total = sum(len(g) for g in gts_by_image)
    if n_preds_total > 6 or n_gts_total > 6:
        raise ValueError("brute_force_ap supports at most 6 predictions and 6 ground truths")

    preds, gts, iou_rows = _prepare(preds_by_image, gts_by_image, spec)
    n_gts = sum(len(g) for g in gts)

    flags: list[str] = []
    per_threshold: dict[float, float] = {}
    details: list[ThresholdDetail] = []
    recalls = []

    if n_gts == 0 and not preds:
        flags.append("degenerate: no ground truths and no predictions; AP defined as 1.0")
        per_threshold = {t: 1.0 for t in spec.iou_thresholds}
        recalls = [1.0]
    elif n_gts == 0:
        flags.append("no ground truth instances; AP defined as 0.0")
        per_threshold = {t: 0.0 for t in spec.iou_thresholds}
        recalls = [0.0]
    else:
        for t in spec.iou_thresholds:
            vectors = _enumerate_tp_vectors(preds, gts, iou_rows, t)
            max_count = max(sum(v) for v in vectors)
            best_ap = -1.0
            best_vec = None
            for v in sorted((v for v in vectors if sum(v) == max_count), reverse=True):
                ap_v = _reference_interp_ap(v, n_gts)
                if ap_v > best_ap:
                    best_ap = ap_v
                    best_vec = v
            per_threshold[t] = best_ap
            recalls.append(max_count / n_gts)
            details.append(ThresholdDetail(t, best_vec, max_count, best_ap))

    report = APReport(
        ap=float(np.mean(list(per_threshold.values()))),
        ap50=per_threshold.get(0.50, 0.0),
        ap75=per_threshold.get(0.75, 0.0),
        recall=float(np.mean(recalls)),
        per_threshold=per_threshold,
        n_images=len(gts_by_image),
        n_gts=n_gts,
        n_preds=len(preds),
        flags=flags,
    )
    if return_details:
        return report, details
    return report
