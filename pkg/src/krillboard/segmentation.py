"""Instance segmentation over full boards: dataset splits, model training,
inference, mask-to-box decoding, position indexing, and the chroma-prior
bootstrapper that turns human boxes into training masks.

The detector is a Mask R-CNN with an FPN backbone.  ``backbone`` selects the
residual depth ("resnet50_fpn" is the default; "resnet18_fpn" keeps
desk-scale CPU runs tractable).  Anchors default to wide aspect ratios since
specimens lie horizontally in board grooves.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import rle
from .manifest import BBox, BoardImage, DatasetManifest

log = logging.getLogger(__name__)

DEFAULT_BG = (56, 127, 245)

_CONN8 = np.ones((3, 3), dtype=int)


@dataclass
class InstanceMask:
    """Binary instance mask stored as a local window into the board."""

    bitmap: np.ndarray               # bool array
    offset: tuple[int, int] = (0, 0)  # (x, y) of the window's top-left
    score: float | None = None
    label: str = "krill"

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap, dtype=bool)
        if not self.bitmap.any():
            raise ValueError("instance mask has no foreground pixels")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def effective_score(self) -> float:
        return 1.0 if self.score is None else self.score

    @property
    def bbox(self) -> BBox:
        ys, xs = np.nonzero(self.bitmap)
        ox, oy = self.offset
        return BBox(
            x=int(xs.min()) + ox, y=int(ys.min()) + oy,
            width=int(xs.max() - xs.min()) + 1, height=int(ys.max() - ys.min()) + 1,
        )

    def to_board(self, width: int, height: int) -> np.ndarray:
        """Paint the local window into a full board-sized bool array."""
        out = np.zeros((height, width), dtype=bool)
        ox, oy = self.offset
        h, w = self.bitmap.shape
        out[oy:oy + h, ox:ox + w] = self.bitmap
        return out

    def tighten(self) -> "InstanceMask":
        """Crop the window to the tight bounding box of its foreground."""
        ys, xs = np.nonzero(self.bitmap)
        y0, y1 = int(ys.min()), int(ys.max())
        x0, x1 = int(xs.min()), int(xs.max())
        return InstanceMask(
            bitmap=self.bitmap[y0:y1 + 1, x0:x1 + 1],
            offset=(self.offset[0] + x0, self.offset[1] + y0),
            score=self.score, label=self.label,
        )


@dataclass
class DetectionResult:
    board: str                       # board image file name
    instances: list[InstanceMask]
    boxes: list[BBox]
    indices: list[int]

    def __post_init__(self):
        if not (len(self.instances) == len(self.boxes) == len(self.indices)):
            raise ValueError("instances, boxes and indices must align")
        if sorted(self.indices) != list(range(1, len(self.indices) + 1)):
            raise ValueError("indices must be a permutation of 1..N")


# ---------------------------------------------------------------------------
# Dataset splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Random80_20:
    test_fraction: float = 0.2


@dataclass(frozen=True)
class LeaveOneCruiseOut:
    cruise: str


def split_dataset(manifest: DatasetManifest, policy, seed: int = 0):
    """Split boards into (train, test) at board-image level.

    Paired boards always land on the same side so a specimen's two views
    never straddle the split.  Leave-one-cruise-out puts exactly the named
    cruise's boards in the test set.
    """
    boards = manifest.boards
    if not boards:
        raise ValueError("cannot split an empty manifest")

    if isinstance(policy, LeaveOneCruiseOut):
        known = manifest.cruises()
        if policy.cruise not in known:
            raise ValueError(f"unknown cruise {policy.cruise!r}; known cruises: {known}")
        test = [b for b in boards if b.cruise == policy.cruise]
        train = [b for b in boards if b.cruise != policy.cruise]
        return train, test

    if not isinstance(policy, Random80_20):
        raise ValueError(f"unknown split policy {policy!r}")

    # group a board with its paired alternative view
    groups: dict[tuple, list[BoardImage]] = {}
    for b in boards:
        names = [b.file.name] + ([b.paired_file.name] if b.paired_file else [])
        groups.setdefault(tuple(sorted(names)), []).append(b)
    keys = sorted(groups)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))

    target = max(1, round(policy.test_fraction * len(boards)))
    target = min(target, len(boards) - 1) if len(boards) > 1 else target
    test: list[BoardImage] = []
    test_keys = set()
    for gi in order:
        if len(test) >= target:
            break
        test.extend(groups[keys[gi]])
        test_keys.add(keys[gi])
    train = [b for k in keys if k not in test_keys for b in groups[k]]
    return train, test


# ---------------------------------------------------------------------------
# Mask decoding and position indexing
# ---------------------------------------------------------------------------

def _iter_instance_masks(segmap):
    """Yield per-instance bool arrays from a labeled map, 3-D stack or list."""
    if isinstance(segmap, np.ndarray) and segmap.ndim == 2 and segmap.dtype != bool:
        for label_id in np.unique(segmap):
            if label_id == 0:
                continue
            yield segmap == label_id
    elif isinstance(segmap, np.ndarray) and segmap.ndim == 2:
        yield segmap
    elif isinstance(segmap, np.ndarray) and segmap.ndim == 3:
        for m in segmap:
            yield np.asarray(m, dtype=bool)
    else:
        for m in segmap:
            yield np.asarray(m, dtype=bool)


def decode_masks(segmap) -> list[BBox]:
    """Tight bounding box per instance mask.

    Accepts a labeled integer map, a (N, H, W) stack, or a sequence of
    binary masks.  An instance whose mask spans several disjoint components
    gets the union box.  Empty masks are dropped with a warning.
    """
    boxes = []
    for i, mask in enumerate(_iter_instance_masks(segmap)):
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            log.warning("decode_masks: instance %d has an empty mask, dropped", i)
            continue
        boxes.append(BBox(
            x=int(xs.min()), y=int(ys.min()),
            width=int(xs.max() - xs.min()) + 1, height=int(ys.max() - ys.min()) + 1,
        ))
    return boxes


def index_positions(boxes: list[BBox]) -> list[int]:
    """Assign 1..N reading-order positions: rows top to bottom, then left to
    right within a row.  Rows are clustered on vertical centers with a
    tolerance of half the median box height; boxes with identical centers
    order by width then height.
    """
    n = len(boxes)
    if n == 0:
        return []
    heights = sorted(b.height for b in boxes)
    tol = 0.5 * float(np.median(heights))

    def key(b: BBox):
        return (b.x + b.width / 2.0, b.y + b.height / 2.0,
                b.width, b.height, b.y, b.x)

    order = sorted(range(n), key=lambda i: (boxes[i].y + boxes[i].height / 2.0,)
                   + key(boxes[i]))
    rows: list[list[int]] = []
    row_sum = 0.0
    for i in order:
        cy = boxes[i].y + boxes[i].height / 2.0
        if rows and cy - row_sum / len(rows[-1]) <= tol:
            rows[-1].append(i)
            row_sum += cy
        else:
            rows.append([i])
            row_sum = cy
    ranks = [0] * n
    pos = 1
    for row in rows:
        row.sort(key=lambda i: key(boxes[i]))
        for i in row:
            ranks[i] = pos
            pos += 1
    return ranks


# ---------------------------------------------------------------------------
# Chroma-prior box-to-mask bootstrap
# ---------------------------------------------------------------------------

def boxes_to_masks(board, boxes: list[BBox], bg_color=DEFAULT_BG, tol: float = 30.0) -> list[InstanceMask]:
    """Bootstrap instance masks from boxes via background-color distance.

    Within each box, foreground is every pixel whose Euclidean RGB distance
    from ``bg_color`` exceeds ``tol``; only the largest connected component
    is kept.  Boxes that contain no foreground are skipped with a warning.
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    pixels = board.load() if isinstance(board, BoardImage) else np.asarray(board)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"board raster must be HxWx3, got shape {pixels.shape}")
    h, w = pixels.shape[:2]
    bg = np.asarray(bg_color, dtype=np.float32)

    masks = []
    for box in boxes:
        if not box.within(w, h):
            raise ValueError(f"bbox {box.as_list()} exceeds board bounds ({w}, {h})")
        window = pixels[box.y:box.bottom, box.x:box.right].astype(np.float32)
        dist = np.sqrt(((window - bg) ** 2).sum(axis=2))
        fg = dist > tol
        if not fg.any():
            log.warning("boxes_to_masks: box %s is entirely background, skipped", box.as_list())
            continue
        labels, n_comp = ndimage.label(fg, structure=_CONN8)
        if n_comp > 1:
            sizes = ndimage.sum_labels(fg, labels, index=range(1, n_comp + 1))
            fg = labels == (1 + int(np.argmax(sizes)))
        masks.append(InstanceMask(bitmap=fg, offset=(box.x, box.y)))
    return masks


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------

@dataclass
class SegTrainConfig:
    epochs: int = 30
    learning_rate: float = 2e-3
    seed: int = 0
    backbone: str = "resnet50_fpn"
    momentum: float = 0.9
    freeze_backbone_epochs: int = 5
    warmup_iters: int = 50
    nms_iou: float = 0.5
    max_detections: int = 100
    anchor_sizes: tuple[int, ...] = (16, 32, 64, 128, 256)
    anchor_aspect_ratios: tuple[float, ...] = (0.12, 0.25, 0.5, 1.0)
    min_size: int | None = None   # None: fit the first training board
    max_size: int | None = None
    clip_grad_norm: float | None = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


_BACKBONES = {"resnet18_fpn": "resnet18", "resnet34_fpn": "resnet34", "resnet50_fpn": "resnet50"}

IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


def _build_torch_model(cfg: SegTrainConfig):
    from torchvision.models.detection import MaskRCNN
    from torchvision.models.detection.anchor_utils import AnchorGenerator
    from torchvision.models.detection.backbone_utils import resnet_fpn_backbone

    if cfg.backbone not in _BACKBONES:
        raise ValueError(f"unknown backbone {cfg.backbone!r}; choose from {sorted(_BACKBONES)}")
    if cfg.min_size is None or cfg.max_size is None:
        raise ValueError("min_size/max_size must be resolved before model build")
    backbone = resnet_fpn_backbone(
        backbone_name=_BACKBONES[cfg.backbone], weights=None, trainable_layers=5,
    )
    anchors = AnchorGenerator(
        sizes=tuple((s,) for s in cfg.anchor_sizes),
        aspect_ratios=(tuple(cfg.anchor_aspect_ratios),) * len(cfg.anchor_sizes),
    )
    return MaskRCNN(
        backbone, num_classes=2, rpn_anchor_generator=anchors,
        min_size=cfg.min_size, max_size=cfg.max_size,
        image_mean=list(IMAGE_MEAN), image_std=list(IMAGE_STD),
        box_nms_thresh=cfg.nms_iou, box_detections_per_img=cfg.max_detections,
    )


class SegmenterModel:
    """Trained detector handle: the torch module plus its build config."""

    CLASSES = ("krill",)

    def __init__(self, module, config: SegTrainConfig, loss_curve: list[float]):
        self.module = module
        self.config = config
        self.loss_curve = loss_curve

    def save(self, path) -> Path:
        path = Path(path)
        payload = {
            "config": json.dumps({
                **asdict(self.config),
                "classes": list(self.CLASSES),
                "image_mean": list(IMAGE_MEAN),
                "image_std": list(IMAGE_STD),
            }),
            "loss_curve": self.loss_curve,
            "state_dict": self.module.state_dict(),
        }
        torch.save(payload, path)
        return path

    @classmethod
    def load(cls, path) -> "SegmenterModel":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        raw = json.loads(payload["config"])
        fields_ = {k: raw[k] for k in SegTrainConfig.__dataclass_fields__ if k in raw}
        for key in ("anchor_sizes", "anchor_aspect_ratios"):
            fields_[key] = tuple(fields_[key])
        config = SegTrainConfig(**fields_)
        module = _build_torch_model(config)
        module.load_state_dict(payload["state_dict"])
        module.eval()
        return cls(module, config, list(payload.get("loss_curve", [])))


def _board_tensor(pixels: np.ndarray) -> torch.Tensor:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"board raster must be HxWx3 RGB, got shape {pixels.shape}")
    arr = np.array(pixels, dtype=np.float32)  # copy: PIL arrays are read-only
    return torch.from_numpy(arr).permute(2, 0, 1) / 255.0


def _target_from_masks(masks: list[InstanceMask], width: int, height: int) -> dict:
    boxes = []
    bitmaps = []
    for m in masks:
        b = m.bbox
        boxes.append([b.x, b.y, b.right, b.bottom])
        bitmaps.append(m.to_board(width, height))
    return {
        "boxes": torch.as_tensor(boxes, dtype=torch.float32),
        "labels": torch.ones(len(masks), dtype=torch.int64),
        "masks": torch.from_numpy(np.stack(bitmaps).astype(np.uint8)),
    }


def train_segmenter(train_items, cfg: SegTrainConfig):
    """Fine-tune the detector on (board, ground-truth masks) pairs.

    Returns a :class:`SegmenterModel` whose ``loss_curve`` holds the mean
    total loss per epoch.  Fully deterministic for a fixed seed.
    """
    items = list(train_items)
    if not items:
        raise ValueError("training set is empty")
    for board, masks in items:
        if not masks:
            name = board.file.name if isinstance(board, BoardImage) else "<array>"
            raise ValueError(f"board {name} has no ground-truth instance masks")

    rasters = [b.load() if isinstance(b, BoardImage) else np.asarray(b) for b, _ in items]
    cfg = _resolve_sizes(cfg, rasters[0])

    torch.manual_seed(cfg.seed)
    model = _build_torch_model(cfg)
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    shuffler = torch.Generator().manual_seed(cfg.seed)

    targets = [
        _target_from_masks(masks, rasters[i].shape[1], rasters[i].shape[0])
        for i, (_, masks) in enumerate(items)
    ]

    loss_curve: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        frozen = epoch < cfg.freeze_backbone_epochs
        for p in model.backbone.body.parameters():
            p.requires_grad_(not frozen)
        order = torch.randperm(len(items), generator=shuffler).tolist()
        epoch_losses = []
        for i in order:
            image = _board_tensor(rasters[i])
            if step < cfg.warmup_iters:  # linear warmup against cold-start divergence
                scale = (step + 1) / cfg.warmup_iters
                for group in optimizer.param_groups:
                    group["lr"] = cfg.learning_rate * scale
            elif step == cfg.warmup_iters:
                for group in optimizer.param_groups:
                    group["lr"] = cfg.learning_rate
            loss_dict = model([image], [targets[i]])
            loss = sum(loss_dict.values())
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch + 1}")
            optimizer.zero_grad()
            loss.backward()
            if cfg.clip_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_grad_norm)
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
        loss_curve.append(float(np.mean(epoch_losses)))
        log.info("segmenter epoch %d/%d: loss %.4f", epoch + 1, cfg.epochs, loss_curve[-1])

    model.eval()
    return SegmenterModel(model, cfg, loss_curve)


def _resolve_sizes(cfg: SegTrainConfig, raster: np.ndarray) -> SegTrainConfig:
    if cfg.min_size is not None and cfg.max_size is not None:
        return cfg
    h, w = raster.shape[:2]
    from dataclasses import replace
    return replace(cfg, min_size=cfg.min_size or min(h, w), max_size=cfg.max_size or max(h, w))


def detect(board, model: SegmenterModel, score_threshold: float = 0.5) -> DetectionResult:
    """Run the detector on one board and decode indexed boxes from the masks.

    Instances scoring below the threshold are removed; boxes come from the
    predicted masks (not the box head), and position indices follow
    :func:`index_positions`.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score_threshold must lie in [0, 1], got {score_threshold}")
    if isinstance(board, BoardImage):
        pixels = board.load()
        name = board.file.name
    else:
        pixels = np.asarray(board)
        name = "<array>"
    image = _board_tensor(pixels)

    model.module.eval()
    with torch.no_grad():
        out = model.module([image])[0]

    scores = out["scores"].numpy()
    keep = scores >= score_threshold
    soft = out["masks"][keep, 0].numpy()
    kept_scores = scores[keep]

    instances: list[InstanceMask] = []
    for m, s in zip(soft > 0.5, kept_scores):
        if not m.any():
            log.warning("detect: instance with empty binarized mask dropped (board %s)", name)
            continue
        instances.append(InstanceMask(bitmap=m, score=float(s)).tighten())

    boxes = [inst.bbox for inst in instances]
    indices = index_positions(boxes)
    return DetectionResult(board=name, instances=instances, boxes=boxes, indices=indices)


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

def detection_to_json(result: DetectionResult, board_size: tuple[int, int]) -> dict:
    """Serialize a detection as the per-board JSON document."""
    w, h = board_size
    instances = []
    for inst, box, idx in zip(result.instances, result.boxes, result.indices):
        entry = {
            "bbox": box.as_list(),
            "index": idx,
            "mask_rle": rle.encode(inst.to_board(w, h)),
        }
        if inst.score is not None:
            entry["score"] = inst.score
        instances.append(entry)
    return {"file": result.board, "instances": instances}


def detection_from_json(doc: dict) -> tuple[str, list[InstanceMask], list[BBox], list[int]]:
    """Inverse of :func:`detection_to_json`."""
    instances, boxes, indices = [], [], []
    for entry in doc["instances"]:
        mask = rle.decode(entry["mask_rle"])
        inst = InstanceMask(bitmap=mask, score=entry.get("score")).tighten()
        instances.append(inst)
        boxes.append(BBox.from_list(entry["bbox"]))
        indices.append(int(entry["index"]))
    return doc["file"], instances, boxes, indices
