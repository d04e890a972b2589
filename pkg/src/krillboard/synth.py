"""Deterministic synthetic board generator.

Renders blue specimen boards with curved capsule-shaped specimens laid out
in a jittered row-major grid.  Each specimen is drawn twice (a wide lateral
render and a narrow dorsal render on the paired board image), has an exact
pixel length tied to its ground-truth millimetre length, and carries a
surrogate stage label encoded visually by hue, curvature and appendage
bumps.  Output follows the same on-disk layout as real data: board images,
a manifest table, and per-board instance masks.
"""

from __future__ import annotations

import json
import math
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import (
    BBox, BoardImage, DatasetManifest, SpecimenId, SpecimenRecord, Taxonomy,
    VIEW_DORSAL, VIEW_LATERAL, export_manifest,
)
from .segmentation import DetectionResult, InstanceMask, detection_to_json

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageArchetype:
    """Visual recipe for one surrogate maturity class."""

    label: str
    hue: float          # base body hue in [0, 1)
    curvature: float    # sagitta of the body arc, as a fraction of length
    bristles: int       # appendage bumps along the lower edge (lateral only)
    proportion: float   # share of the specimen population


DEFAULT_STAGES = (
    StageArchetype("J",   hue=0.02, curvature=0.04, bristles=0, proportion=0.35),
    StageArchetype("FS1", hue=0.15, curvature=0.10, bristles=2, proportion=0.25),
    StageArchetype("MS1", hue=0.33, curvature=0.16, bristles=4, proportion=0.18),
    StageArchetype("MA2", hue=0.85, curvature=0.10, bristles=6, proportion=0.14),
    StageArchetype("FA3", hue=0.48, curvature=0.14, bristles=3, proportion=0.08),
)

DEFAULT_CRUISES = ("SY01", "SY02", "SY03", "SY04", "SY05")


@dataclass(frozen=True)
class SynthConfig:
    n_boards: int = 4                     # physical boards; each yields 2 images
    specimens_per_board: int = 25
    board_size: tuple[int, int] = (1512, 1008)   # (width, height)
    bg: tuple[int, int, int] = (56, 127, 245)
    length_range_mm: tuple[int, int] = (20, 60)
    px_per_mm: float = 4.0
    stage_classes: tuple[StageArchetype, ...] = DEFAULT_STAGES
    cruises: tuple[str, ...] = DEFAULT_CRUISES
    seed: int = 0
    body_aspect: float = 0.16             # lateral body height / length
    dorsal_scale: float = 0.55            # dorsal width relative to lateral
    noise_sigma: float = 2.0
    jitter_px: int = 10
    edge_margin: int = 8

    def __post_init__(self):
        if self.n_boards < 1 or self.specimens_per_board < 1:
            raise ValueError("n_boards and specimens_per_board must be >= 1")
        if self.px_per_mm < 1.0:
            raise ValueError("px_per_mm must be >= 1")
        lo, hi = self.length_range_mm
        if not 1 <= lo <= hi:
            raise ValueError(f"bad length range {self.length_range_mm}")
        if abs(sum(s.proportion for s in self.stage_classes) - 1.0) > 1e-6:
            raise ValueError("stage proportions must sum to 1")

    def taxonomy(self) -> Taxonomy:
        return Taxonomy(included=tuple(s.label for s in self.stage_classes),
                        excluded=frozenset(), min_class_count=1)


@dataclass
class SynthBoard:
    """One rendered board image with its ground truth."""

    file: str
    cruise: str
    view: str
    image: np.ndarray                 # (H, W, 3) uint8
    instances: list[InstanceMask]     # position-index order
    records: list[SpecimenRecord]     # same order


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float32)


def _apportion(total: int, stages) -> list[int]:
    """Largest-remainder apportionment so class counts match proportions exactly."""
    raw = [s.proportion * total for s in stages]
    counts = [int(math.floor(r)) for r in raw]
    for idx in sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True):
        if sum(counts) == total:
            break
        counts[idx] += 1
    return counts


def _render_specimen(length_px: int, arch: StageArchetype, view: str,
                     cfg: SynthConfig, rng: np.random.Generator):
    """Paint one specimen onto a local canvas; returns (mask, rgb, alpha)."""
    lateral = view == VIEW_LATERAL
    aspect = cfg.body_aspect * (1.0 if lateral else cfg.dorsal_scale)
    hw_max = max(2.0, aspect * length_px / 2.0)
    sag = arch.curvature * length_px * (1.0 if lateral else 0.35)
    bristle_r = max(1.5, 0.35 * hw_max) if (lateral and arch.bristles) else 0.0

    height = int(math.ceil(sag + 2 * hw_max + bristle_r + 4))
    xs = np.arange(length_px)
    u = xs / max(length_px - 1, 1)
    y_base = hw_max + 1.0
    yc = y_base + sag * (1.0 - (2.0 * u - 1.0) ** 2)

    rise = 0.30 + 0.70 * np.sin(np.pi * np.clip(u * 1.25, 0.0, 1.0)) ** 0.8
    taper = 1.0 - 0.75 * np.clip((u - 0.55) / 0.45, 0.0, 1.0) ** 1.2
    hw = np.maximum(hw_max * rise * taper, 0.75)

    yy = np.arange(height, dtype=np.float64)[:, None]
    dy = yy - yc[None, :]
    mask = np.abs(dy) <= hw[None, :]

    if bristle_r > 0.0:
        xx = np.arange(length_px, dtype=np.float64)[None, :]
        for k in range(arch.bristles):
            ux = 0.25 + 0.5 * (k + 0.5) / arch.bristles
            cx = ux * (length_px - 1)
            col = int(round(cx))
            cy = yc[col] + hw[col]
            mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= bristle_r ** 2

    base = _hsv_to_rgb(arch.hue, 0.78, 0.86) * 255.0
    rel = np.clip(np.abs(dy) / np.maximum(hw[None, :], 1e-6), 0.0, 1.3)
    shade = 0.78 + 0.22 * np.clip(1.0 - rel, 0.0, 1.0)
    rgb = base[None, None, :] * shade[:, :, None]
    rgb += rng.normal(0.0, 6.0, size=rgb.shape)

    # dark eye spot near the head (colour only, mask unchanged)
    eye_x = 0.06 * (length_px - 1)
    eye_col = int(round(eye_x))
    eye_r = max(1.0, 0.28 * hw_max)
    eye = (np.arange(length_px)[None, :] - eye_x) ** 2 + (yy - yc[eye_col]) ** 2 <= eye_r ** 2
    rgb[eye & mask] = rng.normal(38.0, 4.0, size=(int((eye & mask).sum()), 3))

    return mask, np.clip(rgb, 0, 255).astype(np.uint8)


def _grid(cfg: SynthConfig):
    """Work out the cell grid; raises if specimens cannot fit without overlap."""
    w, h = cfg.board_size
    max_len = int(round(cfg.length_range_mm[1] * cfg.px_per_mm))
    body_h = int(math.ceil(max_len * (cfg.body_aspect + 0.22) + 2 * max(1.5, 0.35 * cfg.body_aspect * max_len / 2) + 6))
    usable_w = w - 2 * cfg.edge_margin
    usable_h = h - 2 * cfg.edge_margin
    cols = usable_w // (max_len + 6)
    if cols < 1:
        raise ValueError("board too narrow for the longest specimen; "
                         "reduce length range or raise board width")
    rows = math.ceil(cfg.specimens_per_board / cols)
    if rows * body_h > usable_h:
        raise ValueError(
            f"cannot place {cfg.specimens_per_board} specimens without overlap; "
            "reduce specimens_per_board or the length range")
    return cols, rows, usable_w // cols, usable_h // rows


def _render_board(pair_specs, view: str, file_name: str, cruise: str,
                  cfg: SynthConfig, rng: np.random.Generator,
                  grid, event: int, net: int, board_no: int,
                  alt_file: str) -> SynthBoard:
    cols, rows, cell_w, cell_h = grid
    w, h = cfg.board_size
    image = np.clip(
        np.asarray(cfg.bg, dtype=np.float64)[None, None, :]
        + rng.normal(0.0, cfg.noise_sigma, size=(h, w, 3)),
        0, 255,
    ).astype(np.uint8)

    instances: list[InstanceMask] = []
    records: list[SpecimenRecord] = []
    for i, (length_mm, arch) in enumerate(pair_specs):
        length_px = int(round(length_mm * cfg.px_per_mm))
        mask, rgb = _render_specimen(length_px, arch, view, cfg, rng)
        ys, xs = np.nonzero(mask)
        y0t, y1t = int(ys.min()), int(ys.max())
        mask = mask[y0t:y1t + 1]
        rgb = rgb[y0t:y1t + 1]
        mh, mw = mask.shape
        r, c = divmod(i, cols)
        # vertical jitter is capped by specimen height so the row tolerance
        # of the position indexer (half median box height) always holds
        jx_max = max(0, min(cfg.jitter_px, (cell_w - mw) // 2 - 1))
        jy_max = max(0, min(cfg.jitter_px, int(0.12 * mh), (cell_h - mh) // 2 - 1))
        jx = int(rng.integers(-jx_max, jx_max + 1)) if jx_max else 0
        jy = int(rng.integers(-jy_max, jy_max + 1)) if jy_max else 0
        x0 = cfg.edge_margin + c * cell_w + (cell_w - mw) // 2 + jx
        y0 = cfg.edge_margin + r * cell_h + (cell_h - mh) // 2 + jy
        image[y0:y0 + mh, x0:x0 + mw][mask] = rgb[mask]

        inst = InstanceMask(bitmap=mask, offset=(x0, y0)).tighten()
        instances.append(inst)
        records.append(SpecimenRecord(
            length_mm=length_mm, maturity=arch.label, cruise=cruise,
            bbox=inst.bbox,
            id=SpecimenId(cruise=cruise, image_file=file_name, index=i + 1),
            alt_id=SpecimenId(cruise=cruise, image_file=alt_file, index=i + 1),
            view=view, event=event, net=net, board=board_no,
        ))
    return SynthBoard(file=file_name, cruise=cruise, view=view,
                      image=image, instances=instances, records=records)


def iter_boards(cfg: SynthConfig):
    """Yield SynthBoard objects pair by pair (dorsal image, then lateral)."""
    grid = _grid(cfg)
    total = cfg.n_boards * cfg.specimens_per_board
    ss = np.random.SeedSequence(cfg.seed)
    assign_rng = np.random.default_rng(ss.spawn(1)[0])
    pair_seeds = ss.spawn(cfg.n_boards + 1)[1:]

    counts = _apportion(total, cfg.stage_classes)
    pool = [arch for arch, n in zip(cfg.stage_classes, counts) for _ in range(n)]
    pool = [pool[i] for i in assign_rng.permutation(total)]
    lengths = assign_rng.integers(cfg.length_range_mm[0], cfg.length_range_mm[1] + 1,
                                  size=total)

    seq_by_cruise: Counter = Counter()
    for b in range(cfg.n_boards):
        cruise = cfg.cruises[b % len(cfg.cruises)]
        seq = seq_by_cruise[cruise] + 1
        seq_by_cruise[cruise] += 2
        dorsal_file = f"{cruise}_krill_image_{seq}.png"
        lateral_file = f"{cruise}_krill_image_{seq + 1}.png"

        i0 = b * cfg.specimens_per_board
        specs = list(zip(
            (int(v) for v in lengths[i0:i0 + cfg.specimens_per_board]),
            pool[i0:i0 + cfg.specimens_per_board],
        ))
        rng = np.random.default_rng(pair_seeds[b])
        event = b + 1
        net = b % 3 + 1
        board_no = b % len(cfg.cruises) + 1
        yield _render_board(specs, VIEW_DORSAL, dorsal_file, cruise, cfg, rng,
                            grid, event, net, board_no, alt_file=lateral_file)
        yield _render_board(specs, VIEW_LATERAL, lateral_file, cruise, cfg, rng,
                            grid, event, net, board_no, alt_file=dorsal_file)


def _board_image_entry(board: SynthBoard, cfg: SynthConfig, base_dir: Path) -> BoardImage:
    alt = board.records[0].alt_id.image_file if board.records else None
    return BoardImage(
        file=base_dir / board.file, cruise=board.cruise, size=cfg.board_size,
        view=board.view, paired_file=(base_dir / alt) if alt else None,
    )


def generate(cfg: SynthConfig) -> tuple[list[SynthBoard], DatasetManifest]:
    """Generate all boards in memory plus the matching manifest."""
    boards = list(iter_boards(cfg))
    records = [r for b in boards for r in b.records]
    entries = [_board_image_entry(b, cfg, Path(".")) for b in boards]
    manifest = DatasetManifest(records=records, boards=entries, taxonomy=cfg.taxonomy())
    manifest.validate()
    return boards, manifest


def write_dataset(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Stream-render the dataset to disk: boards/, masks/, manifest.csv.

    Board images are PNG; ground-truth masks are stored per board in the
    detection JSON format (no scores).  Returns the manifest with real paths.
    """
    out_dir = Path(out_dir)
    boards_dir = out_dir / "boards"
    masks_dir = out_dir / "masks"
    boards_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)

    records: list[SpecimenRecord] = []
    entries: list[BoardImage] = []
    for board in iter_boards(cfg):
        Image.fromarray(board.image).save(boards_dir / board.file)
        result = DetectionResult(
            board=board.file, instances=board.instances,
            boxes=[m.bbox for m in board.instances],
            indices=list(range(1, len(board.instances) + 1)),
        )
        doc = detection_to_json(result, cfg.board_size)
        (masks_dir / f"{board.file}.json").write_text(json.dumps(doc))
        records.extend(board.records)
        entries.append(_board_image_entry(board, cfg, boards_dir))

    manifest = DatasetManifest(records=records, boards=entries, taxonomy=cfg.taxonomy())
    manifest.validate()
    export_manifest(manifest, out_dir / "manifest.csv")
    return manifest
