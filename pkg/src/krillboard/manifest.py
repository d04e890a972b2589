"""Canonical domain types and the specimen manifest: ingestion, validation,
view pairing and export.

The manifest is a delimited-text table (CSV or TSV, autodetected from the
header) with one row per registered specimen view.  Column order is fixed:

    length,maturity,cruise,x,y,width,height,ID,Alternative view ID,position,event,net,board

``ID`` / ``Alternative view ID`` are rendered specimen identifiers of the
form ``{image_file}-{index}``; the ``position`` column holds the view token
(``Dorsal`` or ``Lateral``).  Rows that fail validation are collected into a
rejection report instead of being silently dropped.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = [
    "length", "maturity", "cruise", "x", "y", "width", "height",
    "ID", "Alternative view ID", "position", "event", "net", "board",
]

VIEW_DORSAL = "Dorsal"
VIEW_LATERAL = "Lateral"
VIEWS = (VIEW_DORSAL, VIEW_LATERAL)

MATURITY_TOKEN_RE = re.compile(r"^[A-Z]{1,2}[0-9]?$")

# Stages named explicitly in the curation protocol; the full retained set is
# run configuration, not code.
DEFAULT_INCLUDED_STAGES = ("J", "FS1", "MS1", "MS2", "MS3", "MA1", "MA2")
DEFAULT_EXCLUDED_STAGES = frozenset({"M1", "A2", "U", "FA5", "FS3", "MA3"})


class ManifestError(ValueError):
    """Hard (non row-level) manifest failure: bad header, unreadable paths."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, top-left anchored."""

    x: int
    y: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"bbox width/height must be >= 1, got {self.width}x{self.height}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"bbox origin must be non-negative, got ({self.x},{self.y})")

    @property
    def right(self) -> int:
        return self.x + self.width

    @property
    def bottom(self) -> int:
        return self.y + self.height

    @property
    def area(self) -> int:
        return self.width * self.height

    def within(self, image_w: int, image_h: int) -> bool:
        return self.right <= image_w and self.bottom <= image_h

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.width, self.height]

    @classmethod
    def from_list(cls, v) -> "BBox":
        x, y, w, h = (int(t) for t in v)
        return cls(x, y, w, h)


@dataclass(frozen=True)
class SpecimenId:
    """Identifier ``{image_file}-{index}``; the file name starts with the cruise."""

    cruise: str
    image_file: str
    index: int

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"specimen index must be >= 1, got {self.index}")
        if not self.image_file.startswith(self.cruise + "_"):
            raise ValueError(
                f"image file {self.image_file!r} does not start with cruise {self.cruise!r}"
            )

    def render(self) -> str:
        return f"{self.image_file}-{self.index}"

    @classmethod
    def parse(cls, text: str) -> "SpecimenId":
        file_part, sep, index_part = text.rpartition("-")
        if not sep or not file_part:
            raise ValueError(f"malformed specimen id {text!r}")
        try:
            index = int(index_part)
        except ValueError:
            raise ValueError(f"malformed specimen index in {text!r}") from None
        cruise = file_part.split("_", 1)[0]
        if cruise == file_part:
            raise ValueError(f"image file {file_part!r} carries no cruise prefix")
        return cls(cruise=cruise, image_file=file_part, index=index)


def render_specimen_id(cruise: str, image_file: str, index: int) -> str:
    """Render the canonical specimen identifier string."""
    return SpecimenId(cruise=cruise, image_file=image_file, index=index).render()


def parse_specimen_id(text: str) -> SpecimenId:
    """Inverse of :func:`render_specimen_id`."""
    return SpecimenId.parse(text)


@dataclass(frozen=True)
class Taxonomy:
    """Retained maturity classes (in classifier order) and exclusions."""

    included: tuple[str, ...] = DEFAULT_INCLUDED_STAGES
    excluded: frozenset[str] = DEFAULT_EXCLUDED_STAGES
    min_class_count: int = 101

    def __post_init__(self):
        overlap = set(self.included) & set(self.excluded)
        if overlap:
            raise ValueError(f"labels both included and excluded: {sorted(overlap)}")

    def class_order(self) -> tuple[str, ...]:
        return self.included


@dataclass(frozen=True)
class SpecimenRecord:
    """One manifest row: a single specimen view with its measurements."""

    length_mm: int | None
    maturity: str | None
    cruise: str
    bbox: BBox
    id: SpecimenId
    alt_id: SpecimenId
    view: str
    event: int
    net: int
    board: int

    def __post_init__(self):
        if self.length_mm is not None and self.length_mm < 1:
            raise ValueError("length_mm must be >= 1")
        if self.id == self.alt_id:
            raise ValueError("id equals alt_id")
        if self.id.image_file == self.alt_id.image_file:
            raise ValueError("id and alt_id reference the same image")
        if self.id.index != self.alt_id.index:
            raise ValueError("id and alt_id indices differ")
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {self.view!r}")

    def has_labels(self) -> bool:
        return self.length_mm is not None and self.maturity is not None


@dataclass
class BoardImage:
    """One full-resolution board photograph.  Pixels are loaded lazily."""

    file: Path
    cruise: str
    size: tuple[int, int]  # (width, height)
    view: str
    paired_file: Path | None = None

    def __post_init__(self):
        w, h = self.size
        if w < 1 or h < 1:
            raise ValueError(f"board raster dimensions must be positive, got {self.size}")

    def load(self) -> np.ndarray:
        """Read the RGB raster as a (H, W, 3) uint8 array."""
        with Image.open(self.file) as im:
            return np.asarray(im.convert("RGB"))


@dataclass(frozen=True)
class Rejection:
    row: int  # 1-based data-row number (header excluded)
    reason: str

    def to_json(self) -> str:
        return json.dumps({"row": self.row, "reason": self.reason})


@dataclass
class PairReport:
    retained: int = 0
    dropped: int = 0
    drop_reasons: Counter = field(default_factory=Counter)


@dataclass
class DatasetManifest:
    """Validated record collection plus the boards they reference."""

    records: list[SpecimenRecord]
    boards: list[BoardImage]
    taxonomy: Taxonomy = field(default_factory=Taxonomy)
    rejections: list[Rejection] = field(default_factory=list, compare=False)
    pair_report: PairReport | None = field(default=None, compare=False)

    def board_by_file(self, name: str) -> BoardImage:
        for b in self.boards:
            if b.file.name == name:
                return b
        raise KeyError(name)

    def records_for(self, image_file: str) -> list[SpecimenRecord]:
        return [r for r in self.records if r.id.image_file == image_file]

    def cruises(self) -> list[str]:
        return sorted({b.cruise for b in self.boards})

    def validate(self) -> None:
        board_files = {b.file.name for b in self.boards}
        ids = [r.id.render() for r in self.records]
        dupes = [i for i, c in Counter(ids).items() if c > 1]
        if dupes:
            raise ManifestError(f"duplicate specimen ids: {dupes[:5]}")
        missing = {r.id.image_file for r in self.records} - board_files
        if missing:
            raise ManifestError(f"records reference unknown boards: {sorted(missing)[:5]}")


def _detect_delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


def _probe_image(path: Path, cache: dict) -> tuple[int, int] | None:
    """Return (width, height) or None if the file is missing/unreadable."""
    if path in cache:
        return cache[path]
    size = None
    try:
        with Image.open(path) as im:
            size = im.size
    except (FileNotFoundError, OSError):
        size = None
    cache[path] = size
    return size


def _parse_row(row: dict, rownum: int, boards_dir: Path, size_cache: dict) -> SpecimenRecord:
    """Build a SpecimenRecord from one CSV row; raises ValueError with a reason."""
    length_raw = row["length"].strip()
    if length_raw == "":
        length_mm = None
    else:
        try:
            length_mm = int(length_raw)
        except ValueError:
            raise ValueError(f"length {length_raw!r} is not an integer")
        if length_mm < 1:
            raise ValueError("length_mm must be >= 1")

    maturity_raw = row["maturity"].strip()
    if maturity_raw == "":
        maturity = None
    elif not MATURITY_TOKEN_RE.match(maturity_raw):
        raise ValueError(f"maturity token {maturity_raw!r} is malformed")
    else:
        maturity = maturity_raw

    try:
        x, y, w, h = (int(row[k].strip()) for k in ("x", "y", "width", "height"))
    except ValueError:
        raise ValueError("bbox fields must be integers")
    try:
        bbox = BBox(x, y, w, h)
    except ValueError as e:
        raise ValueError(str(e))

    sid = SpecimenId.parse(row["ID"].strip())
    alt = SpecimenId.parse(row["Alternative view ID"].strip())

    cruise = row["cruise"].strip()
    if sid.cruise != cruise:
        raise ValueError(f"ID cruise {sid.cruise!r} does not match cruise column {cruise!r}")

    view_raw = row["position"].strip()
    view = view_raw.capitalize()
    if view not in VIEWS:
        raise ValueError(f"view {view_raw!r} is not Dorsal/Lateral")

    try:
        event, net, board = (int(row[k].strip()) for k in ("event", "net", "board"))
    except ValueError:
        raise ValueError("event/net/board must be integers")

    size = _probe_image(boards_dir / sid.image_file, size_cache)
    if size is None:
        raise ValueError(f"image file {sid.image_file!r} missing or unreadable")
    if not bbox.within(*size):
        raise ValueError(f"bbox {bbox.as_list()} exceeds board bounds {size}")

    return SpecimenRecord(
        length_mm=length_mm, maturity=maturity, cruise=cruise, bbox=bbox,
        id=sid, alt_id=alt, view=view, event=event, net=net, board=board,
    )


def parse_manifest(table, boards_dir, taxonomy: Taxonomy | None = None) -> DatasetManifest:
    """Parse a delimited-text manifest against a directory of board images.

    ``table`` may be a path, a string of file content, or a text stream.
    Rows failing validation land in ``manifest.rejections``; a missing
    required column is a hard :class:`ManifestError`.
    """
    boards_dir = Path(boards_dir)
    if not boards_dir.is_dir():
        raise ManifestError(f"boards directory {boards_dir} is not readable")

    if hasattr(table, "read"):
        text = table.read()
    elif isinstance(table, Path):
        text = table.read_text(encoding="utf-8")
    else:
        text = str(table)
        if "\n" not in text and "," not in text and "\t" not in text:
            text = Path(text).read_text(encoding="utf-8")

    lines = text.splitlines()
    if not lines:
        raise ManifestError("empty manifest: no header row")
    delim = _detect_delimiter(lines[0])
    reader = csv.DictReader(io.StringIO(text), delimiter=delim)
    missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ManifestError(f"manifest is missing required column(s): {missing}")

    records: list[SpecimenRecord] = []
    rejections: list[Rejection] = []
    seen_ids: set[str] = set()
    size_cache: dict = {}

    for rownum, row in enumerate(reader, start=1):
        try:
            rec = _parse_row(row, rownum, boards_dir, size_cache)
        except ValueError as e:
            rejections.append(Rejection(row=rownum, reason=str(e)))
            continue
        key = rec.id.render()
        if key in seen_ids:
            rejections.append(Rejection(row=rownum, reason=f"duplicate id {key!r}"))
            continue
        seen_ids.add(key)
        records.append(rec)

    boards = _boards_from_records(records, boards_dir, size_cache)
    manifest = DatasetManifest(
        records=records, boards=boards,
        taxonomy=taxonomy or Taxonomy(), rejections=rejections,
    )
    manifest.validate()
    return manifest


def _boards_from_records(records, boards_dir: Path, size_cache: dict) -> list[BoardImage]:
    by_file: dict[str, list[SpecimenRecord]] = {}
    for r in records:
        by_file.setdefault(r.id.image_file, []).append(r)
    boards = []
    for name in sorted(by_file):
        recs = by_file[name]
        views = Counter(r.view for r in recs)
        view, _ = views.most_common(1)[0]
        if len(views) > 1:
            log.warning("board %s has mixed view tokens %s; using %s", name, dict(views), view)
        boards.append(BoardImage(
            file=boards_dir / name, cruise=recs[0].cruise,
            size=size_cache[boards_dir / name], view=view,
        ))
    return boards


_SEQ_RE = re.compile(r"(\d+)\.[A-Za-z]+$")


def _file_sequence(image_file: str) -> int | None:
    m = _SEQ_RE.search(image_file)
    return int(m.group(1)) if m else None


def pair_views(manifest: DatasetManifest) -> DatasetManifest:
    """Restrict the manifest to fully labelled, mutually paired view records.

    A record survives iff its alternative-view record exists, points back at
    it, shows the other view, and both carry length and maturity.  Everything
    else is dropped and accounted for in ``pair_report``.
    """
    by_id = {r.id.render(): r for r in manifest.records}
    kept: list[SpecimenRecord] = []
    report = PairReport()

    for rec in manifest.records:
        partner = by_id.get(rec.alt_id.render())
        if partner is None:
            reason = "alternative view record missing"
        elif partner.alt_id != rec.id:
            reason = "asymmetric pairing"
        elif partner.view == rec.view:
            reason = "paired records share one view"
        elif not rec.has_labels() or not partner.has_labels():
            reason = "missing length or maturity"
        else:
            seq_a = _file_sequence(rec.id.image_file)
            seq_b = _file_sequence(rec.alt_id.image_file)
            if seq_a is not None and seq_b is not None and abs(seq_a - seq_b) != 1:
                log.warning("pair %s <-> %s: non-consecutive image sequence numbers",
                            rec.id.render(), rec.alt_id.render())
            kept.append(rec)
            continue
        report.dropped += 1
        report.drop_reasons[reason] += 1

    report.retained = len(kept)
    kept_files = {r.id.image_file for r in kept}
    boards = [b for b in manifest.boards if b.file.name in kept_files]
    board_by_name = {b.file.name: b for b in boards}
    for b in boards:
        recs = [r for r in kept if r.id.image_file == b.file.name]
        alt_file = recs[0].alt_id.image_file
        partner = board_by_name.get(alt_file)
        b.paired_file = partner.file if partner else None

    log.info("pair_views: retained %d records, dropped %d (%s)",
             report.retained, report.dropped, dict(report.drop_reasons))
    out = DatasetManifest(records=kept, boards=boards, taxonomy=manifest.taxonomy,
                          rejections=manifest.rejections, pair_report=report)
    out.validate()
    return out


def export_manifest(manifest: DatasetManifest, out) -> Path:
    """Write the manifest as CSV in the canonical column order."""
    out = Path(out)
    try:
        fh = out.open("w", encoding="utf-8", newline="")
    except OSError as e:
        raise ManifestError(f"cannot write manifest to {out}: {e}") from e
    with fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow([
                "" if r.length_mm is None else r.length_mm,
                "" if r.maturity is None else r.maturity,
                r.cruise, r.bbox.x, r.bbox.y, r.bbox.width, r.bbox.height,
                r.id.render(), r.alt_id.render(), r.view, r.event, r.net, r.board,
            ])
    return out


def write_rejection_report(manifest: DatasetManifest, out) -> Path:
    """Write one JSON object per rejected row (JSON Lines)."""
    out = Path(out)
    with out.open("w", encoding="utf-8") as fh:
        for rej in manifest.rejections:
            fh.write(rej.to_json() + "\n")
    return out
