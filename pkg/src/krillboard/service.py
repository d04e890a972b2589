"""HTTP annotation service backing the browser labelling UI.

Boards live as image files under ``{workspace}/boards``.  Annotation state is
a per-board JSON document under ``{workspace}/annotations`` plus an
append-only edit log; writes are atomic (tmp + rename), serialized per board,
and guarded by optimistic revision checks: a PUT must carry the revision it
read, and a stale revision yields 409 with the current document.  Detection
results are merged with provenance "auto" and never touch human boxes.
"""

from __future__ import annotations

import io
import json
import logging
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request, Response
from fastapi.responses import PlainTextResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .manifest import (
    BBox, BoardImage, DatasetManifest, MANIFEST_COLUMNS, SpecimenId,
    SpecimenRecord, Taxonomy, VIEWS, MATURITY_TOKEN_RE, export_manifest,
)
from .metrics import box_iou
from .segmentation import SegmenterModel, boxes_to_masks, decode_masks, detect, index_positions

log = logging.getLogger(__name__)

PROV_AUTO = "auto"
PROV_HUMAN = "human"


class Conflict(Exception):
    """Stale revision on write; carries the current document."""

    def __init__(self, current: dict):
        super().__init__(f"stale revision; current is {current['revision']}")
        self.current = current


class UnknownBoard(KeyError):
    pass


class AnnotationStore:
    """Per-board JSON documents with revisions and an append-only edit log."""

    def __init__(self, workspace: Path):
        self.workspace = Path(workspace)
        self.boards_dir = self.workspace / "boards"
        self.ann_dir = self.workspace / "annotations"
        self.ann_dir.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock(self, board: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(board, threading.Lock())

    def board_files(self) -> list[Path]:
        if not self.boards_dir.is_dir():
            return []
        exts = {".png", ".jpg", ".jpeg"}
        return sorted(p for p in self.boards_dir.iterdir() if p.suffix.lower() in exts)

    def board_path(self, board: str) -> Path:
        path = self.boards_dir / board
        if "/" in board or "\\" in board or not path.is_file():
            raise UnknownBoard(board)
        return path

    def _doc_path(self, board: str) -> Path:
        return self.ann_dir / f"{board}.json"

    def get(self, board: str) -> dict:
        self.board_path(board)
        path = self._doc_path(board)
        if path.is_file():
            return json.loads(path.read_text())
        return {"board": board, "revision": 0, "pair": None, "boxes": [], "labels": {}}

    def _persist(self, board: str, doc: dict, action: str) -> dict:
        tmp = self._doc_path(board).with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=1))
        tmp.replace(self._doc_path(board))
        with (self.ann_dir / "edits.log").open("a") as fh:
            fh.write(json.dumps({"ts": time.time(), "board": board,
                                 "revision": doc["revision"], "action": action}) + "\n")
        return doc

    def put(self, board: str, update: dict, expected_revision: int) -> dict:
        """Apply a manual edit; any changed or new field flips to human provenance."""
        with self._lock(board):
            doc = self.get(board)
            if expected_revision != doc["revision"]:
                raise Conflict(doc)

            old_boxes = {b["index"]: b for b in doc["boxes"]}
            boxes = []
            for raw in update.get("boxes", doc["boxes"]):
                box = {"index": int(raw["index"]),
                       "bbox": [int(v) for v in raw["bbox"]],
                       "provenance": raw.get("provenance", PROV_HUMAN)}
                if "score" in raw and raw["score"] is not None:
                    box["score"] = float(raw["score"])
                BBox.from_list(box["bbox"])  # validate
                prev = old_boxes.get(box["index"])
                if prev is None or prev["bbox"] != box["bbox"]:
                    box["provenance"] = PROV_HUMAN
                    box.pop("score", None)
                else:
                    box["provenance"] = prev["provenance"]
                    if "score" in prev:
                        box["score"] = prev["score"]
                boxes.append(box)

            old_labels = doc["labels"]
            labels = {}
            for key, raw in update.get("labels", old_labels).items():
                entry = {"length_mm": raw.get("length_mm"),
                         "maturity": raw.get("maturity"),
                         "provenance": raw.get("provenance", PROV_HUMAN)}
                if entry["length_mm"] is not None:
                    entry["length_mm"] = int(entry["length_mm"])
                    if entry["length_mm"] < 1:
                        raise ValueError("length_mm must be >= 1")
                if entry["maturity"] is not None and \
                        not MATURITY_TOKEN_RE.match(str(entry["maturity"])):
                    raise ValueError(f"malformed maturity token {entry['maturity']!r}")
                prev = old_labels.get(key)
                if prev is not None and prev.get("length_mm") == entry["length_mm"] \
                        and prev.get("maturity") == entry["maturity"]:
                    entry["provenance"] = prev.get("provenance", PROV_HUMAN)
                else:
                    entry["provenance"] = PROV_HUMAN
                labels[key] = entry

            doc.update(boxes=boxes, labels=labels)
            if "pair" in update:
                doc["pair"] = update["pair"]
            doc["revision"] += 1
            return self._persist(board, doc, "put")

    def merge_detections(self, board: str, detections: list[dict]) -> dict:
        """Write auto boxes; human boxes are never altered or displaced.

        New auto boxes replace previous auto boxes.  A detection overlapping
        a human box (IoU >= 0.5) is considered the same specimen and skipped.
        Human boxes keep their indices; auto boxes fill the remaining index
        slots in position order.
        """
        with self._lock(board):
            doc = self.get(board)
            human = [b for b in doc["boxes"] if b["provenance"] == PROV_HUMAN]
            human_boxes = [BBox.from_list(b["bbox"]) for b in human]

            fresh = []
            for det in detections:
                box = BBox.from_list(det["bbox"])
                if any(box_iou(box, hb) >= 0.5 for hb in human_boxes):
                    continue
                fresh.append((box, det.get("score")))

            taken = {b["index"] for b in human}
            order = index_positions([b for b, _ in fresh])
            merged = list(human)
            free = (i for i in range(1, len(fresh) + len(taken) + 2) if i not in taken)
            slots = {}
            for rank in sorted(order):
                slots[rank] = next(free)
            for (box, score), rank in zip(fresh, order):
                entry = {"index": slots[rank], "bbox": box.as_list(),
                         "provenance": PROV_AUTO}
                if score is not None:
                    entry["score"] = float(score)
                merged.append(entry)
            merged.sort(key=lambda b: b["index"])

            doc["boxes"] = merged
            doc["revision"] += 1
            return self._persist(board, doc, "detect")

    def set_pair(self, a: str, b: str) -> tuple[dict, dict]:
        self.board_path(a)
        self.board_path(b)
        first, second = sorted([a, b])
        with self._lock(first), self._lock(second):
            doc_a = self.get(a)
            doc_b = self.get(b)
            doc_a["pair"] = b
            doc_b["pair"] = a
            doc_a["revision"] += 1
            doc_b["revision"] += 1
            self._persist(a, doc_a, "pair")
            self._persist(b, doc_b, "pair")
            return doc_a, doc_b

    def export_manifest(self) -> tuple[str, dict]:
        """Assemble the canonical delimited export from complete annotations.

        Returns (csv_text, report); rows missing boxes, labels or pairing are
        flagged in the report and skipped, mirroring the pairing drop rules.
        """
        records: list[SpecimenRecord] = []
        flagged: list[dict] = []
        docs = {p.name: self.get(p.name) for p in self.board_files()}
        sizes = {}
        for name in docs:
            with Image.open(self.board_path(name)) as im:
                sizes[name] = im.size

        for name, doc in docs.items():
            pair = doc.get("pair")
            if not pair or pair not in docs:
                if doc["boxes"]:
                    flagged.append({"board": name, "reason": "board not paired"})
                continue
            if docs[pair].get("pair") != name:
                flagged.append({"board": name, "reason": "asymmetric pairing"})
                continue
            cruise = name.split("_", 1)[0]
            view = _board_view(name, doc, self)
            for box in doc["boxes"]:
                idx = box["index"]
                label = doc["labels"].get(str(idx))
                if not label or label.get("length_mm") is None or label.get("maturity") is None:
                    flagged.append({"board": name, "index": idx,
                                    "reason": "missing length or maturity"})
                    continue
                bbox = BBox.from_list(box["bbox"])
                if not bbox.within(*sizes[name]):
                    flagged.append({"board": name, "index": idx,
                                    "reason": "bbox exceeds board bounds"})
                    continue
                records.append(SpecimenRecord(
                    length_mm=label["length_mm"], maturity=label["maturity"],
                    cruise=cruise, bbox=bbox,
                    id=SpecimenId(cruise, name, idx),
                    alt_id=SpecimenId(cruise, pair, idx),
                    view=view, event=int(doc.get("event", 0) or 0),
                    net=int(doc.get("net", 0) or 0),
                    board=int(doc.get("board_no", 0) or 0),
                ))

        lines = [",".join(MANIFEST_COLUMNS)]
        for r in records:
            lines.append(",".join(str(v) for v in [
                r.length_mm, r.maturity, r.cruise, r.bbox.x, r.bbox.y,
                r.bbox.width, r.bbox.height, r.id.render(), r.alt_id.render(),
                r.view, r.event, r.net, r.board,
            ]))
        report = {"exported": len(records), "flagged": flagged}
        return "\n".join(lines) + "\n", report


def _board_view(name: str, doc: dict, store: AnnotationStore) -> str:
    view = doc.get("view")
    if view in VIEWS:
        return view
    # convention fallback: odd sequence number = Dorsal, even = Lateral
    stem = name.rsplit(".", 1)[0]
    digits = "".join(ch for ch in stem[::-1] if ch.isdigit())[::-1]
    seq = int(digits) if digits else 1
    return "Dorsal" if seq % 2 == 1 else "Lateral"


class ChromaDetector:
    """Model-free fallback detector: background-distance threshold plus
    connected components over the whole board."""

    def __init__(self, bg=(56, 127, 245), tol: float = 30.0, min_pixels: int = 40):
        self.bg = bg
        self.tol = tol
        self.min_pixels = min_pixels

    def __call__(self, pixels: np.ndarray, score_threshold: float) -> list[dict]:
        from scipy import ndimage

        dist = np.sqrt(((pixels.astype(np.float32) - self.bg) ** 2).sum(axis=2))
        labels, n = ndimage.label(dist > self.tol, structure=np.ones((3, 3), dtype=int))
        out = []
        for comp in range(1, n + 1):
            mask = labels == comp
            if mask.sum() < self.min_pixels:
                continue
            (box,) = decode_masks([mask])
            out.append({"bbox": box.as_list(), "score": 1.0})
        return out


def create_app(workspace, model_path=None, taxonomy: Taxonomy | None = None,
               token: str | None = None):
    """Build the FastAPI application over a workspace directory."""
    store = AnnotationStore(Path(workspace))
    taxonomy = taxonomy or Taxonomy()
    segmenter = SegmenterModel.load(model_path) if model_path else None
    chroma = ChromaDetector()

    app = FastAPI(title="krillboard annotation service")
    app.state.store = store

    def check_token(request: Request):
        if token and request.headers.get("X-Auth-Token") != token:
            raise HTTPException(status_code=401, detail="missing or bad token")

    @app.get("/boards")
    def list_boards(request: Request):
        check_token(request)
        out = []
        for p in store.board_files():
            doc = store.get(p.name)
            with Image.open(p) as im:
                w, h = im.size
            out.append({"board": p.name, "revision": doc["revision"],
                        "pair": doc.get("pair"), "n_boxes": len(doc["boxes"]),
                        "width": w, "height": h,
                        "view": _board_view(p.name, doc, store)})
        return out

    @app.get("/taxonomy")
    def get_taxonomy(request: Request):
        check_token(request)
        return {"included": list(taxonomy.included),
                "excluded": sorted(taxonomy.excluded),
                "min_class_count": taxonomy.min_class_count}

    def _load_board(board: str) -> np.ndarray:
        try:
            path = store.board_path(board)
        except UnknownBoard:
            raise HTTPException(status_code=404, detail=f"unknown board {board!r}")
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))

    def _png(arr: np.ndarray) -> Response:
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/boards/{board}/image")
    def board_image(board: str, request: Request, scale: float = Query(default=1.0, gt=0, le=1.0)):
        check_token(request)
        pixels = _load_board(board)
        if scale < 1.0:
            h, w = pixels.shape[:2]
            im = Image.fromarray(pixels).resize(
                (max(1, int(w * scale)), max(1, int(h * scale))), Image.BOX)
            pixels = np.asarray(im)
        return _png(pixels)

    @app.get("/boards/{board}/crop")
    def board_crop(board: str, request: Request, x: int, y: int, w: int, h: int):
        check_token(request)
        pixels = _load_board(board)
        try:
            box = BBox(x, y, w, h)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))
        if not box.within(pixels.shape[1], pixels.shape[0]):
            raise HTTPException(status_code=422, detail="crop exceeds board bounds")
        return _png(pixels[y:y + h, x:x + w])

    @app.get("/boards/{board}/annotations")
    def get_annotations(board: str, request: Request):
        check_token(request)
        try:
            return store.get(board)
        except UnknownBoard:
            raise HTTPException(status_code=404, detail=f"unknown board {board!r}")

    @app.put("/boards/{board}/annotations")
    def put_annotations(board: str, update: dict, request: Request):
        check_token(request)
        if "revision" not in update:
            raise HTTPException(status_code=422, detail="update must carry the expected revision")
        try:
            return store.put(board, update, int(update["revision"]))
        except UnknownBoard:
            raise HTTPException(status_code=404, detail=f"unknown board {board!r}")
        except Conflict as c:
            raise HTTPException(status_code=409, detail={
                "error": "stale revision", "current": c.current})
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))

    @app.post("/boards/{board}/detect")
    def detect_board(board: str, request: Request,
                     threshold: float = Query(default=0.5, ge=0.0, le=1.0)):
        check_token(request)
        pixels = _load_board(board)
        if segmenter is not None:
            result = detect(pixels, segmenter, score_threshold=threshold)
            dets = [{"bbox": b.as_list(), "score": m.score}
                    for b, m in zip(result.boxes, result.instances)]
        else:
            dets = chroma(pixels, threshold)
        return store.merge_detections(board, dets)

    @app.put("/pairs")
    def put_pair(payload: dict, request: Request):
        check_token(request)
        a, b = payload.get("a"), payload.get("b")
        if not a or not b or a == b:
            raise HTTPException(status_code=422, detail="payload must name two distinct boards")
        try:
            doc_a, doc_b = store.set_pair(a, b)
        except UnknownBoard as e:
            raise HTTPException(status_code=404, detail=f"unknown board {e.args[0]!r}")
        return {"a": doc_a, "b": doc_b}

    @app.get("/export")
    def export(request: Request):
        check_token(request)
        text, _ = store.export_manifest()
        return PlainTextResponse(text, media_type="text/csv")

    @app.get("/export/report")
    def export_report(request: Request):
        check_token(request)
        _, report = store.export_manifest()
        return report

    ui_dir = Path(workspace) / "ui"
    if ui_dir.is_dir():
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app
