"""Command-line pipeline orchestration.

Every subcommand reads/writes a workspace directory, serializes its resolved
configuration next to its outputs, and writes a ``summaries/<command>.json``
with a content hash over everything it produced, so identical seeds and
inputs reproduce identical summary hashes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .manifest import (
    DatasetManifest, ManifestError, Taxonomy, export_manifest, parse_manifest,
    pair_views, write_rejection_report,
)

log = logging.getLogger(__name__)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _checkpoint_digest(path: Path) -> str:
    """Content hash of a torch checkpoint.

    The zip container embeds the archive stem and a per-save serialization
    id, so raw bytes are never reproducible; hash the tensors and metadata
    instead.
    """
    import torch

    payload = torch.load(path, map_location="cpu", weights_only=False)
    h = hashlib.sha256()
    for key in sorted(k for k in payload if k != "state_dict"):
        h.update(key.encode())
        h.update(json.dumps(payload[key], sort_keys=True, default=str).encode())
    for name, tensor in sorted(payload["state_dict"].items()):
        h.update(name.encode())
        h.update(str(tensor.dtype).encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


def _digest(path: Path) -> str:
    return _checkpoint_digest(path) if path.suffix == ".pt" else _sha256(path)


def _write_summary(ws: Path, command: str, config: dict, outputs: list[Path],
                   extra: dict | None = None) -> Path:
    digests = {str(p.relative_to(ws)): _digest(p) for p in sorted(set(outputs))}
    body = {"command": command, "version": __version__, "config": config,
            "outputs": digests}
    if extra:
        body["summary"] = extra
    body["summary_hash"] = hashlib.sha256(
        json.dumps(body, sort_keys=True).encode()).hexdigest()
    out = ws / "summaries"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True))
    click.echo(f"{command}: summary {body['summary_hash'][:16]} -> {path}")
    return path


def _record_config(ws: Path, command: str, config: dict) -> Path:
    out = ws / "run_configs"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}.json"
    path.write_text(json.dumps({"version": __version__, **config}, indent=2, sort_keys=True))
    return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise click.ClickException("config file must be a YAML mapping")
    return data


def _taxonomy_from(cfg: dict) -> Taxonomy:
    t = cfg.get("taxonomy", {})
    kwargs = {}
    if "included" in t:
        kwargs["included"] = tuple(t["included"])
    if "excluded" in t:
        kwargs["excluded"] = frozenset(t["excluded"])
    if "min_class_count" in t:
        kwargs["min_class_count"] = int(t["min_class_count"])
    return Taxonomy(**kwargs)


def _parse_size(text: str) -> tuple[int, int]:
    w, h = text.lower().split("x")
    return int(w), int(h)


class _Ctx:
    def __init__(self, workspace: Path, config: dict):
        self.ws = workspace
        self.config = config


@click.group()
@click.option("--workspace", "-w", envvar="KRILLBOARD_WORKSPACE", required=True,
              type=click.Path(path_type=Path), help="Workspace root directory.")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="YAML run configuration (flags override it).")
@click.option("--verbose", "-v", is_flag=True, default=False)
@click.pass_context
def main(ctx, workspace: Path, config_path, verbose: bool):
    """Specimen board pipeline: generate, ingest, detect, curate, train, serve."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workspace.mkdir(parents=True, exist_ok=True)
    ctx.obj = _Ctx(workspace, _load_config_file(config_path))


def _opt(ctx: _Ctx, section: str, key: str, flag_value, default):
    """Flag > config file > default."""
    if flag_value is not None:
        return flag_value
    return ctx.config.get(section, {}).get(key, default)


@main.command()
@click.option("--boards", "n_boards", type=int, default=None)
@click.option("--specimens", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--board-size", default=None, help="WxH pixels")
@click.option("--px-per-mm", type=float, default=None)
@click.option("--length-range", default=None, help="LO-HI millimetres")
@click.option("--body-aspect", type=float, default=None)
@click.pass_obj
def synth(ctx: _Ctx, n_boards, specimens, seed, board_size, px_per_mm,
          length_range, body_aspect):
    """Generate a synthetic ground-truth dataset into the workspace."""
    from . import synth as synthmod

    kwargs = {}
    kwargs["n_boards"] = _opt(ctx, "synth", "n_boards", n_boards, 4)
    kwargs["specimens_per_board"] = _opt(ctx, "synth", "specimens_per_board", specimens, 25)
    kwargs["seed"] = _opt(ctx, "synth", "seed", seed, 0)
    size = _opt(ctx, "synth", "board_size", board_size, None)
    if size:
        kwargs["board_size"] = _parse_size(size) if isinstance(size, str) else tuple(size)
    ppm = _opt(ctx, "synth", "px_per_mm", px_per_mm, None)
    if ppm:
        kwargs["px_per_mm"] = float(ppm)
    lr_ = _opt(ctx, "synth", "length_range_mm", length_range, None)
    if lr_:
        lo, hi = (int(v) for v in lr_.split("-")) if isinstance(lr_, str) else lr_
        kwargs["length_range_mm"] = (lo, hi)
    aspect = _opt(ctx, "synth", "body_aspect", body_aspect, None)
    if aspect:
        kwargs["body_aspect"] = float(aspect)

    cfg = synthmod.SynthConfig(**kwargs)
    manifest = synthmod.write_dataset(cfg, ctx.ws)
    config = {"synth": {**kwargs, "board_size": list(cfg.board_size),
                        "length_range_mm": list(cfg.length_range_mm)}}
    _record_config(ctx.ws, "synth", config)
    outputs = [ctx.ws / "manifest.csv",
               *(ctx.ws / "boards").glob("*.png"), *(ctx.ws / "masks").glob("*.json")]
    _write_summary(ctx.ws, "synth", config, outputs,
                   extra={"records": len(manifest.records),
                          "boards": len(manifest.boards)})


@main.command()
@click.option("--table", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--boards", "boards_dir", required=True,
              type=click.Path(path_type=Path))
@click.pass_obj
def ingest(ctx: _Ctx, table: Path, boards_dir: Path):
    """Parse + pair an annotation table against a boards directory."""
    if not boards_dir.is_dir():
        raise click.ClickException(f"boards directory {boards_dir} does not exist")
    try:
        manifest = parse_manifest(table, boards_dir, taxonomy=_taxonomy_from(ctx.config))
    except ManifestError as e:
        raise click.ClickException(str(e))
    paired = pair_views(manifest)
    out_manifest = export_manifest(paired, ctx.ws / "manifest.csv")
    rejects = write_rejection_report(manifest, ctx.ws / "rejections.jsonl")
    config = {"ingest": {"table": str(table), "boards": str(boards_dir)}}
    _record_config(ctx.ws, "ingest", config)
    report = paired.pair_report
    _write_summary(ctx.ws, "ingest", config, [out_manifest, rejects], extra={
        "rows": len(manifest.records) + len(manifest.rejections),
        "parsed": len(manifest.records), "rejected": len(manifest.rejections),
        "paired": report.retained, "dropped": report.dropped,
        "drop_reasons": dict(report.drop_reasons),
    })
    click.echo(f"ingest: {report.retained} paired records, "
               f"{len(manifest.rejections)} rejected rows")


@main.command()
@click.option("--masks", "masks_dir", type=click.Path(path_type=Path), default=None,
              help="Where to write bootstrap masks (default: workspace/masks).")
@click.option("--tol", type=float, default=30.0)
@click.pass_obj
def bootstrap(ctx: _Ctx, masks_dir, tol: float):
    """Bootstrap instance masks from manifest boxes via the chroma prior."""
    from .segmentation import DetectionResult, boxes_to_masks, detection_to_json, index_positions

    manifest = _load_ws_manifest(ctx)
    out_dir = masks_dir or ctx.ws / "masks"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for board in manifest.boards:
        recs = manifest.records_for(board.file.name)
        masks = boxes_to_masks(board, [r.bbox for r in recs], tol=tol)
        boxes = [m.bbox for m in masks]
        result = DetectionResult(board=board.file.name, instances=masks,
                                 boxes=boxes, indices=index_positions(boxes))
        doc = detection_to_json(result, board.size)
        path = out_dir / f"{board.file.name}.json"
        path.write_text(json.dumps(doc))
        outputs.append(path)
    config = {"bootstrap": {"tol": tol}}
    _record_config(ctx.ws, "bootstrap", config)
    _write_summary(ctx.ws, "bootstrap", config, outputs,
                   extra={"boards": len(manifest.boards)})


def _load_ws_manifest(ctx: _Ctx) -> DatasetManifest:
    path = ctx.ws / "manifest.csv"
    if not path.is_file():
        raise click.ClickException(f"no manifest at {path}; run synth or ingest first")
    return parse_manifest(path, ctx.ws / "boards", taxonomy=_taxonomy_from(ctx.config))


def _load_gt_masks(ctx: _Ctx, board_name: str):
    from .segmentation import detection_from_json

    path = ctx.ws / "masks" / f"{board_name}.json"
    if not path.is_file():
        return None
    _, instances, _, _ = detection_from_json(json.loads(path.read_text()))
    return instances


@main.command("train-seg")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--backbone", default=None)
@click.option("--split", default=None, help="random | cruise:<NAME>")
@click.option("--freeze-epochs", type=int, default=None)
@click.option("--out", "model_out", default=None)
@click.pass_obj
def train_seg(ctx: _Ctx, epochs, lr, seed, backbone, split, freeze_epochs, model_out):
    """Train the instance segmenter on boards with ground-truth masks."""
    from .segmentation import (
        LeaveOneCruiseOut, Random80_20, SegTrainConfig, split_dataset, train_segmenter,
    )

    manifest = _load_ws_manifest(ctx)
    seed_v = _opt(ctx, "train_seg", "seed", seed, 0)
    split_v = _opt(ctx, "train_seg", "split", split, "random")
    policy = (LeaveOneCruiseOut(split_v.split(":", 1)[1]) if split_v.startswith("cruise:")
              else Random80_20())
    train_boards, test_boards = split_dataset(manifest, policy, seed=seed_v)

    items = []
    for board in train_boards:
        masks = _load_gt_masks(ctx, board.file.name)
        if masks is None:
            raise click.ClickException(
                f"board {board.file.name} has no mask file under masks/; "
                "run synth or bootstrap first")
        items.append((board, masks))

    cfg = SegTrainConfig(
        epochs=_opt(ctx, "train_seg", "epochs", epochs, 30),
        learning_rate=_opt(ctx, "train_seg", "learning_rate", lr, 2e-3),
        seed=seed_v,
        backbone=_opt(ctx, "train_seg", "backbone", backbone, "resnet50_fpn"),
        freeze_backbone_epochs=_opt(ctx, "train_seg", "freeze_backbone_epochs",
                                    freeze_epochs, 5),
    )
    model = train_segmenter(items, cfg)
    out_path = ctx.ws / "models" / (model_out or "segmenter.pt")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(out_path)
    split_doc = {"train": [b.file.name for b in train_boards],
                 "test": [b.file.name for b in test_boards]}
    split_path = ctx.ws / "models" / "seg_split.json"
    split_path.write_text(json.dumps(split_doc, indent=1))

    from dataclasses import asdict
    config = {"train_seg": {**asdict(cfg), "split": split_v}}
    _record_config(ctx.ws, "train_seg", config)
    _write_summary(ctx.ws, "train_seg", config, [out_path, split_path], extra={
        "train_boards": len(train_boards), "test_boards": len(test_boards),
        "loss_curve": [round(v, 6) for v in model.loss_curve],
    })
    click.echo(f"train-seg: final epoch loss {model.loss_curve[-1]:.4f} -> {out_path}")


@main.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--boards", "boards_dir", type=click.Path(path_type=Path), default=None)
@click.option("--threshold", type=click.FloatRange(0.0, 1.0), default=0.5)
@click.pass_obj
def detect(ctx: _Ctx, model_path: Path, boards_dir, threshold: float):
    """Run the segmenter over boards and write per-board detection JSON."""
    from PIL import Image
    from .segmentation import SegmenterModel, detect as run_detect, detection_to_json

    boards_dir = boards_dir or ctx.ws / "boards"
    files = sorted(p for p in Path(boards_dir).glob("*") if p.suffix.lower() in
                   (".png", ".jpg", ".jpeg")) if Path(boards_dir).is_dir() else []
    if not files:
        click.echo("detect: no board images found; nothing to do", err=True)
    model = SegmenterModel.load(model_path)
    out_dir = ctx.ws / "detections"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    total = 0
    for f in files:
        with Image.open(f) as im:
            pixels = np.asarray(im.convert("RGB"))
        result = run_detect(pixels, model, score_threshold=threshold)
        result.board = f.name
        doc = detection_to_json(result, (pixels.shape[1], pixels.shape[0]))
        path = out_dir / f"{f.name}.json"
        path.write_text(json.dumps(doc))
        outputs.append(path)
        total += len(result.instances)
    config = {"detect": {"model": str(model_path), "threshold": threshold,
                         "boards": str(boards_dir)}}
    _record_config(ctx.ws, "detect", config)
    _write_summary(ctx.ws, "detect", config, outputs,
                   extra={"boards": len(files), "instances": total})


@main.command("eval-det")
@click.option("--detections", "det_dir", type=click.Path(path_type=Path), default=None,
              help="Detection JSON directory (default: workspace/detections).")
@click.option("--truth", "truth_dir", type=click.Path(path_type=Path), default=None,
              help="Ground-truth mask JSON directory (default: workspace/masks).")
@click.option("--kind", type=click.Choice(["mask", "box"]), default="mask")
@click.pass_obj
def eval_det(ctx: _Ctx, det_dir, truth_dir, kind):
    """Score detection JSONs against ground-truth masks (AP/AP50/AP75)."""
    from PIL import Image
    from .metrics import MatchSpec, average_precision
    from .segmentation import detection_from_json

    det_dir = Path(det_dir or ctx.ws / "detections")
    truth_dir = Path(truth_dir or ctx.ws / "masks")
    truth_files = sorted(truth_dir.glob("*.json"))
    if not truth_files:
        raise click.ClickException(f"no ground-truth mask JSONs under {truth_dir}")

    preds_by_image, gts_by_image = [], []
    for tf in truth_files:
        board_name = tf.name[:-len(".json")]
        with Image.open(ctx.ws / "boards" / board_name) as im:
            w, h = im.size
        _, gt_masks, gt_boxes, _ = detection_from_json(json.loads(tf.read_text()))
        df = det_dir / tf.name
        if df.is_file():
            _, dm, db, _ = detection_from_json(json.loads(df.read_text()))
        else:
            dm, db = [], []
        if kind == "mask":
            gts_by_image.append([m.to_board(w, h) for m in gt_masks])
            preds_by_image.append([(m.to_board(w, h), m.effective_score) for m in dm])
        else:
            gts_by_image.append(gt_boxes)
            preds_by_image.append([(b, m.effective_score) for b, m in zip(db, dm)])

    rep = average_precision(preds_by_image, gts_by_image, MatchSpec(iou_kind=kind))
    out_dir = ctx.ws / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"detection_ap_{kind}.json"
    path.write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True))
    config = {"eval_det": {"kind": kind, "detections": str(det_dir),
                           "truth": str(truth_dir)}}
    _record_config(ctx.ws, "eval_det", config)
    _write_summary(ctx.ws, "eval_det", config, [path],
                   extra={"ap": round(rep.ap, 6), "ap50": round(rep.ap50, 6),
                          "ap75": round(rep.ap75, 6)})
    click.echo(f"eval-det ({kind}): AP {100 * rep.ap:.2f}%  "
               f"AP50 {100 * rep.ap50:.2f}%  AP75 {100 * rep.ap75:.2f}%  "
               f"recall {100 * rep.recall:.2f}%")


@main.command()
@click.option("--resolutions", default=None, help="comma-separated WxH list")
@click.option("--min-class-count", type=int, default=None)
@click.option("--canvas", default=None, help="canvas WxH (default 1700x500)")
@click.pass_obj
def curate(ctx: _Ctx, resolutions, min_class_count, canvas):
    """Crop, pad, filter and resize the paired manifest into ladder datasets."""
    from .curation import (
        CropSpec, build_resolution_ladder, class_weights, curate_record,
        filter_taxonomy, write_curated, DEFAULT_RESOLUTIONS,
    )

    manifest = pair_views(_load_ws_manifest(ctx))
    tax = manifest.taxonomy
    mcc = _opt(ctx, "curate", "min_class_count", min_class_count, None)
    if mcc is not None:
        tax = Taxonomy(included=tax.included, excluded=tax.excluded,
                       min_class_count=int(mcc))
    res_v = _opt(ctx, "curate", "resolutions", resolutions, None)
    res = (tuple(_parse_size(s) for s in res_v.split(",")) if isinstance(res_v, str)
           else tuple(tuple(r) for r in res_v) if res_v else DEFAULT_RESOLUTIONS)
    canvas_v = _opt(ctx, "curate", "canvas", canvas, None)
    spec = CropSpec(*(_parse_size(canvas_v) if canvas_v else (1700, 500)))

    samples = []
    for board in manifest.boards:
        for rec in manifest.records_for(board.file.name):
            samples.append(curate_record(board, rec, spec))
    kept, removals = filter_taxonomy(samples, tax)
    if not kept:
        raise click.ClickException("curation removed every sample; check the taxonomy")
    counts = Counter(s.label for s in kept)
    weights = class_weights(counts)
    datasets = build_resolution_ladder(kept, resolutions=res)
    out = write_curated(datasets, ctx.ws / "curated", spec, tax, weights=weights)

    config = {"curate": {"resolutions": [list(r) for r in res],
                         "canvas": [spec.canvas_w, spec.canvas_h],
                         "min_class_count": tax.min_class_count}}
    _record_config(ctx.ws, "curate", config)
    outputs = list(out.rglob("*.png")) + list(out.rglob("*.csv")) + [out / "meta.json"]
    _write_summary(ctx.ws, "curate", config, outputs, extra={
        "samples": len(kept), "removed": removals,
        "class_counts": dict(sorted(counts.items())),
        "weights": {k: round(v, 6) for k, v in sorted(weights.weights.items())},
    })
    click.echo(f"curate: {len(kept)} samples -> {out}")


def _load_cell(ctx: _Ctx, view: str, resolution: tuple[int, int], class_order):
    from .estimation import load_dataset

    cell = ctx.ws / "curated" / view / f"{resolution[0]}x{resolution[1]}"
    if not cell.is_dir():
        raise click.ClickException(
            f"curated dataset {cell} not built; run curate with this resolution")
    return load_dataset(cell, class_order)


def _class_order(ctx: _Ctx) -> tuple[str, ...]:
    meta_path = ctx.ws / "curated" / "meta.json"
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        return tuple(meta["taxonomy"]["included"])
    return _taxonomy_from(ctx.config).included


@main.command("train-est")
@click.option("--task", type=click.Choice(["maturity", "length"]), required=True)
@click.option("--view", type=click.Choice(["Lateral", "Dorsal"]), required=True)
@click.option("--resolution", required=True, help="WxH, e.g. 340x100")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--backbone", default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--no-augment", is_flag=True, default=False)
@click.pass_obj
def train_est(ctx: _Ctx, task, view, resolution, epochs, lr, seed, backbone,
              batch_size, no_augment):
    """Train one estimator cell and report held-out metrics."""
    from dataclasses import asdict
    from .curation import class_weights
    from .estimation import (
        ColorJitter, EstimatorConfig, evaluate, split_records, train_estimator,
    )

    res = _parse_size(resolution)
    data = _load_cell(ctx, view, res, _class_order(ctx))
    seed_v = _opt(ctx, "train_est", "seed", seed, 0)
    train_idx, test_idx = split_records(len(data), seed=seed_v)
    train, test = data.subset(train_idx), data.subset(test_idx)

    weights = None
    if task == "maturity":
        counts = Counter(train.labels)
        weights = class_weights(counts)
        missing = [c for c in counts if c not in train.class_order]
        if missing:
            raise click.ClickException(f"labels outside the class order: {missing}")

    cfg = EstimatorConfig(
        task=task, view=view, resolution=res,
        epochs=_opt(ctx, "train_est", "epochs", epochs, 60),
        learning_rate=_opt(ctx, "train_est", "learning_rate", lr, 1e-3),
        weights=weights,
        augment=None if no_augment else ColorJitter(),
        seed=seed_v,
        backbone=_opt(ctx, "train_est", "backbone", backbone, "resnet50"),
        batch_size=_opt(ctx, "train_est", "batch_size", batch_size, 16),
    )
    model = train_estimator(train, cfg, val_data=test)
    report = evaluate(model, test)

    out_path = ctx.ws / "models" / f"estimator_{task}_{view}_{res[0]}x{res[1]}.pt"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(out_path)

    cfg_doc = asdict(cfg)
    cfg_doc["weights"] = None if weights is None else weights.weights
    config = {"train_est": cfg_doc}
    _record_config(ctx.ws, "train_est", config)
    unit = "%" if task == "maturity" else "mm"
    _write_summary(ctx.ws, "train_est", config, [out_path], extra={
        "metric": round(report.metric, 6), "unit": unit,
        "n_train": len(train), "n_test": len(test),
        "train_curve": [round(v, 6) for v in model.curves["train"]],
    })
    click.echo(f"train-est: {task}/{view}/{resolution} -> {report.metric:.3f} {unit}")


@main.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--view", type=click.Choice(["Lateral", "Dorsal"]), required=True)
@click.option("--resolution", required=True)
@click.pass_obj
def evaluate(ctx: _Ctx, model_path: Path, view, resolution):
    """Evaluate a saved estimator on the held-out split of its cell."""
    from .estimation import EstimatorModel, evaluate as eval_model, split_records

    model = EstimatorModel.load(model_path)
    res = _parse_size(resolution)
    data = _load_cell(ctx, view, res, model.class_order)
    _, test_idx = split_records(len(data), seed=model.config.seed)
    report = eval_model(model, data.subset(test_idx))

    out_dir = ctx.ws / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"task": report.task, "view": report.view,
           "resolution": list(report.resolution), "metric": report.metric,
           "per_class": report.per_class, "n_test": report.n_test,
           "balanced_accuracy": report.balanced_accuracy}
    path = out_dir / f"eval_{report.task}_{view}_{resolution}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    config = {"evaluate": {"model": str(model_path), "view": view,
                           "resolution": resolution}}
    _record_config(ctx.ws, "evaluate", config)
    _write_summary(ctx.ws, "evaluate", config, [path], extra={"metric": report.metric})
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


@main.command()
@click.option("--resolutions", default=None, help="comma-separated WxH subset")
@click.option("--views", default="Lateral,Dorsal")
@click.option("--tasks", default="length,maturity")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--backbone", default=None)
@click.pass_obj
def ladder(ctx: _Ctx, resolutions, views, tasks, epochs, lr, seed, backbone):
    """Train/evaluate the resolution x view x task grid and emit the summary table."""
    from .curation import class_weights
    from .estimation import run_ladder, split_records

    class_order = _class_order(ctx)
    res_list = ([_parse_size(s) for s in resolutions.split(",")] if resolutions
                else [tuple(_parse_size(p.name)) for p in sorted(
                    (ctx.ws / "curated").glob("*/*")) if p.is_dir()])
    view_list = views.split(",")
    seed_v = _opt(ctx, "ladder", "seed", seed, 0)

    datasets = {}
    weights_by_view = {}
    for view in view_list:
        for res in sorted(set(res_list)):
            cell = ctx.ws / "curated" / view / f"{res[0]}x{res[1]}"
            if not cell.is_dir():
                continue
            data = _load_cell(ctx, view, res, class_order)
            tr, te = split_records(len(data), seed=seed_v)
            datasets[(view, res)] = (data.subset(tr), data.subset(te))
            if view not in weights_by_view:
                weights_by_view[view] = class_weights(Counter(data.subset(tr).labels))

    if not datasets:
        raise click.ClickException("no curated cells found for the requested grid")

    base = {"epochs": _opt(ctx, "ladder", "epochs", epochs, 60),
            "learning_rate": _opt(ctx, "ladder", "learning_rate", lr, 1e-3),
            "seed": seed_v,
            "backbone": _opt(ctx, "ladder", "backbone", backbone, "resnet50")}
    out_dir = ctx.ws / "reports"
    report = run_ladder(datasets, base, tasks=tuple(tasks.split(",")),
                        out_dir=out_dir, weights_by_view=weights_by_view)

    config = {"ladder": {**base, "views": view_list,
                         "resolutions": [list(r) for r in sorted(set(res_list))],
                         "tasks": tasks.split(",")}}
    _record_config(ctx.ws, "ladder", config)
    outputs = list(out_dir.glob("table2.csv")) + list(out_dir.glob("confusion_*.csv")) \
        + list(out_dir.glob("curves_*.csv"))
    cells_doc = {f"{v}_{r[0]}x{r[1]}_{t}": (None if rep is None else round(rep.metric, 6))
                 for (v, r, t), rep in report.cells.items()}
    means_doc = {f"{v}_{t}": round(m, 6) for (v, t), m in report.view_means.items()}
    _write_summary(ctx.ws, "ladder", config, outputs,
                   extra={"cells": cells_doc, "view_means": means_doc})
    for row in report.table_rows():
        click.echo("\t".join(str(v) for v in row))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="Segmenter checkpoint for POST /detect.")
@click.option("--token", default=None, envvar="KRILLBOARD_TOKEN")
@click.pass_obj
def serve(ctx: _Ctx, host: str, port: int, model_path, token):
    """Run the annotation HTTP service over the workspace."""
    import uvicorn
    from .service import create_app

    app = create_app(ctx.ws, model_path=model_path,
                     taxonomy=_taxonomy_from(ctx.config), token=token)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
