"""Maturity-stage classification and body-length regression over the
resolution ladder.

Both tasks share a fully trainable residual backbone.  The classifier head
is a linear layer over the taxonomy classes trained with class-weighted
cross-entropy; the regressor is a single linear output trained with an RMSE
loss on raw millimetre targets, so reported test error reads directly as
average millimetric deviation.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
from PIL import Image

from .curation import ClassWeights

log = logging.getLogger(__name__)

TASK_MATURITY = "maturity"
TASK_LENGTH = "length"


@dataclass(frozen=True)
class ColorJitter:
    """Independent colour perturbations, each applied with probability ``prob``."""

    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    prob: float = 0.5


@dataclass
class EstimatorConfig:
    task: str
    view: str
    resolution: tuple[int, int]
    epochs: int = 60
    learning_rate: float = 1e-3
    weights: ClassWeights | None = None
    augment: ColorJitter | None = field(default_factory=ColorJitter)
    seed: int = 0
    backbone: str = "resnet50"
    batch_size: int = 16
    momentum: float = 0.9

    def __post_init__(self):
        if self.task not in (TASK_MATURITY, TASK_LENGTH):
            raise ValueError(f"task must be maturity or length, got {self.task!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.task == TASK_MATURITY and self.weights is None:
            raise ValueError("maturity estimation requires class weights")


@dataclass
class EstimationData:
    """An in-memory view-specific dataset at one resolution."""

    images: np.ndarray            # (N, H, W, 3) uint8
    lengths: np.ndarray           # (N,) float mm
    labels: list[str]
    ids: list[str]
    view: str
    resolution: tuple[int, int]
    class_order: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "EstimationData":
        idx = np.asarray(idx)
        return EstimationData(
            images=self.images[idx], lengths=self.lengths[idx],
            labels=[self.labels[i] for i in idx], ids=[self.ids[i] for i in idx],
            view=self.view, resolution=self.resolution, class_order=self.class_order,
        )


def data_from_samples(samples, class_order) -> EstimationData:
    """Build an EstimationData from curated samples of one (view, resolution)."""
    if not samples:
        raise ValueError("no samples")
    view = samples[0].view
    res = (samples[0].image.shape[1], samples[0].image.shape[0])
    return EstimationData(
        images=np.stack([s.image for s in samples]),
        lengths=np.array([s.record.length_mm for s in samples], dtype=np.float64),
        labels=[s.record.maturity for s in samples],
        ids=[s.record.id.render() for s in samples],
        view=view, resolution=res, class_order=tuple(class_order),
    )


def load_dataset(cell_dir, class_order) -> EstimationData:
    """Read one curated ``{view}/{WxH}`` directory back into memory."""
    cell_dir = Path(cell_dir)
    rows = list(csv.DictReader((cell_dir / "labels.csv").open()))
    images, lengths, labels, ids = [], [], [], []
    for r in rows:
        with Image.open(cell_dir / f"{r['id']}.png") as im:
            images.append(np.asarray(im.convert("RGB")))
        lengths.append(float(r["length_mm"]))
        labels.append(r["maturity"])
        ids.append(r["id"])
    w, h = (int(v) for v in cell_dir.name.split("x"))
    return EstimationData(
        images=np.stack(images), lengths=np.array(lengths), labels=labels, ids=ids,
        view=cell_dir.parent.name, resolution=(w, h), class_order=tuple(class_order),
    )


def split_records(n: int, seed: int, test_fraction: float = 0.2):
    """Seed-fixed specimen-level 80/20 split; returns (train_idx, test_idx)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    n_test = min(n_test, n - 1) if n > 1 else n_test
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def _build_backbone(name: str, out_dim: int) -> nn.Module:
    import torchvision.models as tvm

    if name == "resnet50":
        return tvm.resnet50(weights=None, num_classes=out_dim)
    if name == "resnet18":
        return tvm.resnet18(weights=None, num_classes=out_dim)
    if name == "smallcnn":
        # GroupNorm: desk-scale runs have too few batches per epoch for
        # BatchNorm running statistics to converge (train/eval mismatch)
        chans = (32, 64, 128, 192)
        layers: list[nn.Module] = []
        prev = 3
        for c in chans:
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1),
                       nn.GroupNorm(8, c), nn.ReLU(inplace=True)]
            prev = c
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(prev, out_dim)]
        return nn.Sequential(*layers)
    raise ValueError(f"unknown backbone {name!r}")


def _jitter_batch(batch: torch.Tensor, jit: ColorJitter, gen: torch.Generator) -> torch.Tensor:
    from torchvision.transforms import functional as F

    out = []
    for img in batch:
        draws = torch.rand(8, generator=gen)
        if draws[0] < jit.prob:
            img = F.adjust_brightness(img, 1.0 + jit.brightness * (2 * draws[4] - 1))
        if draws[1] < jit.prob:
            img = F.adjust_contrast(img, 1.0 + jit.contrast * (2 * draws[5] - 1))
        if draws[2] < jit.prob:
            img = F.adjust_saturation(img, 1.0 + jit.saturation * (2 * draws[6] - 1))
        if draws[3] < jit.prob:
            img = F.adjust_hue(img, float(jit.hue * (2 * draws[7] - 1)))
        out.append(img)
    return torch.stack(out)


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    arr = np.array(images, dtype=np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2) / 255.0


def _normalize(batch: torch.Tensor) -> torch.Tensor:
    return (batch - 0.5) / 0.5


def _targets(data: EstimationData, cfg: EstimatorConfig) -> torch.Tensor:
    if cfg.task == TASK_LENGTH:
        return torch.from_numpy(data.lengths).float()
    index = {c: i for i, c in enumerate(data.class_order)}
    missing = sorted({l for l in data.labels if l not in index})
    if missing:
        raise ValueError(f"dataset labels missing from the class order: {missing}")
    return torch.tensor([index[l] for l in data.labels], dtype=torch.int64)


def rmse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.mean((pred - target) ** 2) + 1e-12)


def _output_linear(model: nn.Module) -> nn.Linear:
    last = None
    for m in model.modules():
        if isinstance(m, nn.Linear):
            last = m
    assert last is not None
    return last


class EstimatorModel:
    """Trained estimator handle with its config and per-epoch loss curves."""

    def __init__(self, module: nn.Module, config: EstimatorConfig,
                 class_order: tuple[str, ...], curves: dict):
        self.module = module
        self.config = config
        self.class_order = class_order
        self.curves = curves

    def predict(self, data: EstimationData, batch_size: int = 64) -> np.ndarray:
        """Class indices for maturity, millimetres for length."""
        self.module.eval()
        outs = []
        with torch.no_grad():
            for i in range(0, len(data), batch_size):
                x = _normalize(_to_tensor(data.images[i:i + batch_size]))
                y = self.module(x)
                if self.config.task == TASK_MATURITY:
                    outs.append(y.argmax(dim=1).numpy())
                else:
                    outs.append(y[:, 0].numpy())
        return np.concatenate(outs)

    def save(self, path) -> Path:
        path = Path(path)
        cfg = asdict(self.config)
        cfg["weights"] = None if self.config.weights is None else self.config.weights.weights
        cfg["augment"] = None if self.config.augment is None else asdict(self.config.augment)
        torch.save({
            "config": json.dumps(cfg),
            "class_order": list(self.class_order),
            "curves": self.curves,
            "normalization": {"mean": 0.5, "std": 0.5},
            "state_dict": self.module.state_dict(),
        }, path)
        return path

    @classmethod
    def load(cls, path) -> "EstimatorModel":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        raw = json.loads(payload["config"])
        raw["resolution"] = tuple(raw["resolution"])
        raw["weights"] = None if raw["weights"] is None else ClassWeights(raw["weights"])
        raw["augment"] = None if raw["augment"] is None else ColorJitter(**raw["augment"])
        config = EstimatorConfig(**raw)
        class_order = tuple(payload["class_order"])
        out_dim = len(class_order) if config.task == TASK_MATURITY else 1
        module = _build_backbone(config.backbone, out_dim)
        module.load_state_dict(payload["state_dict"])
        module.eval()
        return cls(module, config, class_order, payload.get("curves", {}))


def train_estimator(train_data: EstimationData, cfg: EstimatorConfig,
                    val_data: EstimationData | None = None) -> EstimatorModel:
    """Train one estimator cell; deterministic for a fixed seed."""
    if (train_data.images.shape[2], train_data.images.shape[1]) != tuple(cfg.resolution):
        raise ValueError(
            f"dataset resolution {train_data.images.shape[2]}x{train_data.images.shape[1]} "
            f"does not match config {cfg.resolution}")
    torch.manual_seed(cfg.seed)
    out_dim = len(train_data.class_order) if cfg.task == TASK_MATURITY else 1
    model = _build_backbone(cfg.backbone, out_dim)
    if cfg.task == TASK_LENGTH:
        # raw-mm targets sit far from a zero-init head; starting the output
        # bias at the train mean keeps the bounded RMSE gradient effective
        with torch.no_grad():
            _output_linear(model).bias.fill_(float(train_data.lengths.mean()))
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                                momentum=cfg.momentum)

    if cfg.task == TASK_MATURITY:
        w = cfg.weights.vector(train_data.class_order)
        criterion = nn.CrossEntropyLoss(weight=torch.from_numpy(w).float())
    else:
        criterion = rmse_loss

    targets = _targets(train_data, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(train_data)
    curves: dict[str, list[float]] = {"train": [], "test": []}

    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        losses = []
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x = _to_tensor(train_data.images[idx.numpy()])
            if cfg.augment is not None:
                x = _jitter_batch(x, cfg.augment, gen)
            x = _normalize(x)
            y = targets[idx]
            out = model(x)
            loss = criterion(out, y) if cfg.task == TASK_MATURITY else criterion(out[:, 0], y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        curves["train"].append(float(np.mean(losses)))
        if val_data is not None:
            curves["test"].append(_eval_loss(model, val_data, cfg, criterion))
        log.info("estimator %s/%s epoch %d/%d: train loss %.4f",
                 cfg.task, cfg.view, epoch + 1, cfg.epochs, curves["train"][-1])

    model.eval()
    return EstimatorModel(model, cfg, train_data.class_order, curves)


def _eval_loss(model, data: EstimationData, cfg: EstimatorConfig, criterion) -> float:
    model.eval()
    targets = _targets(data, cfg)
    losses = []
    weights = []
    with torch.no_grad():
        for i in range(0, len(data), 64):
            x = _normalize(_to_tensor(data.images[i:i + 64]))
            y = targets[i:i + 64]
            out = model(x)
            loss = criterion(out, y) if cfg.task == TASK_MATURITY else criterion(out[:, 0], y)
            losses.append(float(loss))
            weights.append(len(y))
    model.train()
    return float(np.average(losses, weights=weights))


@dataclass
class EvalReport:
    task: str
    view: str
    resolution: tuple[int, int]
    metric: float                     # accuracy % (maturity) or RMSE mm (length)
    per_class: dict[str, float]
    confusion: np.ndarray | None
    class_order: tuple[str, ...] | None
    balanced_accuracy: float | None
    loss_curves: dict[str, list[float]]
    n_test: int

    def confusion_rows(self):
        assert self.confusion is not None
        yield ["true\\pred"] + list(self.class_order)
        for label, row in zip(self.class_order, self.confusion):
            yield [label] + [int(v) for v in row]


def evaluate(model: EstimatorModel, test_data: EstimationData) -> EvalReport:
    """Accuracy + confusion matrix for maturity; RMSE in mm for length."""
    if len(test_data) == 0:
        raise ValueError("empty test set")
    preds = model.predict(test_data)
    return report_from_predictions(preds, test_data, model.config.task,
                                   class_order=model.class_order, curves=model.curves)


def report_from_predictions(preds: np.ndarray, data: EstimationData, task: str,
                            class_order=None, curves=None) -> EvalReport:
    """Build the evaluation report from raw predictions (class idx or mm)."""
    if len(data) == 0:
        raise ValueError("empty test set")
    curves = curves or {}

    if task == TASK_MATURITY:
        order = tuple(class_order or data.class_order)
        index = {c: i for i, c in enumerate(order)}
        truth = np.array([index[l] for l in data.labels])
        k = len(order)
        confusion = np.zeros((k, k), dtype=np.int64)
        for t, p in zip(truth, preds):
            confusion[t, int(p)] += 1
        supports = confusion.sum(axis=1)
        assert supports.sum() == len(data)
        accuracy = 100.0 * float(np.trace(confusion)) / confusion.sum()
        per_class = {
            c: (100.0 * confusion[i, i] / supports[i]) if supports[i] else float("nan")
            for i, c in enumerate(order)
        }
        balanced = float(np.mean(
            [100.0 * confusion[i, i] / supports[i] for i in range(k) if supports[i]]))
        return EvalReport(
            task=task, view=data.view, resolution=data.resolution,
            metric=accuracy, per_class=per_class, confusion=confusion,
            class_order=order, balanced_accuracy=balanced,
            loss_curves=curves, n_test=len(data),
        )

    preds = np.asarray(preds, dtype=np.float64)
    if not np.all(np.isfinite(preds)):
        raise ValueError("length predictions are not finite")
    rmse = float(np.sqrt(np.mean((preds - data.lengths) ** 2)))
    return EvalReport(
        task=task, view=data.view, resolution=data.resolution,
        metric=rmse, per_class={}, confusion=None, class_order=None,
        balanced_accuracy=None, loss_curves=curves, n_test=len(data),
    )


@dataclass
class LadderReport:
    resolutions: list[tuple[int, int]]
    cells: dict                       # (view, (w, h), task) -> EvalReport | None
    view_means: dict                  # (view, task) -> float

    def table_rows(self):
        yield ["Resolution", "Lateral Length", "Lateral Maturity",
               "Dorsal Length", "Dorsal Maturity"]
        for res in self.resolutions:
            row = [f"{res[0]}x{res[1]}"]
            for view in ("Lateral", "Dorsal"):
                for task in (TASK_LENGTH, TASK_MATURITY):
                    rep = self.cells.get((view, res, task))
                    row.append("" if rep is None else f"{rep.metric:.2f}")
            yield row


def run_ladder(datasets, base_cfg: dict, tasks=(TASK_LENGTH, TASK_MATURITY),
               out_dir=None, weights_by_view: dict | None = None) -> LadderReport:
    """Train/evaluate the full resolution x view x task grid.

    ``datasets`` maps (view, (w, h)) -> (train, test) EstimationData pairs.
    Missing cells are marked absent and the run continues.  When ``out_dir``
    is given, writes table2.csv, per-cell confusion and loss-curve CSVs.
    """
    resolutions = sorted({res for (_, res) in datasets}, key=lambda r: r[0])
    views = sorted({view for (view, _) in datasets})
    cells: dict = {}
    for view in views:
        for res in resolutions:
            pair = datasets.get((view, res))
            if pair is None:
                for task in tasks:
                    cells[(view, res, task)] = None
                log.warning("ladder cell %s %s missing; marked absent", view, res)
                continue
            train, test = pair
            for task in tasks:
                cfg = EstimatorConfig(
                    task=task, view=view, resolution=res,
                    weights=(weights_by_view or {}).get(view) if task == TASK_MATURITY else None,
                    **base_cfg,
                )
                model = train_estimator(train, cfg, val_data=test)
                report = evaluate(model, test)
                cells[(view, res, task)] = report

    view_means: dict = {}
    for view in views:
        for task in tasks:
            vals = [cells[(view, r, task)].metric for r in resolutions
                    if cells.get((view, r, task)) is not None]
            if vals:
                view_means[(view, task)] = float(np.mean(vals))

    ladder = LadderReport(resolutions=resolutions, cells=cells, view_means=view_means)
    if out_dir is not None:
        _write_ladder(ladder, Path(out_dir))
    return ladder


def _write_ladder(ladder: LadderReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "table2.csv").open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(ladder.table_rows())
    for (view, res, task), rep in ladder.cells.items():
        if rep is None:
            continue
        stem = f"{view}_{res[0]}x{res[1]}_{task}"
        if rep.confusion is not None:
            with (out_dir / f"confusion_{view}_{res[0]}x{res[1]}.csv").open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerows(rep.confusion_rows())
        with (out_dir / f"curves_{stem}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "test_loss"])
            test = rep.loss_curves.get("test", [])
            for e, tr in enumerate(rep.loss_curves.get("train", [])):
                w.writerow([e + 1, tr, test[e] if e < len(test) else ""])
