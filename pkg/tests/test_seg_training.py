"""Training/inference tests for the segmenter (slow: real torch training)."""

import numpy as np
import pytest

from krillboard import synth
from krillboard.segmentation import (
    SegmenterModel, SegTrainConfig, detect, train_segmenter,
)

pytestmark = pytest.mark.slow

TINY = dict(n_boards=2, specimens_per_board=4, board_size=(416, 288),
            px_per_mm=1.6, length_range_mm=(20, 50), body_aspect=0.22, seed=17)


@pytest.fixture(scope="module")
def tiny_boards():
    boards, _ = synth.generate(synth.SynthConfig(**TINY))
    return boards


@pytest.fixture(scope="module")
def tiny_model(tiny_boards):
    cfg = SegTrainConfig(epochs=3, backbone="resnet18_fpn", learning_rate=2e-3,
                         freeze_backbone_epochs=0, seed=0, warmup_iters=8)
    items = [(b.image, b.instances) for b in tiny_boards]
    return train_segmenter(items, cfg)


def test_loss_curve_decreases(tiny_model):
    curve = tiny_model.loss_curve
    assert len(curve) == 3
    assert curve[-1] < curve[0]


def test_training_is_deterministic(tiny_boards):
    cfg = SegTrainConfig(epochs=1, backbone="resnet18_fpn", learning_rate=2e-3,
                         freeze_backbone_epochs=0, seed=0, warmup_iters=8)
    items = [(b.image, b.instances) for b in tiny_boards]
    a = train_segmenter(items, cfg)
    b = train_segmenter(items, cfg)
    assert np.allclose(a.loss_curve, b.loss_curve, atol=1e-7)


def test_empty_train_set_errors():
    cfg = SegTrainConfig(epochs=1, backbone="resnet18_fpn")
    with pytest.raises(ValueError, match="empty"):
        train_segmenter([], cfg)


def test_board_without_masks_errors(tiny_boards):
    cfg = SegTrainConfig(epochs=1, backbone="resnet18_fpn")
    items = [(tiny_boards[0].image, tiny_boards[0].instances),
             (tiny_boards[1].image, [])]
    with pytest.raises(ValueError, match="no ground-truth"):
        train_segmenter(items, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        SegTrainConfig(epochs=0)
    with pytest.raises(ValueError):
        SegTrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        train_segmenter([(np.zeros((4, 4, 3), np.uint8), [])],
                        SegTrainConfig(backbone="vgg"))


def test_detect_threshold_validation(tiny_model, tiny_boards):
    with pytest.raises(ValueError):
        detect(tiny_boards[0].image, tiny_model, score_threshold=1.2)
    with pytest.raises(ValueError):
        detect(tiny_boards[0].image, tiny_model, score_threshold=-0.1)


def test_detect_channel_mismatch(tiny_model):
    grey = np.zeros((288, 416), dtype=np.uint8)
    with pytest.raises(ValueError, match="HxWx3"):
        detect(grey, tiny_model)


def test_detect_blank_board_has_no_instances(tiny_model):
    blank = np.empty((288, 416, 3), dtype=np.uint8)
    blank[:] = (56, 127, 245)
    result = detect(blank, tiny_model, score_threshold=0.5)
    assert result.instances == []
    assert result.indices == []


def test_detect_threshold_monotonicity(tiny_model, tiny_boards):
    counts = []
    for thr in (0.05, 0.5, 0.9, 1.0):
        res = detect(tiny_boards[0].image, tiny_model, score_threshold=thr)
        counts.append(len(res.instances))
        for inst in res.instances:
            assert inst.score >= thr
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_save_load_round_trip(tiny_model, tiny_boards, tmp_path):
    path = tiny_model.save(tmp_path / "seg.pt")
    again = SegmenterModel.load(path)
    assert again.config == tiny_model.config
    assert np.allclose(again.loss_curve, tiny_model.loss_curve)
    a = detect(tiny_boards[0].image, tiny_model, score_threshold=0.05)
    b = detect(tiny_boards[0].image, again, score_threshold=0.05)
    assert len(a.instances) == len(b.instances)
    assert a.boxes == b.boxes
