import numpy as np
import pytest

from krillboard.curation import (
    ClassWeights, CropSpec, DEFAULT_RESOLUTIONS, build_resolution_ladder,
    center_offset, class_weights, curate_record, extract_crop, filter_taxonomy,
    pad_center, unpad, write_curated,
)
from krillboard.manifest import BBox, SpecimenId, SpecimenRecord, Taxonomy

BG = (56, 127, 245)


def _board(w=1400, h=900):
    rng = np.random.default_rng(42)
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def test_extract_identity_crop():
    board = _board(200, 150)
    crop = extract_crop(board, BBox(0, 0, 200, 150))
    assert (crop == board).all()


def test_extract_table1_sized_crop():
    board = _board()
    crop = extract_crop(board, BBox(469, 751, 869, 114))
    assert crop.shape == (114, 869, 3)
    assert (crop == board[751:865, 469:1338]).all()


def test_extract_out_of_bounds_errors():
    board = _board(200, 150)
    with pytest.raises(ValueError):
        extract_crop(board, BBox(132, 10, 69, 20))  # right edge exceeded by 1


def test_pad_center_offsets_match_recorded_extremes():
    spec = CropSpec()
    assert center_offset(1663, 488, spec) == (18, 6)
    assert center_offset(312, 47, spec) == (694, 226)


def test_pad_center_exact_fit():
    spec = CropSpec()
    crop = _board(1700, 500)
    canvas = pad_center(crop, spec)
    assert (canvas == crop).all()


def test_pad_center_oversized_errors():
    with pytest.raises(ValueError, match="1701x500"):
        pad_center(np.zeros((500, 1701, 3), dtype=np.uint8), CropSpec())


def test_pad_unpad_round_trip_and_exact_background():
    rng = np.random.default_rng(0)
    spec = CropSpec()
    bg = np.asarray(BG, dtype=np.uint8)
    for _ in range(30):
        w = int(rng.integers(1, 1701))
        h = int(rng.integers(1, 501))
        crop = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        canvas = pad_center(crop, spec)
        assert (unpad(canvas, w, h, spec) == crop).all()
        ox, oy = center_offset(w, h, spec)
        mask = np.ones((500, 1700), dtype=bool)
        mask[oy:oy + h, ox:ox + w] = False
        assert (canvas[mask] == bg).all()


def _sample(label, length=30, index=1, image=1):
    rec = SpecimenRecord(
        length_mm=length, maturity=label, cruise="AB1",
        bbox=BBox(0, 0, 10, 10),
        id=SpecimenId("AB1", f"AB1_img_{image}.png", index),
        alt_id=SpecimenId("AB1", f"AB1_img_{image + 1}.png", index),
        view="Dorsal", event=1, net=1, board=1,
    )
    from krillboard.curation import CuratedSample
    return CuratedSample(image=np.zeros((4, 4, 3), dtype=np.uint8), record=rec,
                         view="Dorsal")


def test_filter_removes_incorrect_labels():
    tax = Taxonomy(min_class_count=1)
    samples = [_sample("M1"), _sample("A2"), _sample("U"), _sample("J")]
    kept, removals = filter_taxonomy(samples, tax)
    assert [s.label for s in kept] == ["J"]
    assert removals["M1"]["reason"] == "explicitly excluded"


def test_filter_removes_classes_at_or_below_100():
    tax = Taxonomy(included=("J", "MS1"), excluded=frozenset(), min_class_count=101)
    samples = [_sample("J", index=i + 1) for i in range(101)] + \
              [_sample("MS1", index=i + 1, image=3) for i in range(100)]
    kept, removals = filter_taxonomy(samples, tax)
    assert {s.label for s in kept} == {"J"}
    assert removals["MS1"]["count"] == 100


def test_filter_single_class_unchanged():
    tax = Taxonomy(included=("J",), excluded=frozenset(), min_class_count=1)
    samples = [_sample("J", index=i + 1) for i in range(5)]
    kept, removals = filter_taxonomy(samples, tax)
    assert len(kept) == 5
    assert removals == {}


def test_filter_idempotent():
    tax = Taxonomy(included=("J", "MS1"), excluded=frozenset({"U"}), min_class_count=3)
    samples = ([_sample("J", index=i + 1) for i in range(5)]
               + [_sample("MS1", index=i + 1, image=3) for i in range(2)]
               + [_sample("U", index=9)])
    once, _ = filter_taxonomy(samples, tax)
    twice, removals = filter_taxonomy(once, tax)
    assert [s.record.id for s in twice] == [s.record.id for s in once]
    assert removals == {}


def test_filter_monotone_in_min_class_count():
    samples = ([_sample("J", index=i + 1) for i in range(6)]
               + [_sample("MS1", index=i + 1, image=3) for i in range(4)]
               + [_sample("MA2", index=i + 1, image=5) for i in range(2)])
    sizes = []
    for floor in range(1, 9):
        tax = Taxonomy(included=("J", "MS1", "MA2"), excluded=frozenset(),
                       min_class_count=floor)
        kept, _ = filter_taxonomy(samples, tax)
        sizes.append(len(kept))
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_class_weights_balanced_is_one():
    cw = class_weights({"A": 5, "B": 5})
    assert cw.weights == {"A": 1.0, "B": 1.0}


def test_class_weights_direct_substitution():
    cw = class_weights({"A": 100, "B": 500})
    assert cw.weights["A"] == pytest.approx(3.0)
    assert cw.weights["B"] == pytest.approx(0.6)


def test_class_weights_identity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        counts = {f"C{i}": int(rng.integers(1, 1000))
                  for i in range(int(rng.integers(1, 9)))}
        cw = class_weights(counts)
        total = sum(cw.weights[c] * n for c, n in counts.items())
        assert total == pytest.approx(sum(counts.values()), abs=1e-9)


def test_class_weights_zero_count_errors():
    with pytest.raises(ValueError):
        class_weights({"A": 0, "B": 5})


def test_class_weights_vector_order():
    cw = class_weights({"A": 1, "B": 3})
    vec = cw.vector(("B", "A"))
    assert vec[0] == cw.weights["B"]
    with pytest.raises(ValueError):
        cw.vector(("B", "C"))


def _curated(n=3):
    spec = CropSpec()
    rng = np.random.default_rng(5)
    samples = []
    for i in range(n):
        s = _sample("J", index=i + 1)
        s.image = pad_center(rng.integers(0, 256, size=(40, 120, 3), dtype=np.uint8), spec)
        s.view = "Dorsal" if i % 2 == 0 else "Lateral"
        samples.append(s)
    return samples


def test_ladder_identity_resolution_bit_identical():
    samples = _curated(2)
    out = build_resolution_ladder(samples, resolutions=((1700, 500),))
    for (view, res), ss in out.items():
        originals = [s for s in samples if s.view == view]
        for a, b in zip(ss, originals):
            assert (a.image == b.image).all()


def test_ladder_downscale_shape():
    samples = _curated(1)
    out = build_resolution_ladder(samples, resolutions=((340, 100),))
    (_, ss), = out.items()
    assert ss[0].image.shape == (100, 340, 3)


def test_ladder_full_grid_is_ten_datasets():
    samples = _curated(4)  # both views present
    out = build_resolution_ladder(samples, resolutions=DEFAULT_RESOLUTIONS)
    assert len(out) == 10


def test_ladder_warns_on_off_aspect(caplog):
    with caplog.at_level("WARNING"):
        build_resolution_ladder(_curated(1), resolutions=((100, 100),))
    assert "aspect" in caplog.text


def test_write_curated_layout(tmp_path):
    samples = _curated(2)
    datasets = build_resolution_ladder(samples, resolutions=((340, 100),))
    tax = Taxonomy(included=("J",), excluded=frozenset(), min_class_count=1)
    out = write_curated(datasets, tmp_path / "curated", CropSpec(), tax,
                        weights=ClassWeights({"J": 1.0}))
    assert (out / "meta.json").exists()
    cell = out / "Dorsal" / "340x100"
    assert (cell / "labels.csv").exists()
    assert list(cell.glob("*.png"))
