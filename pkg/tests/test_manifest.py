import string

import pytest
from hypothesis import given, strategies as st

from krillboard.manifest import (
    BBox, ManifestError, SpecimenId, Taxonomy, export_manifest, parse_manifest,
    parse_specimen_id, pair_views, render_specimen_id, write_rejection_report,
)

from conftest import TABLE1_HEADER, rows_to_csv, small_row


def test_parse_table1_first_row(table1_csv, table1_boards_dir):
    man = parse_manifest(table1_csv, table1_boards_dir)
    assert len(man.records) == 5
    assert not man.rejections
    r = man.records[0]
    assert r.length_mm == 34
    assert r.maturity == "FS1"
    assert r.cruise == "JR255A"
    assert r.bbox == BBox(469, 751, 869, 114)
    assert r.id.render() == "JR255A_krill_image_73.jpeg-1"
    assert r.alt_id.render() == "JR255A_krill_image_74.jpeg-1"
    assert r.view == "Dorsal"
    assert (r.event, r.net, r.board) == (78, 2, 3)


def test_parse_empty_table(small_boards_dir):
    man = parse_manifest(TABLE1_HEADER + "\n", small_boards_dir)
    assert man.records == []
    assert man.rejections == []


def test_parse_rejects_negative_length(small_boards_dir):
    man = parse_manifest(rows_to_csv([small_row(length=-5)]), small_boards_dir)
    assert man.records == []
    assert len(man.rejections) == 1
    assert "length_mm must be >= 1" in man.rejections[0].reason


def test_parse_missing_column_is_hard_error(small_boards_dir):
    broken = TABLE1_HEADER.replace(",maturity", "") + "\n"
    with pytest.raises(ManifestError, match="maturity"):
        parse_manifest(broken, small_boards_dir)


def test_parse_rejects_missing_image(small_boards_dir):
    row = small_row(image=9, alt_image=2)
    man = parse_manifest(rows_to_csv([row]), small_boards_dir)
    assert len(man.rejections) == 1
    assert "missing or unreadable" in man.rejections[0].reason


def test_parse_rejects_bbox_beyond_board(small_boards_dir):
    # boards are 400x300
    man = parse_manifest(rows_to_csv([small_row(bbox=(390, 10, 20, 20))]), small_boards_dir)
    assert len(man.rejections) == 1
    assert "exceeds board bounds" in man.rejections[0].reason


def test_parse_rejects_duplicate_ids(small_boards_dir):
    rows = [small_row(index=1), small_row(index=1, length=31)]
    man = parse_manifest(rows_to_csv(rows), small_boards_dir)
    assert len(man.records) == 1
    assert len(man.rejections) == 1
    assert "duplicate id" in man.rejections[0].reason


def test_parse_accounting_mixed_rows(small_boards_dir):
    rows = [
        small_row(index=1),
        small_row(index=2, length=-1),           # bad length
        small_row(index=3, maturity="bad"),      # bad maturity token
        small_row(index=4),
    ]
    man = parse_manifest(rows_to_csv(rows), small_boards_dir)
    assert len(man.records) + len(man.rejections) == len(rows)
    assert len(man.records) == 2


def test_parse_tsv_autodetect(small_boards_dir):
    text = rows_to_csv([small_row()]).replace(",", "\t")
    man = parse_manifest(text, small_boards_dir)
    assert len(man.records) == 1


def test_parse_normalizes_view_case(small_boards_dir):
    man = parse_manifest(rows_to_csv([small_row(view="dorsal")]), small_boards_dir)
    assert man.records[0].view == "Dorsal"


def test_render_specimen_id_examples():
    assert render_specimen_id("JR255A", "JR255A_krill_image_73.jpeg", 2) == \
        "JR255A_krill_image_73.jpeg-2"
    assert render_specimen_id("JR291", "JR291_krill_image_1.jpeg", 25) == \
        "JR291_krill_image_1.jpeg-25"
    with pytest.raises(ValueError):
        render_specimen_id("JR291", "JR291_krill_image_1.jpeg", 0)


cruise_st = st.text(alphabet=string.ascii_uppercase + string.digits, min_size=1, max_size=8)
stem_st = st.text(alphabet=string.ascii_lowercase + string.digits + "_.", min_size=1, max_size=20)


@given(cruise=cruise_st, stem=stem_st, index=st.integers(min_value=1, max_value=10_000))
def test_specimen_id_round_trip(cruise, stem, index):
    image_file = f"{cruise}_{stem}"
    rendered = render_specimen_id(cruise, image_file, index)
    parsed = parse_specimen_id(rendered)
    assert parsed == SpecimenId(cruise=cruise, image_file=image_file, index=index)


def test_parse_specimen_id_rejects_garbage():
    for bad in ("no-trailing-int-", "nocruise-3", "-5", "file"):
        with pytest.raises(ValueError):
            parse_specimen_id(bad)


def _paired_rows():
    return [
        small_row(image=1, alt_image=2, index=1, view="Dorsal"),
        small_row(image=2, alt_image=1, index=1, view="Lateral"),
    ]


def test_pair_views_keeps_mutual_pairs(small_boards_dir):
    man = parse_manifest(rows_to_csv(_paired_rows()), small_boards_dir)
    paired = pair_views(man)
    assert len(paired.records) == 2
    assert paired.pair_report.retained == 2
    assert paired.pair_report.dropped == 0
    board = paired.board_by_file("AB1_krill_image_1.png")
    assert board.paired_file.name == "AB1_krill_image_2.png"


def test_pair_views_drops_missing_partner(small_boards_dir):
    man = parse_manifest(rows_to_csv([small_row()]), small_boards_dir)
    paired = pair_views(man)
    assert paired.records == []
    assert paired.pair_report.drop_reasons["alternative view record missing"] == 1


def test_pair_views_drops_asymmetric_chain(small_boards_dir):
    rows = [
        small_row(image=1, alt_image=2, index=1, view="Dorsal"),
        small_row(image=2, alt_image=3, index=1, view="Lateral"),
        small_row(image=3, alt_image=2, index=1, view="Dorsal"),
    ]
    man = parse_manifest(rows_to_csv(rows), small_boards_dir)
    paired = pair_views(man)
    # image_1 points at image_2 which points elsewhere: asymmetric, dropped;
    # image_2 <-> image_3 is mutual and survives
    kept = {r.id.image_file for r in paired.records}
    assert kept == {"AB1_krill_image_2.png", "AB1_krill_image_3.png"}
    assert paired.pair_report.drop_reasons["asymmetric pairing"] == 1


def test_pair_views_requires_labels(small_boards_dir):
    rows = [
        small_row(image=1, alt_image=2, index=1, view="Dorsal", length=""),
        small_row(image=2, alt_image=1, index=1, view="Lateral"),
    ]
    man = parse_manifest(rows_to_csv(rows), small_boards_dir)
    paired = pair_views(man)
    assert paired.records == []
    assert paired.pair_report.drop_reasons["missing length or maturity"] == 2


def test_pair_views_rejects_same_view_pairs(small_boards_dir):
    rows = [
        small_row(image=1, alt_image=2, index=1, view="Dorsal"),
        small_row(image=2, alt_image=1, index=1, view="Dorsal"),
    ]
    man = parse_manifest(rows_to_csv(rows), small_boards_dir)
    paired = pair_views(man)
    assert paired.records == []


def test_pair_views_is_involution(small_boards_dir):
    rows = _paired_rows() + [
        small_row(image=3, alt_image=4, index=1, view="Dorsal"),
        small_row(image=4, alt_image=3, index=1, view="Lateral"),
        small_row(image=3, alt_image=4, index=2, view="Dorsal"),
    ]
    man = parse_manifest(rows_to_csv(rows), small_boards_dir)
    paired = pair_views(man)
    by_id = {r.id.render(): r for r in paired.records}
    for r in paired.records:
        partner = by_id[r.alt_id.render()]
        assert partner.alt_id == r.id
        assert partner.id != r.id


def test_export_round_trip(table1_csv, table1_boards_dir, tmp_path):
    man = parse_manifest(table1_csv, table1_boards_dir)
    out = export_manifest(man, tmp_path / "export.csv")
    man2 = parse_manifest(out, table1_boards_dir)
    assert man2.records == man.records
    assert [b.file for b in man2.boards] == [b.file for b in man.boards]


def test_export_is_byte_identical_modulo_line_endings(table1_csv, table1_boards_dir, tmp_path):
    man = parse_manifest(table1_csv, table1_boards_dir)
    out = export_manifest(man, tmp_path / "export.csv")
    exported = out.read_text().replace("\r\n", "\n")
    assert exported == table1_csv


def test_export_empty_manifest_is_header_only(small_boards_dir, tmp_path):
    man = parse_manifest(TABLE1_HEADER + "\n", small_boards_dir)
    out = export_manifest(man, tmp_path / "empty.csv")
    assert out.read_text().strip() == TABLE1_HEADER


def test_export_unwritable_path(table1_csv, table1_boards_dir, tmp_path):
    man = parse_manifest(table1_csv, table1_boards_dir)
    with pytest.raises(ManifestError):
        export_manifest(man, tmp_path / "nope" / "deep" / "export.csv")


def test_rejection_report_format(small_boards_dir, tmp_path):
    man = parse_manifest(rows_to_csv([small_row(length=-5)]), small_boards_dir)
    path = write_rejection_report(man, tmp_path / "rejects.jsonl")
    import json
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines == [{"row": 1, "reason": "length_mm must be >= 1"}]


def test_taxonomy_overlap_rejected():
    with pytest.raises(ValueError):
        Taxonomy(included=("J",), excluded=frozenset({"J"}))


def test_bbox_invariants():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 5)
    with pytest.raises(ValueError):
        BBox(-1, 0, 5, 5)
    assert BBox(2, 3, 4, 5).as_list() == [2, 3, 4, 5]
