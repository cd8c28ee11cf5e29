import csv
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mosfuse.ingest import (
    IngestError,
    Manifest,
    RatingRecord,
    UtteranceLabel,
    aggregate_labels,
    dataset_stats,
    filter_records,
    ingest,
    parse_ratings,
    parse_rules,
    read_manifest,
    write_manifest,
)

HEADER = "dataset_id,system_id,utterance_id,listener_id,score,audio_path\n"


def write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def rec(utt="u1", score=3, ds="D", sys_id="S", listener="L1", **kw):
    return RatingRecord(ds, sys_id, utt, listener, score, f"/a/{utt}.wav", **kw)


def blizzard(root: Path, rows, language=False):
    cols = ["listener_id", "listener_type", "task", "system_id", "sentence_id", "score"]
    if language:
        cols.append("language")
    root.mkdir(parents=True, exist_ok=True)
    with (root / "ratings.csv").open("w", newline="") as h:
        w = csv.writer(h)
        w.writerow(cols)
        w.writerows(rows)
    return root


def test_three_line_fixture_with_out_of_range_score(tmp_path):
    write(tmp_path / "ratings.csv", HEADER + "D,S,u1,L1,4,a.wav\nD,S,u1,L2,6,a.wav\nD,S,u2,L1,2,b.wav\n")
    parsed = parse_ratings(tmp_path, "ratings-csv")
    assert len(parsed.records) == 2
    assert len(parsed.rejected) == 1 and parsed.rejected[0][1] == 3


def test_empty_file(tmp_path):
    write(tmp_path / "ratings.csv", "")
    parsed = parse_ratings(tmp_path, "ratings-csv")
    assert parsed.records == [] and parsed.rejected == []


def test_hard_errors_name_the_row(tmp_path):
    with pytest.raises(IngestError, match="unknown format"):
        parse_ratings(tmp_path, "nope")
    write(tmp_path / "a" / "ratings.csv", HEADER + "D,S,u1,L1,4,a.wav\nD,S,u1,L2,four,a.wav\n")
    with pytest.raises(IngestError, match=":3"):
        parse_ratings(tmp_path / "a", "ratings-csv")
    write(tmp_path / "b" / "ratings.csv", HEADER + "D,S,u1,L1,4,\n")
    with pytest.raises(IngestError, match="missing audio"):
        parse_ratings(tmp_path / "b", "ratings-csv")
    write(tmp_path / "c" / "ratings.csv", "dataset_id,score\nD,3\n")
    with pytest.raises(IngestError, match="missing columns"):
        parse_ratings(tmp_path / "c", "ratings-csv")


def test_check_audio(tmp_path):
    write(tmp_path / "ratings.csv", HEADER + "D,S,u1,L1,4,missing.wav\n")
    with pytest.raises(IngestError, match="not found"):
        parse_ratings(tmp_path, "ratings-csv", check_audio=True)


def test_bc2008_eus_listeners_removed(tmp_path):
    root = blizzard(tmp_path, [
        ["l1", "EE", "E", "A", "s1", "4"],
        ["l2", "EUS", "E", "A", "s1", "2"],
        ["l3", "EUS", "E", "B", "s2", "5"],
        ["l4", "ER", "E", "B", "s2", "3"],
    ])
    manifest, kept, counts = ingest(root, "bc2008", check_audio=False)
    assert all(r.listener_tag != "EUS" for r in kept)
    assert counts["exclude-listener-tag:EUS"] == 2 and len(kept) == 2
    assert {lab.dataset_id for lab in manifest} == {"BC2008"}


def test_include_task_list_removes_es2(tmp_path):
    root = blizzard(tmp_path, [
        ["l1", "EE", "EH1", "A", "s1", "4"],
        ["l1", "EE", "ES2", "A", "s2", "4"],
        ["l2", "EE", "ES3", "B", "s3", "3"],
        ["l2", "EE", "ES2", "B", "s4", "1"],
    ])
    parsed = parse_ratings(root, "bc2010")
    kept, counts = filter_records(parsed.records, parse_rules("include-task-list:EH1+EH2+ES1+ES3"))
    assert sorted(r.task for r in kept) == ["EH1", "ES3"]
    assert counts == {"include-task-list:EH1+EH2+ES1+ES3": 2}
    assert {r.dataset_id for r in kept} == {"BC2010-EH1", "BC2010-ES3"}


def test_english_only_language_column_then_task_name(tmp_path):
    root = blizzard(tmp_path / "lang", [
        ["l1", "EE", "M1", "A", "s1", "4", "en"],
        ["l1", "EE", "E1", "A", "s2", "4", "zh"],
    ], language=True)
    kept, _ = filter_records(parse_ratings(root, "bc2009").records, parse_rules("english-only"))
    assert [r.sentence_id for r in kept] == ["s1"]
    root = blizzard(tmp_path / "task", [
        ["l1", "EE", "EH1", "A", "s1", "4"],
        ["l1", "EE", "MH", "A", "s2", "4"],
    ])
    kept, _ = filter_records(parse_ratings(root, "bc2011").records, parse_rules("english-only"))
    assert [r.task for r in kept] == ["EH1"]


def test_bc2010_task_adapter_filters_one_task(tmp_path):
    root = blizzard(tmp_path, [["l1", "EE", "EH1", "A", "s1", "4"], ["l1", "EE", "ES1", "A", "s2", "3"]])
    parsed = parse_ratings(root, "bc2010-ES1")
    assert [r.dataset_id for r in parsed.records] == ["BC2010-ES1"]


def test_bvcc_and_somos_adapters(tmp_path):
    bv = tmp_path / "bvcc"
    write(bv / "sets" / "TRAINSET", "sysA,sysA-utt1.wav,4,,L1\nsysA,sysA-utt1.wav,3,,L2\nsysB,sysB-utt2.wav,2,x,L1\n")
    write(bv / "sets" / "DEVSET", "sysB,sysB-utt3.wav,5,,L3\n")
    parsed = parse_ratings(bv, "bvcc")
    assert len(parsed) == 4
    assert {r.dataset_id for r in parsed.records} == {"BVCC"}
    assert parsed.records[0].audio_path.endswith("wav/sysA-utt1.wav")
    assert aggregate_labels(parsed.records).labels[0].mos == 3.5
    assert {r.dataset_id for r in parse_ratings(bv, "sarulab").records} == {"sarulab-data"}

    so = tmp_path / "somos"
    write(so / "raw_scores.tsv", "utteranceId\tsystemId\tlistenerId\tchoice\nu1\tS1\tL1\t4\nu1\tS1\tL2\t0\n")
    parsed = parse_ratings(so, "somos")
    assert len(parsed) == 1 and len(parsed.rejected) == 1
    assert parsed.records[0].audio_path.endswith("audios/u1.wav")


def test_aggregate_cases():
    m = aggregate_labels([rec(score=3), rec(score=4, listener="L2"), rec(score=5, listener="L3"), rec("u2", 2)])
    assert [(lab.mos, lab.n_ratings) for lab in m] == [(4.0, 3), (2.0, 1)]
    with pytest.raises(IngestError, match="several systems"):
        aggregate_labels([rec(sys_id="A"), rec(sys_id="B", listener="L2")])


def test_empty_rules_are_noop():
    records = [rec(score=s, listener=f"L{s}", listener_tag="EUS") for s in (1, 2, 3)]
    kept, counts = filter_records(records, [])
    assert kept == records and counts == {}
    assert aggregate_labels(kept) == aggregate_labels(records)


def test_stats_single_and_two_datasets():
    (row,) = dataset_stats([rec()])
    assert (row.listeners, row.systems, row.sentences, row.ratings) == (1, 1, 1, 1)
    records = [rec("a1", ds="X", sys_id="S1", listener="p"), rec("a2", ds="X", sys_id="S2", listener="q"),
               rec("a1", ds="X", sys_id="S1", listener="q"),
               rec("b1", ds="Y", sys_id="T1", listener="r")]
    x, y = dataset_stats(records)
    assert (x.dataset_id, x.listeners, x.systems, x.sentences, x.ratings) == ("X", 2, 2, 2, 3)
    assert (y.dataset_id, y.listeners, y.systems, y.sentences, y.ratings) == ("Y", 1, 1, 1, 1)
    mx, my = dataset_stats(aggregate_labels(records))
    assert mx.listeners is None and (mx.systems, mx.sentences, mx.ratings) == (2, 2, 3)


def test_manifest_rejects_duplicates():
    lab = UtteranceLabel("D", "S", "u", "/a.wav", 3.0, 1)
    with pytest.raises(IngestError):
        Manifest([lab, lab])


record_lists = st.lists(
    st.tuples(st.sampled_from(["u1", "u2", "u3"]), st.integers(1, 5), st.sampled_from(["EUS", "EE", None])),
    min_size=1, max_size=30,
)


def build(items):
    return [rec(u, s, sys_id=f"sys-{u}", listener=f"L{i}", listener_tag=t) for i, (u, s, t) in enumerate(items)]


@settings(max_examples=60, deadline=None)
@given(record_lists)
def test_mean_bounds_and_filter_monotonicity(items):
    records = build(items)
    m = aggregate_labels(records)
    for lab in m:
        scores = [r.score for r in records if r.utterance_id == lab.utterance_id]
        assert min(scores) <= lab.mos <= max(scores)
    one, _ = filter_records(records, parse_rules("exclude-listener-tag:EUS"))
    two, _ = filter_records(records, parse_rules("exclude-listener-tag:EUS,english-only"))
    assert len(two) <= len(one) <= len(records)


@settings(max_examples=30, deadline=None)
@given(record_lists)
def test_manifest_round_trip(tmp_path_factory, items):
    m = aggregate_labels(build(items))
    path = tmp_path_factory.mktemp("rt") / "manifest.csv"
    write_manifest(m, path)
    back = read_manifest(path)
    assert len(back) == len(m)
    for a, b in zip(m, back):
        assert (a.dataset_id, a.system_id, a.utterance_id, a.audio_path, a.n_ratings) == (
            b.dataset_id, b.system_id, b.utterance_id, b.audio_path, b.n_ratings)
        assert abs(a.mos - b.mos) <= 1e-9
    assert path.read_text().splitlines()[0] == "dataset_id,system_id,utterance_id,audio_path,mos,n_ratings"


def test_synthetic_corpus_ingest(manifest):
    assert len(manifest) == 32
    assert manifest.domain_vocabulary == ["FAKE-A", "FAKE-B"]
    assert len(manifest.systems()) == 8
