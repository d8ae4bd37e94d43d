import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ktnas.data import (ColumnMap, InteractionRecord, NormalizationStats, ParseError, SchemaError,
                        assign_time_weights, build_sequences, compute_normalization, encode_columns,
                        encode_modalities, kfold_split, parse_interactions, read_canonical, visit_counts,
                        write_canonical)
from ktnas.numcore import ConfigurationError

ASSIST = ColumnMap.load("assistments_2009")
HEADER = "order_id,user_id,skill_id,correct,overlap_time,opportunity,hint_total,first_action\n"

SIX_ROWS = HEADER + (
    "1,u1,10,1,12000,1,2,0\n"
    "2,u1,11,0,,2,3,0\n"
    "3,u2,10,1,4000,1,2,0\n"
    "4,u1,10,0,8000,3,2,1\n"
    "5,u2,12,1,900,2,0,0\n"
    "6,u2,10,0,15000,3,2,0\n"
)


def test_shipped_column_maps_load():
    for name in ("assistments_2009", "oli_statics_2012", "canonical"):
        assert ColumnMap.load(name).name


def test_six_row_fixture_drop_policy():
    parsed = parse_interactions(SIX_ROWS, ASSIST)
    assert len(parsed.records) == 5
    assert parsed.dropped == 1 and parsed.dropped_by_field == {"time_spent": 1}
    assert parsed.summary()["students"] == 2


def test_six_row_fixture_impute_policy():
    parsed = parse_interactions(SIX_ROWS, ASSIST, missing="impute")
    assert len(parsed.records) == 6 and parsed.dropped == 0
    assert [r.time_spent for r in parsed.records if r.student_id == "u1"][1] is None


def test_empty_input():
    parsed = parse_interactions("", ASSIST)
    assert parsed.records == [] and parsed.n_students == 0
    assert parse_interactions(HEADER, ASSIST).summary()["records"] == 0


def test_grouped_and_ordered_per_student():
    parsed = parse_interactions(SIX_ROWS, ASSIST, missing="impute")
    assert [r.student_id for r in parsed.records] == ["u1"] * 3 + ["u2"] * 3
    assert [r.order for r in parsed.records] == [1, 2, 4, 3, 5, 6]


def test_hint_request_forces_incorrect():
    # first_action column 1 means the student asked for a hint
    parsed = parse_interactions(HEADER + "1,u1,10,1,5000,1,2,1\n", ASSIST)
    r = parsed.records[0]
    assert (r.first_action, r.response) == (0, 0)
    assert parsed.forced_incorrect == 1


def test_time_scale_and_fast_flag():
    parsed = parse_interactions(SIX_ROWS, ASSIST)
    u2 = [r for r in parsed.records if r.student_id == "u2"]
    assert u2[0].time_spent == pytest.approx(4.0)
    assert u2[1].fast_response and parsed.summary()["fast_responses"] == 1


def test_negative_time_is_missing():
    text = HEADER + "1,u1,10,1,-5,1,2,0\n2,u1,10,1,5,1,2,0\n"
    assert parse_interactions(text, ASSIST).dropped == 1
    assert parse_interactions(text, ASSIST, missing="impute").records[0].time_spent is None


def test_unknown_skill_gets_fresh_index():
    parsed = parse_interactions(SIX_ROWS, ASSIST, skill_vocab={"10": 0, "11": 1})
    assert parsed.new_skills == ["12"]
    assert parsed.skill_vocab["12"] == 2


def test_missing_column_is_schema_error():
    with pytest.raises(SchemaError, match="overlap_time"):
        parse_interactions("order_id,user_id,skill_id,correct\n1,u,1,1\n", ASSIST)


def test_malformed_row_reports_line():
    with pytest.raises(ParseError) as err:
        parse_interactions(HEADER + "1,u1,10,1,5,1,2,0\n2,u1,10\n", ASSIST)
    assert err.value.line == 3
    with pytest.raises(ParseError, match="line 2"):
        parse_interactions(HEADER + "1,u1,10,maybe,5,1,2,0\n", ASSIST)


def test_bad_policy():
    with pytest.raises(ConfigurationError):
        parse_interactions(SIX_ROWS, ASSIST, missing="guess")


def test_oli_map_parses_datashop_layout():
    cmap = ColumnMap.load("oli_statics_2012")
    cols = ["Row", "Anon Student Id", "KC (F2011)", "First Attempt", "Step Duration (sec)",
            "Opportunity (F2011)", "Hints"]
    rows = [["1", "a", "moment", "correct", "3.5", "1", "0"],
            ["2", "a", "moment", "hint", "10", "2", "1"],
            ["3", "b", "force", "incorrect", "7", "1", "0"]]
    text = "\n".join("\t".join(r) for r in [cols] + rows) + "\n"
    parsed = parse_interactions(text, cmap)
    assert [(r.response, r.first_action) for r in parsed.records] == [(1, 1), (0, 0), (0, 1)]
    assert parsed.n_skills == 2


def test_canonical_round_trip_and_determinism():
    parsed = parse_interactions(SIX_ROWS, ASSIST, missing="impute")
    buf = io.StringIO()
    write_canonical(parsed.records, buf)
    again = read_canonical(buf.getvalue())
    assert again.records == parsed.records
    buf2 = io.StringIO()
    write_canonical(again.records, buf2)
    assert buf2.getvalue() == buf.getvalue()


records_st = st.lists(st.builds(
    InteractionRecord,
    student_id=st.sampled_from(["a", "b", "c"]),
    skill_id=st.integers(0, 20),
    response=st.integers(0, 1),
    time_spent=st.one_of(st.none(), st.floats(0, 1e5, allow_nan=False)),
    attempts=st.one_of(st.none(), st.integers(0, 30)),
    hints=st.one_of(st.none(), st.integers(0, 9)),
    first_action=st.just(1),
    order=st.integers(0, 10_000),
), max_size=30)


@settings(max_examples=60, deadline=None)
@given(records_st)
def test_canonical_round_trip_property(records):
    parsed_in = parse_interactions(_canonical_text(records), ColumnMap.load("canonical"), missing="impute")
    buf = io.StringIO()
    write_canonical(parsed_in.records, buf)
    assert read_canonical(buf.getvalue()).records == parsed_in.records


def _canonical_text(records):
    buf = io.StringIO()
    write_canonical(records, buf)
    return buf.getvalue()


@pytest.mark.parametrize("skills,weights", [
    (["A", "A", "A"], [1, 2, 3]),
    (["A", "B", "A", "B"], [1, 1, 2, 2]),
    (["A"], [1]),
])
def test_time_weights(skills, weights):
    assert assign_time_weights(skills) == weights


@given(st.lists(st.integers(0, 4), max_size=60))
def test_weights_match_direct_count(skills):
    w = visit_counts(skills)
    assert w == [skills[:i].count(s) + 1 for i, s in enumerate(skills)]


def _recs(student, skills):
    return [InteractionRecord(student, k, 1, 5.0, 1, 0, 1, i) for i, k in enumerate(skills)]


def test_chunking_keeps_accumulated_visits():
    seqs = build_sequences(_recs("s", [0, 0, 1, 0, 1]), max_len=2)
    assert [len(s) for s in seqs] == [2, 2, 1]
    assert [v for s in seqs for v in s.visits] == [1, 2, 1, 3, 2]
    assert assign_time_weights(seqs[1]) == [1, 3]


def test_encoding_one_hots_and_caps():
    stats = NormalizationStats(time_mean=math.log1p(10.0), time_std=2.0)
    rec = InteractionRecord("s", 0, 1, 10.0, 7, None, 0, 0)
    vecs = {v.modality: v.values for v in encode_modalities(rec, stats)}
    np.testing.assert_array_equal(vecs["response"], [0, 1])
    np.testing.assert_array_equal(vecs["first_action"], [1, 0])
    assert vecs["time_spent"][0] == pytest.approx(0.0)
    np.testing.assert_array_equal(vecs["attempts"], [0, 0, 0, 0, 0, 1, 0])
    np.testing.assert_array_equal(vecs["hints"], [0, 0, 0, 0, 0, 0, 1])
    assert {m: len(v) for m, v in vecs.items()} == stats.dims()


def test_response_zero_one_hot():
    cols = encode_columns(_recs("s", [0]) + [InteractionRecord("s", 0, 0, 1.0, 0, 0, 1, 1)], NormalizationStats())
    np.testing.assert_array_equal(cols["response"], [[0, 1], [1, 0]])


def test_normalization_standardises_training_times():
    recs = [InteractionRecord("s", 0, 1, t, 1, 0, 1, i) for i, t in enumerate([1.0, 5.0, 30.0, 200.0, None])]
    stats = compute_normalization(recs)
    z = encode_columns(recs[:4], stats)["time_spent"][:, 0]
    assert z.mean() == pytest.approx(0.0, abs=1e-12) and z.std() == pytest.approx(1.0)
    assert encode_columns(recs[4:], stats)["time_spent"][0, 0] == 0.0


def test_kfold_examples():
    ten = [f"s{i}" for i in range(10)]
    assert kfold_split(ten, 5, 0).sizes() == [2] * 5
    assert sorted(kfold_split(ten + ["x"], 5, 0).sizes()) == [2, 2, 2, 2, 3]
    assert kfold_split(ten, 5, 3) == kfold_split(list(reversed(ten)), 5, 3)
    assert kfold_split(ten, 5, 3) != kfold_split(ten, 5, 4)


@given(st.sets(st.text(min_size=1, max_size=4), min_size=2, max_size=40), st.integers(2, 6), st.integers(0, 99))
def test_kfold_partition_property(students, k, seed):
    students = sorted(students)
    if k > len(students):
        with pytest.raises(ConfigurationError):
            kfold_split(students, k, seed)
        return
    fa = kfold_split(students, k, seed)
    assert set(fa.folds) == set(students)
    assert max(fa.sizes()) - min(fa.sizes()) <= 1


def test_kfold_rejects_bad_k():
    with pytest.raises(ConfigurationError):
        kfold_split(["a", "b"], 1)
