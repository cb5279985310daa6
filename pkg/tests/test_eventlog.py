import io
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from travag.errors import EmptyLogError, FormatError, RowError
from travag.eventlog import (
    SimpleEventLog,
    VariantVocabulary,
    fit_vocabulary,
    format_variant_table,
    log_statistics,
    one_hot_decode,
    one_hot_encode,
    parse_event_csv,
    parse_timestamp,
    parse_variant_table,
    read_log,
    write_variant_table,
)

HEADER = "case:concept:name,concept:name,time:timestamp\n"

labels = st.text(alphabet="abcdefgh", min_size=1, max_size=3)
variants = st.lists(labels, min_size=1, max_size=5).map(tuple)
logs = st.dictionaries(variants, st.integers(1, 20), min_size=1, max_size=8).map(SimpleEventLog)


# ---------------------------------------------------------------------------
# SimpleEventLog


def test_log_counts(table1_log):
    assert table1_log.num_cases == 34
    assert table1_log.num_variants == 4
    assert table1_log.num_events == 15 * 5 + 12 * 4 + 5 * 5 + 2 * 5
    assert table1_log.activities == {"register", "visit", "blood-test", "hospitalization", "surgery", "release"}


def test_log_rejects_bad_frequencies():
    with pytest.raises(ValueError):
        SimpleEventLog({("a",): 0})
    with pytest.raises(ValueError):
        SimpleEventLog({("a",): 1.5})
    with pytest.raises(ValueError):
        SimpleEventLog({(): 1})


def test_log_equality_and_distribution():
    a = SimpleEventLog({("a", "b"): 2, ("a",): 1})
    b = SimpleEventLog.from_traces([("a",), ("a", "b"), ("a", "b")])
    assert a == b and hash(a) == hash(b)
    assert a.distribution() == {("a", "b"): 2 / 3, ("a",): 1 / 3}
    assert SimpleEventLog().is_empty()


def test_statistics_summary_truncates_percentage():
    log = SimpleEventLog({(f"x{i}",): 1 for i in range(846)} | {("y",): 204})
    stats = log_statistics(log)
    assert stats.cases == 1050
    assert stats.summary().endswith("847 variants, 80%")


# ---------------------------------------------------------------------------
# Event CSV


def test_single_case_in_time_order():
    text = HEADER + "c1,b,2020-01-01T10:00:00\nc1,a,2020-01-01T09:00:00\nc1,c,2020-01-01T11:00:00\n"
    assert parse_event_csv(io.StringIO(text)) == SimpleEventLog({("a", "b", "c"): 1})


def test_identical_cases_aggregate():
    text = HEADER + "1,a,1\n1,b,2\n2,a,3\n2,b,4\n"
    assert parse_event_csv(text.encode()) == SimpleEventLog({("a", "b"): 2})


def test_timestamp_ties_keep_file_order():
    text = HEADER + "1,b,5\n1,a,5\n1,c,4\n"
    assert parse_event_csv(io.StringIO(text)) == SimpleEventLog({("c", "b", "a"): 1})


def test_custom_columns_and_stripped_header():
    text = " case , act ,ts\nk,x,2021-03-04 05:06:07.123Z\nk,y,2021-03-04 05:06:08+01:00\n"
    log = parse_event_csv(io.StringIO(text), case_column="case", activity_column="act", timestamp_column="ts")
    assert log == SimpleEventLog({("y", "x"): 1})


def test_missing_column():
    with pytest.raises(FormatError, match="concept:name"):
        parse_event_csv(io.StringIO("case:concept:name,time:timestamp\n1,1\n"))


def test_empty_inputs():
    with pytest.raises(EmptyLogError):
        parse_event_csv(io.StringIO(""))
    with pytest.raises(EmptyLogError):
        parse_event_csv(io.StringIO(HEADER))


def test_row_error_carries_line_number(tmp_path):
    path = tmp_path / "events.csv"
    path.write_text(HEADER + "1,a,1\n1,b,not-a-time\n")
    with pytest.raises(RowError) as err:
        parse_event_csv(path)
    assert err.value.line == 3
    assert str(err.value).startswith(f"{path}:3:")


def test_caller_stream_stays_open():
    stream = io.StringIO(HEADER + "1,a,1\n")
    parse_event_csv(stream)
    assert not stream.closed


def test_parse_timestamp_forms():
    assert parse_timestamp("0") == 0.0
    assert parse_timestamp("1970-01-01T00:00:01Z") == 1.0
    assert parse_timestamp("1970-01-01T00:00:00.5") == 0.5
    assert parse_timestamp("1970-01-01T01:00:00+01:00") == 0.0
    with pytest.raises(ValueError):
        parse_timestamp("yesterday")


def test_permutation_invariance_with_strict_timestamps():
    rng = random.Random(3)
    rows = []
    for case in range(30):
        acts = [rng.choice("abcd") for _ in range(rng.randint(1, 6))]
        rows += [f"c{case},{a},{t}" for t, a in enumerate(acts)]
    expected = parse_event_csv(io.StringIO(HEADER + "\n".join(rows)))
    for _ in range(5):
        rng.shuffle(rows)
        assert parse_event_csv(io.StringIO(HEADER + "\n".join(rows))) == expected


# ---------------------------------------------------------------------------
# Variant TSV


def test_variant_table_rows():
    log = parse_variant_table(io.StringIO("register,visit\t15\nregister,release\t12\n"))
    assert log.num_variants == 2 and log.num_cases == 27


def test_variant_table_errors():
    with pytest.raises(EmptyLogError):
        parse_variant_table(io.StringIO("variant\tfrequency\n"))
    with pytest.raises(RowError):
        parse_variant_table(io.StringIO("a\t0\n"))
    with pytest.raises(RowError):
        parse_variant_table(io.StringIO("a\t1\na\t2\n"))
    with pytest.raises(RowError):
        parse_variant_table(io.StringIO("a\t1\nb\tx\n"))


def test_variant_table_round_trip(tmp_path, table1_log):
    path = tmp_path / "log.tsv"
    write_variant_table(table1_log, path)
    assert path.read_text().startswith("variant\tfrequency\n")
    assert parse_variant_table(path) == table1_log
    assert read_log(path) == table1_log


def test_variant_table_refuses_separator_labels():
    with pytest.raises(FormatError):
        format_variant_table(SimpleEventLog({("a,b",): 1}))


@given(logs)
@settings(max_examples=50, deadline=None)
def test_variant_table_round_trip_property(log):
    assert parse_variant_table(io.StringIO(format_variant_table(log))) == log


# ---------------------------------------------------------------------------
# Vocabulary and one-hot codec


def test_vocabulary_is_sorted_and_bijective(table1_log):
    vocab = fit_vocabulary(table1_log)
    assert vocab.n == 4
    assert list(vocab.variants) == sorted(table1_log)
    for i, v in enumerate(vocab.variants):
        assert vocab.index_of(v) == i and vocab.variant_at(i) == v
    assert fit_vocabulary(table1_log) == vocab
    assert VariantVocabulary.from_tsv(vocab.to_tsv()) == vocab
    with pytest.raises(KeyError):
        vocab.index_of(("nope",))


def test_one_hot_small_example():
    log = SimpleEventLog({("a", "b"): 2, ("a",): 1})
    matrix = one_hot_encode(log, fit_vocabulary(log))
    assert matrix.shape == (3, 2)
    # ("a",) sorts before ("a", "b")
    assert matrix.column_sums().tolist() == [1, 2]
    dense = matrix.to_dense()
    assert (dense.sum(axis=1) == 1).all() and dense.sum() == 3


def test_one_hot_single_variant():
    log = SimpleEventLog({("a",): 5})
    dense = one_hot_encode(log, fit_vocabulary(log)).to_dense()
    assert dense.shape == (5, 1) and (dense == 1).all()


def test_one_hot_table1(table1_log):
    vocab = fit_vocabulary(table1_log)
    matrix = one_hot_encode(table1_log, vocab)
    assert matrix.shape == (34, 4)
    assert sorted(matrix.column_sums().tolist()) == [2, 5, 12, 15]
    assert one_hot_decode(matrix.rows, vocab) == table1_log


def test_one_hot_decode_cases():
    vocab = VariantVocabulary([("a",), ("b",)])
    assert one_hot_decode([0, 0, 1], vocab) == SimpleEventLog({("a",): 2, ("b",): 1})
    assert one_hot_decode([], vocab).is_empty()
    with pytest.raises(IndexError):
        one_hot_decode([2], vocab)


@given(logs)
@settings(max_examples=50, deadline=None)
def test_encode_decode_round_trip(log):
    vocab = fit_vocabulary(log)
    matrix = one_hot_encode(log, vocab)
    assert matrix.shape == (log.num_cases, vocab.n)
    assert np.array_equal(matrix.to_dense().sum(axis=1), np.ones(log.num_cases))
    assert one_hot_decode(matrix.rows, vocab) == log
