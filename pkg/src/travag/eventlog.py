"""Simple event logs: parsing, serialization and the one-hot variant codec.

A simple event log is a multiset of trace variants. Each case contributes
exactly one variant, so the log is stored as ``variant -> frequency``.
Variants are tuples of activity labels.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping, Sequence, TextIO, Union

import numpy as np

from travag.errors import EmptyLogError, FormatError, RowError

Activity = str
TraceVariant = tuple  # tuple[Activity, ...], length >= 1

DEFAULT_CASE_COLUMN = "case:concept:name"
DEFAULT_ACTIVITY_COLUMN = "concept:name"
DEFAULT_TIMESTAMP_COLUMN = "time:timestamp"

TSV_HEADER = "variant\tfrequency"


def make_variant(activities: Iterable[str]) -> TraceVariant:
    variant = tuple(activities)
    if not variant:
        raise ValueError("a trace variant needs at least one activity")
    for label in variant:
        if not isinstance(label, str) or not label:
            raise ValueError(f"activity labels must be non-empty strings, got {label!r}")
    return variant


class SimpleEventLog:
    """Multiset of trace variants.

    Frequencies are positive integers; the total case count is their sum.
    Instances are treated as immutable values.
    """

    __slots__ = ("_freq",)

    def __init__(self, variants: Mapping[Sequence[str], int] | None = None):
        freq: dict[TraceVariant, int] = {}
        for key, count in (variants or {}).items():
            variant = make_variant(key)
            if isinstance(count, bool) or int(count) != count or count < 1:
                raise ValueError(f"frequency of {variant} must be a positive integer, got {count!r}")
            if variant in freq:
                raise ValueError(f"duplicate variant {variant}")
            freq[variant] = int(count)
        self._freq = freq

    @classmethod
    def from_traces(cls, traces: Iterable[Sequence[str]]) -> "SimpleEventLog":
        return cls(Counter(make_variant(t) for t in traces))

    @property
    def variants(self) -> dict[TraceVariant, int]:
        return dict(self._freq)

    @property
    def num_cases(self) -> int:
        return sum(self._freq.values())

    @property
    def num_variants(self) -> int:
        return len(self._freq)

    @property
    def num_events(self) -> int:
        return sum(len(v) * f for v, f in self._freq.items())

    @property
    def activities(self) -> set[str]:
        return {a for v in self._freq for a in v}

    def frequency(self, variant: Sequence[str]) -> int:
        return self._freq.get(tuple(variant), 0)

    def items(self):
        return self._freq.items()

    def distribution(self) -> dict[TraceVariant, float]:
        total = self.num_cases
        if total == 0:
            raise EmptyLogError("distribution of an empty log is undefined")
        return {v: f / total for v, f in self._freq.items()}

    def is_empty(self) -> bool:
        return not self._freq

    def __iter__(self) -> Iterator[TraceVariant]:
        return iter(self._freq)

    def __contains__(self, variant) -> bool:
        return tuple(variant) in self._freq

    def __len__(self) -> int:
        return len(self._freq)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SimpleEventLog):
            return NotImplemented
        return self._freq == other._freq

    def __hash__(self):
        return hash(frozenset(self._freq.items()))

    def __repr__(self) -> str:
        body = ", ".join(f"<{','.join(v)}>^{f}" for v, f in sorted(self._freq.items()))
        return f"SimpleEventLog([{body}])"


@dataclass(frozen=True)
class LogStatistics:
    events: int
    cases: int
    activities: int
    variants: int

    @property
    def trace_uniqueness(self) -> float:
        return self.variants / self.cases if self.cases else 0.0

    def summary(self) -> str:
        # percentage truncated, not rounded: 846 of 1050 prints as 80%
        percent = 100 * self.variants // self.cases if self.cases else 0
        return (
            f"{self.events} events, {self.cases} cases, {self.activities} activities, "
            f"{self.variants} variants, {percent}%"
        )


def log_statistics(log: SimpleEventLog) -> LogStatistics:
    return LogStatistics(
        events=log.num_events,
        cases=log.num_cases,
        activities=len(log.activities),
        variants=log.num_variants,
    )


# ---------------------------------------------------------------------------
# Parsing


def _read_text(source: Union[BinaryIO, TextIO, bytes, str, Path]) -> tuple[str, str]:
    """Return ``(name, text)`` for a path, raw bytes or an open stream."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8-sig", newline="") as fh:
            return str(source), fh.read()
    if isinstance(source, bytes):
        return "<bytes>", source.decode("utf-8-sig")
    data = source.read()
    name = getattr(source, "name", "<stream>")
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    return str(name), data


def parse_timestamp(raw: str) -> float:
    """Seconds since the epoch for an ISO-8601 string or an integer epoch.

    Naive ISO timestamps are read as UTC.
    """
    text = raw.strip()
    if not text:
        raise ValueError("empty timestamp")
    try:
        return float(int(text))
    except ValueError:
        pass
    iso = text
    if iso.endswith(("Z", "z")):
        iso = iso[:-1] + "+00:00"
    # fromisoformat on 3.10 only accepts 3- or 6-digit fractions
    if "." in iso:
        head, _, frac = iso.partition(".")
        digits = len(frac) - len(frac.lstrip("0123456789"))
        tail = frac[digits:]
        frac_digits = (frac[:digits] + "000000")[:6]
        iso = f"{head}.{frac_digits}{tail}"
    try:
        stamp = datetime.fromisoformat(iso)
    except ValueError:
        raise ValueError(f"unparseable timestamp {raw!r}") from None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def parse_event_csv(
    source,
    case_column: str = DEFAULT_CASE_COLUMN,
    activity_column: str = DEFAULT_ACTIVITY_COLUMN,
    timestamp_column: str = DEFAULT_TIMESTAMP_COLUMN,
) -> SimpleEventLog:
    """Group raw event rows into one trace variant per case.

    Events within a case are ordered by timestamp; ties keep file order.

    Raises:
        FormatError: a required column is missing from the header.
        RowError: a row has an unparseable timestamp or empty activity.
        EmptyLogError: the file holds no events.
    """
    name, text = _read_text(source)
    reader = csv.DictReader(io.StringIO(text, newline=""))
    header = reader.fieldnames
    if not header:
        raise EmptyLogError(f"{name}: empty file")
    header = [h.strip() for h in header]
    reader.fieldnames = header
    missing = [c for c in (case_column, activity_column, timestamp_column) if c not in header]
    if missing:
        raise FormatError(f"{name}: missing column(s) {', '.join(missing)}; header is {header}")

    cases: dict[str, list[tuple[float, int, str]]] = {}
    for order, row in enumerate(reader):
        line = reader.line_num
        case_id = (row.get(case_column) or "").strip()
        label = (row.get(activity_column) or "").strip()
        if not case_id:
            raise RowError(line, "empty case id", name)
        if not label:
            raise RowError(line, "empty activity label", name)
        try:
            stamp = parse_timestamp(row.get(timestamp_column) or "")
        except ValueError as exc:
            raise RowError(line, str(exc), name) from None
        cases.setdefault(case_id, []).append((stamp, order, label))

    if not cases:
        raise EmptyLogError(f"{name}: no events")
    traces = (tuple(label for _, _, label in sorted(events)) for events in cases.values())
    return SimpleEventLog.from_traces(traces)


def parse_variant_table(source) -> SimpleEventLog:
    """Read ``a,b,c<TAB>frequency`` rows into a log.

    A leading header row (second field not an integer) is skipped.
    """
    name, text = _read_text(source)
    lines = text.splitlines()

    freq: dict[TraceVariant, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise RowError(lineno, f"expected 2 tab-separated fields, got {len(fields)}", name)
        variant_text, count_text = fields
        try:
            count = int(count_text.strip())
        except ValueError:
            if lineno == 1:
                continue
            raise RowError(lineno, f"frequency {count_text!r} is not an integer", name) from None
        if count < 1:
            raise RowError(lineno, f"frequency must be positive, got {count}", name)
        labels = [a.strip() for a in variant_text.split(",")]
        if not variant_text.strip() or any(not a for a in labels):
            raise RowError(lineno, "empty activity label", name)
        variant = tuple(labels)
        if variant in freq:
            raise RowError(lineno, f"duplicate variant {','.join(variant)}", name)
        freq[variant] = count

    if not freq:
        raise EmptyLogError(f"{name}: no variants")
    return SimpleEventLog(freq)


def format_variant_table(log: SimpleEventLog) -> str:
    """Serialize as a variant TSV; labels holding a separator are refused."""
    rows = [TSV_HEADER]
    for variant in sorted(log):
        for label in variant:
            if any(ch in label for ch in ",\t\r\n"):
                raise FormatError(f"activity label {label!r} cannot be written to a variant table")
        rows.append(f"{','.join(variant)}\t{log.frequency(variant)}")
    return "\n".join(rows) + "\n"


def write_variant_table(log: SimpleEventLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_variant_table(log))


# ---------------------------------------------------------------------------
# One-hot codec


class VariantVocabulary:
    """Bijection between trace variants and column indices 0..n-1.

    Columns follow the lexicographic order of the activity-label tuples, so a
    shorter prefix sorts before its extensions.
    """

    __slots__ = ("_variants", "_index")

    def __init__(self, variants: Iterable[Sequence[str]]):
        ordered = sorted({make_variant(v) for v in variants})
        self._variants: tuple[TraceVariant, ...] = tuple(ordered)
        self._index = {v: i for i, v in enumerate(ordered)}

    @property
    def n(self) -> int:
        return len(self._variants)

    @property
    def variants(self) -> tuple[TraceVariant, ...]:
        return self._variants

    def index_of(self, variant: Sequence[str]) -> int:
        try:
            return self._index[tuple(variant)]
        except KeyError:
            raise KeyError(f"variant <{','.join(variant)}> is not in the vocabulary") from None

    def variant_at(self, index: int) -> TraceVariant:
        if not 0 <= index < len(self._variants):
            raise IndexError(f"column {index} out of range for vocabulary of size {self.n}")
        return self._variants[index]

    def __len__(self) -> int:
        return len(self._variants)

    def __contains__(self, variant) -> bool:
        return tuple(variant) in self._index

    def __eq__(self, other) -> bool:
        if not isinstance(other, VariantVocabulary):
            return NotImplemented
        return self._variants == other._variants

    def to_tsv(self) -> str:
        return "".join(f"{i}\t{','.join(v)}\n" for i, v in enumerate(self._variants))

    @classmethod
    def from_tsv(cls, text: str) -> "VariantVocabulary":
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            index_text, _, variant_text = line.partition("\t")
            try:
                index = int(index_text)
            except ValueError:
                raise RowError(lineno, f"bad column index {index_text!r}", "vocabulary") from None
            entries.append((index, tuple(variant_text.split(","))))
        vocab = cls(v for _, v in entries)
        for index, variant in entries:
            if vocab.index_of(variant) != index:
                raise FormatError(f"vocabulary is not in canonical order at column {index}")
        return vocab


@dataclass(frozen=True)
class BinaryMatrix:
    """m x n one-hot matrix stored as the set column of every row."""

    rows: np.ndarray
    n_cols: int

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.ndim != 1:
            raise ValueError("rows must be a flat index array")
        if rows.size and (rows.min() < 0 or rows.max() >= self.n_cols):
            raise IndexError("row index outside the column range")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.rows), self.n_cols)

    def column_sums(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_cols)

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        dense = np.zeros(self.shape, dtype=dtype)
        dense[np.arange(len(self.rows)), self.rows] = 1
        return dense


def fit_vocabulary(log: SimpleEventLog) -> VariantVocabulary:
    if log.is_empty():
        raise EmptyLogError("cannot fit a vocabulary on an empty log")
    return VariantVocabulary(log)


def one_hot_encode(log: SimpleEventLog, vocab: VariantVocabulary) -> BinaryMatrix:
    """Rows list variants in vocabulary order, each repeated by its frequency."""
    for variant in log:
        if variant not in vocab:
            raise KeyError(f"variant <{','.join(variant)}> is not in the vocabulary")
    counts = [log.frequency(v) for v in vocab.variants]
    rows = np.repeat(np.arange(vocab.n, dtype=np.int64), counts)
    return BinaryMatrix(rows, vocab.n)


def one_hot_decode(rows: Iterable[int], vocab: VariantVocabulary) -> SimpleEventLog:
    indices = np.asarray(list(rows) if not isinstance(rows, np.ndarray) else rows, dtype=np.int64)
    if indices.size == 0:
        return SimpleEventLog()
    if indices.min() < 0 or indices.max() >= vocab.n:
        bad = int(indices[(indices < 0) | (indices >= vocab.n)][0])
        raise IndexError(f"column {bad} out of range for vocabulary of size {vocab.n}")
    counts = np.bincount(indices, minlength=vocab.n)
    return SimpleEventLog({vocab.variant_at(i): int(c) for i, c in enumerate(counts) if c})


def read_log(path, fmt: str | None = None, **csv_columns) -> SimpleEventLog:
    """Load a variant TSV or event CSV, picking the parser from the suffix."""
    fmt = fmt or ("csv" if str(path).lower().endswith(".csv") else "tsv")
    if fmt == "csv":
        return parse_event_csv(path, **csv_columns)
    if fmt == "tsv":
        return parse_variant_table(path)
    raise ValueError(f"unknown log format {fmt!r}")
