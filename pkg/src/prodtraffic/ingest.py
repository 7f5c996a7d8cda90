"""Machine log parsing, production-state annotation and sample extraction."""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import DataError, LogRecord, ProductionState, TrafficSample, quantize_payload

LOG_COLUMNS = ("processed_time", "data_id", "data_value", "data_payload")
SAMPLE_COLUMNS = ("interarrival_ms", "size_bytes", "state")
EPISODE_COLUMNS = ("state", "start_ms", "end_ms", "n_records")

_EPOCH = datetime(1970, 1, 1)
_ONE_MICRO = timedelta(microseconds=1)


def timestamp_to_ms(text: str) -> float:
    """Parse an ISO-8601 timestamp into milliseconds since the Unix epoch.

    Naive timestamps are read as UTC.
    """
    dt = datetime.fromisoformat(text.strip())
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    micros = (dt - _EPOCH) // _ONE_MICRO
    return micros / 1000.0


def ms_to_timestamp(ms: float) -> str:
    """Inverse of :func:`timestamp_to_ms` at microsecond resolution."""
    dt = _EPOCH + _ONE_MICRO * int(round(ms * 1000))
    return dt.isoformat(timespec="microseconds")


def parse_log(path: str | Path) -> list[LogRecord]:
    """Read a machine log CSV, returning records sorted by time.

    The sort is stable so rows sharing a timestamp keep their file order.
    Errors carry the 1-based line number of the offending row.
    """
    path = Path(path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(LOG_COLUMNS)}") from None
        for col in LOG_COLUMNS:
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        index = {col: header.index(col) for col in LOG_COLUMNS}
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: malformed row, expected {len(header)} fields, got {len(row)}")
            try:
                t = timestamp_to_ms(row[index["processed_time"]])
            except ValueError:
                raise DataError(
                    f"{path}:{line}: unparseable timestamp {row[index['processed_time']]!r}"
                ) from None
            payload_text = row[index["data_payload"]].strip()
            try:
                payload = int(payload_text)
            except ValueError:
                raise DataError(f"{path}:{line}: payload {payload_text!r} is not an integer") from None
            if payload < 0:
                raise DataError(f"{path}:{line}: negative payload {payload}")
            records.append(LogRecord(t, row[index["data_id"]], row[index["data_value"]], payload))
    records.sort(key=lambda r: r.processed_time)
    return records


def write_log(records: Iterable[LogRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in records:
            writer.writerow([ms_to_timestamp(r.processed_time), r.data_id, r.data_value, r.data_payload])


@dataclass(frozen=True)
class StateRule:
    data_id: str
    value_pattern: re.Pattern
    state: ProductionState

    def matches(self, record: LogRecord) -> bool:
        return record.data_id == self.data_id and self.value_pattern.fullmatch(record.data_value) is not None


def load_state_map(path: str | Path) -> list[StateRule]:
    """Read ``data_id,value_regex,state_name`` lines.

    The regex is everything between the first and the last comma, so it may
    itself contain commas. Blank lines and ``#`` comments are skipped.
    """
    rules = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        first, last = line.find(","), line.rfind(",")
        if first < 0 or first == last:
            raise DataError(f"{path}:{lineno}: expected data_id,value_regex,state_name")
        try:
            pattern = re.compile(line[first + 1:last])
        except re.error as exc:
            raise DataError(f"{path}:{lineno}: bad regex: {exc}") from None
        try:
            state = ProductionState.parse(line[last + 1:])
        except (DataError, ValueError):
            raise DataError(f"{path}:{lineno}: unknown state {line[last + 1:].strip()!r}") from None
        rules.append(StateRule(line[:first].strip(), pattern, state))
    if not rules:
        raise DataError(f"{path}: state map is empty")
    return rules


def write_state_map(rules: Sequence[StateRule], path: str | Path) -> None:
    lines = [f"{r.data_id},{r.value_pattern.pattern},{r.state.label}" for r in rules]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class StateEpisode:
    state: ProductionState
    start_ms: float
    end_ms: float
    records: list[LogRecord] = field(default_factory=list)

    @property
    def duration_ms(self) -> float:
        return self.end_ms - self.start_ms


@dataclass
class AnnotatedTrace:
    episodes: list[StateEpisode]

    def __post_init__(self):
        for prev, nxt in zip(self.episodes, self.episodes[1:]):
            if nxt.start_ms < prev.end_ms:
                raise DataError("episodes overlap")
            if nxt.state == prev.state:
                raise DataError("consecutive episodes share a state")

    @property
    def transitions(self) -> list[tuple[ProductionState, ProductionState]]:
        return [(a.state, b.state) for a, b in zip(self.episodes, self.episodes[1:])]


def _classify(record: LogRecord, rules: Sequence[StateRule]) -> ProductionState | None:
    for rule in rules:
        if rule.matches(record):
            return rule.state
    return None


def annotate_states(records: Sequence[LogRecord], state_map: Sequence[StateRule]) -> AnnotatedTrace:
    """Cut a sorted record stream into production-state episodes.

    An episode opens at every control record whose state differs from the
    current one and closes at the next such record; the final episode closes
    at the last record. Records before the first control record are dropped.
    """
    if not state_map:
        raise DataError("state map is empty")
    episodes: list[StateEpisode] = []
    current: StateEpisode | None = None
    for record in records:
        state = _classify(record, state_map)
        if state is not None and (current is None or state != current.state):
            if current is not None:
                current.end_ms = record.processed_time
                episodes.append(current)
            current = StateEpisode(state, record.processed_time, record.processed_time, [record])
            continue
        if current is None:
            continue
        current.records.append(record)
        current.end_ms = record.processed_time
    if current is None:
        raise DataError("no state information in log")
    episodes.append(current)
    return AnnotatedTrace(episodes)


def extract_samples(trace: AnnotatedTrace) -> list[TrafficSample]:
    """Interarrival/size pairs between consecutive records of each episode."""
    samples = []
    for episode in trace.episodes:
        recs = episode.records
        for prev, cur in zip(recs, recs[1:]):
            gap = cur.processed_time - prev.processed_time
            if gap <= 0:
                continue
            samples.append(TrafficSample(gap, quantize_payload(cur.data_payload), episode.state))
    return samples


@dataclass
class DatasetSplit:
    train: list[TrafficSample]
    test: list[TrafficSample]
    seed: int
    ratio: float

    def state_counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for name, part in (("train", self.train), ("test", self.test)):
            counts = Counter(s.state for s in part)
            out[name] = {st.label: counts.get(st, 0) for st in ProductionState}
        return out


def split_dataset(samples: Sequence[TrafficSample], ratio: float = 0.7, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then the first ``ceil(ratio * n)`` samples go to training.

    Both parts are kept non-empty, so for tiny inputs the train share is
    capped at ``n - 1``.
    """
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(samples)
    if n < 2:
        raise DataError(f"need at least 2 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(math.ceil(ratio * n), n - 1)
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return DatasetSplit(train, test, seed, ratio)


def samples_by_state(samples: Iterable[TrafficSample]) -> dict[ProductionState, list[TrafficSample]]:
    out: dict[ProductionState, list[TrafficSample]] = {st: [] for st in ProductionState}
    for s in samples:
        out[s.state].append(s)
    return out


def samples_to_arrays(samples: Sequence[TrafficSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column arrays ``(interarrival_ms, size_bytes, state_code)``."""
    t = np.array([s.interarrival_ms for s in samples], dtype=float)
    size = np.array([s.size_bytes for s in samples], dtype=np.int64)
    st = np.array([int(s.state) for s in samples], dtype=np.int64)
    return t, size, st


def write_samples(samples: Iterable[TrafficSample], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SAMPLE_COLUMNS)
        for s in samples:
            writer.writerow([repr(float(s.interarrival_ms)), s.size_bytes, s.state.label])


def read_samples(path: str | Path) -> list[TrafficSample]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SAMPLE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing column {missing[0]!r}")
        for row in reader:
            try:
                out.append(TrafficSample(float(row["interarrival_ms"]), int(row["size_bytes"]),
                                         ProductionState.parse(row["state"])))
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{reader.line_num}: {exc}") from None
    return out


def write_episodes(trace: AnnotatedTrace, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPISODE_COLUMNS)
        for ep in trace.episodes:
            writer.writerow([ep.state.label, repr(float(ep.start_ms)), repr(float(ep.end_ms)), len(ep.records)])


def read_episodes(path: str | Path) -> AnnotatedTrace:
    """Load an episode table; records are not persisted, only the timeline."""
    episodes = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in EPISODE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing column {missing[0]!r}")
        for row in reader:
            try:
                episodes.append(StateEpisode(ProductionState.parse(row["state"]),
                                             float(row["start_ms"]), float(row["end_ms"])))
            except ValueError as exc:
                raise DataError(f"{path}:{reader.line_num}: {exc}") from None
    return AnnotatedTrace(episodes)
