import re

import pytest

from prodtraffic.core import DataError, LogRecord, ProductionState, TrafficSample
from prodtraffic.ingest import (
    AnnotatedTrace,
    StateEpisode,
    StateRule,
    annotate_states,
    extract_samples,
    load_state_map,
    ms_to_timestamp,
    parse_log,
    read_episodes,
    read_samples,
    split_dataset,
    timestamp_to_ms,
    write_episodes,
    write_log,
    write_samples,
    write_state_map,
)

R, S = ProductionState.RUNNING, ProductionState.STOPPED
RULES = [StateRule("ctl", re.compile(st.label), st) for st in ProductionState]
HEADER = "processed_time,data_id,data_value,data_payload\n"


def ctrl(t, state):
    return LogRecord(t, "ctl", state.label, 0)


def data(t, payload=10):
    return LogRecord(t, "dat", "x", payload)


def test_timestamp_round_trip():
    ms = timestamp_to_ms("2022-03-01T08:15:00.123")
    assert ms_to_timestamp(ms) == "2022-03-01T08:15:00.123000"
    assert timestamp_to_ms("2022-03-01T08:15:00.123+01:00") == ms - 3_600_000
    assert timestamp_to_ms(ms_to_timestamp(ms + 0.25)) == ms + 0.25


def test_parse_log_sorts_and_keeps_tie_order(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text(HEADER + "2022-03-01T00:00:00.300,a,x,1\n"
                    "2022-03-01T00:00:00.100,b,first,2\n"
                    "2022-03-01T00:00:00.100,b,second,3\n")
    recs = parse_log(path)
    assert [r.data_value for r in recs] == ["first", "second", "x"]
    assert recs[2].processed_time - recs[0].processed_time == pytest.approx(200.0)


def test_parse_log_bad_timestamp_names_line(tmp_path):
    path = tmp_path / "log.csv"
    rows = ["2022-03-01T00:00:00.%03d,a,x,1\n" % i for i in range(3)]
    path.write_text(HEADER + "".join(rows) + "not-a-date,a,x,1\n")
    with pytest.raises(DataError, match=":5:"):
        parse_log(path)


@pytest.mark.parametrize("body,msg", [
    ("2022-03-01T00:00:00,a,x\n", "malformed row"),
    ("2022-03-01T00:00:00,a,x,big\n", "not an integer"),
    ("2022-03-01T00:00:00,a,x,-4\n", "negative payload"),
])
def test_parse_log_row_errors(tmp_path, body, msg):
    path = tmp_path / "log.csv"
    path.write_text(HEADER + body)
    with pytest.raises(DataError, match=msg):
        parse_log(path)


def test_parse_log_missing_column(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text("processed_time,data_id,data_value\n")
    with pytest.raises(DataError, match="data_payload"):
        parse_log(path)


def test_log_write_parse_round_trip(tmp_path):
    recs = [ctrl(1_646_122_500_000.0, R), data(1_646_122_500_010.5, 40), data(1_646_122_500_011.125, 0)]
    write_log(recs, tmp_path / "log.csv")
    assert parse_log(tmp_path / "log.csv") == recs


def test_state_map_file(tmp_path):
    path = tmp_path / "map.csv"
    path.write_text("# comment\n\nctl,Run(ning|s),Running\nctl,a,b,Stopped\n")
    rules = load_state_map(path)
    assert rules[0].matches(LogRecord(0, "ctl", "Runs", 0))
    assert not rules[0].matches(LogRecord(0, "ctl", "Runningx", 0))
    assert rules[1].value_pattern.pattern == "a,b" and rules[1].state is S
    write_state_map(rules, tmp_path / "again.csv")
    assert [r.state for r in load_state_map(tmp_path / "again.csv")] == [R, S]


@pytest.mark.parametrize("text,msg", [("", "empty"), ("ctl,x,Idle\n", "unknown state"),
                                      ("ctl,(,Running\n", "bad regex"), ("ctl\n", "expected")])
def test_state_map_errors(tmp_path, text, msg):
    path = tmp_path / "map.csv"
    path.write_text(text)
    with pytest.raises(DataError, match=msg):
        load_state_map(path)


def test_annotate_basic():
    trace = annotate_states([ctrl(0, R), data(1), ctrl(2, S), data(5)], RULES)
    assert [(e.state, e.start_ms, e.end_ms) for e in trace.episodes] == [(R, 0, 2), (S, 2, 5)]


def test_annotate_discards_leading_records():
    trace = annotate_states([data(0), ctrl(1, R), data(3)], RULES)
    assert len(trace.episodes) == 1
    assert [r.processed_time for r in trace.episodes[0].records] == [1, 3]


def test_annotate_merges_repeated_state():
    trace = annotate_states([ctrl(0, R), data(1), ctrl(2, R), data(3)], RULES)
    assert len(trace.episodes) == 1
    assert len(trace.episodes[0].records) == 4


def test_annotate_without_control_records():
    with pytest.raises(DataError, match="no state information in log"):
        annotate_states([data(0), data(1)], RULES)
    with pytest.raises(DataError):
        annotate_states([ctrl(0, R)], [])


def test_extract_samples_hand_trace():
    ep = StateEpisode(R, 0, 25, [ctrl(0, R), data(10, 4), data(10, 8), data(25, 100)])
    samples = extract_samples(AnnotatedTrace([ep]))
    assert samples == [TrafficSample(10, 32, R), TrafficSample(15, 128, R)]


def test_extract_samples_boundaries():
    single = AnnotatedTrace([StateEpisode(R, 0, 0, [ctrl(0, R)])])
    assert extract_samples(single) == []
    two = AnnotatedTrace([StateEpisode(R, 0, 10, [ctrl(0, R), data(5)]),
                          StateEpisode(S, 10, 20, [ctrl(10, S), data(12)])])
    out = extract_samples(two)
    assert [(s.interarrival_ms, s.state) for s in out] == [(5, R), (2, S)]


def test_trace_invariants():
    with pytest.raises(DataError, match="overlap"):
        AnnotatedTrace([StateEpisode(R, 0, 10), StateEpisode(S, 5, 20)])
    with pytest.raises(DataError, match="share a state"):
        AnnotatedTrace([StateEpisode(R, 0, 10), StateEpisode(R, 10, 20)])


def test_split_examples():
    samples = [TrafficSample(float(i + 1), 32, R) for i in range(10)]
    a = split_dataset(samples, 0.7, seed=42)
    b = split_dataset(samples, 0.7, seed=42)
    assert (len(a.train), len(a.test)) == (7, 3)
    assert a.train == b.train and a.test == b.test
    assert set(a.train).isdisjoint(a.test)
    assert a.state_counts()["train"]["Running"] == 7
    with pytest.raises(DataError):
        split_dataset(samples[:1], 0.7, 0)
    with pytest.raises(DataError):
        split_dataset(samples, 1.0, 0)


def test_split_keeps_both_sides_non_empty():
    samples = [TrafficSample(1.0, 32, R), TrafficSample(2.0, 32, R)]
    split = split_dataset(samples, 0.9, seed=0)
    assert len(split.train) == 1 and len(split.test) == 1


def test_samples_and_episodes_files(tmp_path):
    samples = [TrafficSample(0.1 + 0.2, 64, R), TrafficSample(1e-3, 0, S)]
    write_samples(samples, tmp_path / "s.csv")
    assert read_samples(tmp_path / "s.csv") == samples
    trace = AnnotatedTrace([StateEpisode(R, 0.5, 10.25), StateEpisode(S, 10.25, 30.0)])
    write_episodes(trace, tmp_path / "e.csv")
    back = read_episodes(tmp_path / "e.csv")
    assert [(e.state, e.start_ms, e.end_ms) for e in back.episodes] == [(R, 0.5, 10.25), (S, 10.25, 30.0)]


def test_parse_annotate_deterministic(tmp_path):
    recs = [ctrl(1e12, R), data(1e12 + 3), ctrl(1e12 + 9, S), data(1e12 + 12)]
    write_log(recs, tmp_path / "log.csv")
    a = annotate_states(parse_log(tmp_path / "log.csv"), RULES)
    b = annotate_states(parse_log(tmp_path / "log.csv"), RULES)
    assert a == b
    assert sum(len(extract_samples(AnnotatedTrace([e]))) for e in a.episodes) == len(extract_samples(a))
