import numpy as np
import pytest

from prodtraffic.core import DataError, ProductionState
from prodtraffic.evaluation import MEASURED_TRANSITION_COUNTS, state_kl
from prodtraffic.ingest import extract_samples
from prodtraffic.smp import SemiMarkovModel, embedded_stationary
from prodtraffic.traffic import (
    SyntheticTrace,
    exponential_baseline,
    export_trace,
    generate_trace,
    read_trace,
    reachable_states,
    trace_samples,
    visit_frequencies,
)

R, RE, S, A, E = ProductionState


class ConstantSampler:
    def __init__(self, gap=40.0, size=64, states=tuple(ProductionState)):
        self.gap, self.size, self.states = gap, size, set(states)

    def covers(self, state):
        return state in self.states

    def traffic(self, state, n, rng):
        return np.full(n, self.gap), np.full(n, self.size, dtype=np.int64)


class LognormalSampler(ConstantSampler):
    def traffic(self, state, n, rng):
        return rng.lognormal(3.0, 0.8, n), np.full(n, 32, dtype=np.int64)


def flip_model(jump_ms=100.0):
    counts = np.zeros((5, 5), dtype=int)
    counts[0, 2] = counts[2, 0] = 1
    return SemiMarkovModel(counts, {(0, 2): [jump_ms], (2, 0): [jump_ms]})


def measured_model(jump_ms=5.0):
    counts = MEASURED_TRANSITION_COUNTS
    return SemiMarkovModel(counts, {(i, j): [jump_ms] for i, j in zip(*np.nonzero(counts))})


def test_hand_example_drops_packet_past_episode_end():
    trace = generate_trace(flip_model(), ConstantSampler(), 1)
    assert trace.timestamps.tolist() == [40.0, 80.0]
    assert trace.states.tolist() == [1, 1]
    assert [(j.src, j.dst, j.time_ms) for j in trace.jumps] == [(R, S, 100.0)]


def test_two_jumps_restart_from_episode_start():
    trace = generate_trace(flip_model(), ConstantSampler(), 2)
    assert trace.timestamps.tolist() == [40.0, 80.0, 140.0, 180.0]
    assert trace.states.tolist() == [1, 1, 3, 3]


def test_n_max_must_be_positive():
    with pytest.raises(DataError, match="n_max"):
        generate_trace(flip_model(), ConstantSampler(), 0)


def test_dead_state_requires_absorbing():
    counts = np.zeros((5, 5), dtype=int)
    counts[0, 3] = 1
    model = SemiMarkovModel(counts, {(0, 3): [50.0]})
    with pytest.raises(DataError, match="dead state Aborted"):
        generate_trace(model, ConstantSampler(), 5)
    trace = generate_trace(model, ConstantSampler(), 5, absorbing=True)
    assert len(trace.jumps) == 1 and trace.timestamps.tolist() == [40.0]


def test_uncovered_reachable_state():
    with pytest.raises(DataError, match="no generative model for reachable state Stopped"):
        generate_trace(flip_model(), ConstantSampler(states=[R]), 3)


def test_reachable_states():
    assert reachable_states(flip_model().p, R) == {R, S}
    assert reachable_states(measured_model().p, R) == set(ProductionState)


def test_trace_is_deterministic_per_seed():
    a = generate_trace(flip_model(1000.0), LognormalSampler(), 5, seed=3)
    b = generate_trace(flip_model(1000.0), LognormalSampler(), 5, seed=3)
    assert np.array_equal(a.timestamps, b.timestamps)


def test_visit_frequencies_follow_stationary_vector():
    model = measured_model()
    trace = generate_trace(model, ConstantSampler(gap=2.0), 5000, seed=1)
    freq = visit_frequencies(trace)
    assert freq.sum() == pytest.approx(1.0)
    assert np.abs(freq - embedded_stationary(model.matrix)).max() < 0.03


def test_exponential_baseline_mean():
    draws = exponential_baseline(0.1, 100_000, np.random.default_rng(0))
    assert abs(draws.mean() - 10.0) < 0.2
    with pytest.raises(DataError):
        exponential_baseline(0.0, 5, np.random.default_rng(0))


def test_export_empty_and_no_jump_traces(tmp_path):
    export_trace(SyntheticTrace(), tmp_path / "empty.csv")
    assert (tmp_path / "empty.csv").read_text() == "timestamp_ms,size_bytes,state\n"
    two = SyntheticTrace(np.array([1.5, 2.0]), np.array([32, 64]), np.array([1, 1]))
    export_trace(two, tmp_path / "two.csv")
    lines = (tmp_path / "two.csv").read_text().splitlines()
    assert lines == ["timestamp_ms,size_bytes,state", "1.5,32,Running", "2.0,64,Running"]


def test_export_unwritable_path(tmp_path):
    with pytest.raises(DataError, match="cannot write trace"):
        export_trace(SyntheticTrace(), tmp_path / "missing" / "t.csv")


def test_export_round_trip(tmp_path):
    trace = generate_trace(flip_model(), ConstantSampler(), 3)
    export_trace(trace, tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[1] == "0.0,0,Running" and rows[3] == "80.0,64,Running" and rows[4] == "100.0,0,Stopped"
    back = read_trace(tmp_path / "t.csv")
    assert [e.state for e in back.episodes] == [R, S, R, S]
    assert sorted(extract_samples(back), key=repr) == sorted(trace_samples(trace), key=repr)


def test_read_trace_rejects_time_reversal(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("timestamp_ms,size_bytes,state\n1.0,0,Running\n1.0,32,Running\n")
    with pytest.raises(DataError, match=":3: timestamps must be strictly increasing"):
        read_trace(path)


def test_assembled_interarrivals_match_model():
    trace = generate_trace(flip_model(1e6), LognormalSampler(), 4, seed=5)
    assembled = [s.interarrival_ms for s in trace_samples(trace)]
    direct = np.random.default_rng(6).lognormal(3.0, 0.8, 20_000)
    assert len(assembled) > 10_000
    assert state_kl(direct, assembled) < 0.1
