"""State-aware packet trace synthesis and the Poisson-arrival baseline.

A trace starts in Running. Each step draws the next state from the embedded
chain and a jumping time from the observed durations, then fills the
current episode with packets from the state's generative model: arrival
times accumulate from the episode start, and the first packet that would
reach the episode end is dropped, closing the episode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import STATES, DataError, LogRecord, ProductionState, TrafficSample
from .generative import TrafficSampler
from .ingest import AnnotatedTrace, StateEpisode
from .smp import SemiMarkovModel, sample_jumping_time, sample_next_state

TRACE_COLUMNS = ("timestamp_ms", "size_bytes", "state")
DRAW_BLOCK = 64


@dataclass
class Jump:
    index: int
    src: ProductionState
    dst: ProductionState
    time_ms: float


@dataclass
class SyntheticTrace:
    """Generated packets (time, size, state) plus the jump log.

    Episode ``k`` runs in ``jumps[k].src`` from the previous jump time (0 for
    the first) up to ``jumps[k].time_ms``.
    """

    timestamps: np.ndarray = field(default_factory=lambda: np.empty(0))
    sizes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    states: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    jumps: list[Jump] = field(default_factory=list)

    def __len__(self) -> int:
        return self.timestamps.size

    def episode_bounds(self) -> list[tuple[ProductionState, float, float]]:
        bounds, start = [], 0.0
        for jump in self.jumps:
            bounds.append((jump.src, start, jump.time_ms))
            start = jump.time_ms
        return bounds

    def visited_states(self) -> list[ProductionState]:
        return [j.src for j in self.jumps]


def reachable_states(p: np.ndarray, start: ProductionState) -> set[ProductionState]:
    seen, stack = {start}, [start]
    while stack:
        i = stack.pop() - 1
        for j in np.flatnonzero(p[i] > 0):
            st = ProductionState(int(j) + 1)
            if st not in seen:
                seen.add(st)
                stack.append(st)
    return seen


def generate_trace(smp: SemiMarkovModel, sampler: TrafficSampler, n_max: int, seed: int = 0,
                   absorbing: bool = False) -> SyntheticTrace:
    """Synthesize ``n_max`` state jumps worth of packets.

    With ``absorbing`` set, reaching a state that was never left in the
    data ends the trace early; otherwise that raises.
    """
    if n_max < 1:
        raise DataError(f"n_max must be at least 1, got {n_max}")
    start = ProductionState.RUNNING
    for st in sorted(reachable_states(smp.p, start)):
        if not smp.p[st - 1].any():
            if not absorbing:
                raise DataError(f"dead state {st.label} is reachable; pass absorbing=True to stop there")
            continue
        if not sampler.covers(st):
            raise DataError(f"no generative model for reachable state {st.label}")
    rng = np.random.default_rng(seed)
    times, sizes, states = [], [], []
    jumps: list[Jump] = []
    state, t = start, 0.0
    for n in range(n_max):
        if not smp.p[state - 1].any():
            if absorbing:
                break
            raise DataError(f"dead state {state.label} after {n} jumps")
        nxt = sample_next_state(smp, state, rng)
        end = t + sample_jumping_time(smp, state, nxt, rng)
        cursor = t
        while True:
            gaps, block_sizes = sampler.traffic(state, DRAW_BLOCK, rng)
            arrivals = cursor + np.cumsum(gaps)
            keep = int(np.searchsorted(arrivals, end, side="left"))
            times.append(arrivals[:keep])
            sizes.append(block_sizes[:keep])
            states.append(np.full(keep, int(state)))
            if keep < DRAW_BLOCK:
                break
            cursor = arrivals[-1]
        jumps.append(Jump(n + 1, state, nxt, end))
        state, t = nxt, end
    if times:
        return SyntheticTrace(np.concatenate(times), np.concatenate(sizes).astype(np.int64),
                              np.concatenate(states).astype(np.int64), jumps)
    return SyntheticTrace(jumps=jumps)


def exponential_baseline(rate_lambda: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. exponential interarrival times with mean ``1 / rate_lambda`` ms."""
    if not rate_lambda > 0:
        raise DataError(f"rate must be positive, got {rate_lambda}")
    return rng.exponential(1.0 / rate_lambda, size=n)


def _rows(trace: SyntheticTrace):
    """Export rows in time order, with a zero-byte announcement at each episode start."""
    bounds = trace.episode_bounds()
    if bounds:
        final = trace.jumps[-1]
        bounds.append((final.dst, final.time_ms, final.time_ms))
    k = 0
    for state, start, end in bounds:
        yield start, 0, state
        while k < len(trace) and trace.timestamps[k] < end:
            yield float(trace.timestamps[k]), int(trace.sizes[k]), ProductionState(int(trace.states[k]))
            k += 1
    while k < len(trace):
        yield float(trace.timestamps[k]), int(trace.sizes[k]), ProductionState(int(trace.states[k]))
        k += 1


def export_trace(trace: SyntheticTrace, path) -> None:
    """Write ``timestamp_ms,size_bytes,state`` rows.

    Each episode begins with a zero-byte row carrying the new state, the way
    the machine announces state changes, so episode boundaries survive a
    round trip even for episodes without packets.
    """
    try:
        fh = Path(path).open("w", newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write trace to {path}: {exc}") from None
    with fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for t, size, state in _rows(trace):
            writer.writerow([repr(float(t)), size, state.label])


def read_trace(path) -> AnnotatedTrace:
    """Load an exported trace; each run of equal states becomes one episode."""
    episodes: list[StateEpisode] = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TRACE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing column {missing[0]!r}")
        prev_t = None
        for row in reader:
            try:
                t = float(row["timestamp_ms"])
                size = int(row["size_bytes"])
                state = ProductionState.parse(row["state"])
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{reader.line_num}: {exc}") from None
            if prev_t is not None and t <= prev_t:
                raise DataError(f"{path}:{reader.line_num}: timestamps must be strictly increasing")
            prev_t = t
            record = LogRecord(t, "trace", state.label, size)
            if episodes and episodes[-1].state == state:
                episodes[-1].records.append(record)
                episodes[-1].end_ms = t
            else:
                if episodes:
                    episodes[-1].end_ms = t
                episodes.append(StateEpisode(state, t, t, [record]))
    return AnnotatedTrace(episodes)


def trace_samples(trace: SyntheticTrace) -> list[TrafficSample]:
    """Interarrival samples of a trace, measured from each episode start."""
    out = []
    k = 0
    for state, start, end in trace.episode_bounds():
        prev = start
        while k < len(trace) and trace.timestamps[k] < end:
            cur = float(trace.timestamps[k])
            if cur > prev:
                out.append(TrafficSample(cur - prev, int(trace.sizes[k]), state))
            prev = cur
            k += 1
    return out


def visit_frequencies(trace: SyntheticTrace) -> np.ndarray:
    visits = np.zeros(len(STATES))
    for st in trace.visited_states():
        visits[st - 1] += 1
    return visits / max(visits.sum(), 1.0)
