"""Log-scale histograms, KL divergence, model comparison and synthetic ground truth."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy.special import ndtr

from .core import (
    N_STATES,
    PAYLOAD_QUANTUM,
    STATES,
    DataError,
    LogRecord,
    ProductionState,
    TrafficSample,
)
from .ingest import AnnotatedTrace, StateEpisode
from .smp import embedded_stationary, estimate_transition_matrix, pick_categorical

DEFAULT_BINS = 50
KL_SMOOTHING = 1e-10
MIN_GENERATED = 10_000
STANDARD_ROWS = ("VAE 1D", "CVAE 1D", "GAN 1D", "VAE 2D", "CVAE 2D", "GAN 2D")


@dataclass(frozen=True)
class LogHistogram:
    """Histogram over equal-width bins of ln(ms); ``edges`` are in ln units."""

    edges: np.ndarray
    masses: np.ndarray
    sample_count: int

    def __post_init__(self):
        if self.masses.size != self.edges.size - 1:
            raise DataError("histogram needs exactly one mass per bin")
        if not np.all(np.diff(self.edges) > 0):
            raise DataError("histogram edges must be strictly increasing")
        if np.any(self.masses < 0) or abs(self.masses.sum() - 1.0) > 1e-12:
            raise DataError("histogram masses must be non-negative and sum to 1")


def log_edges(lo_ms: float, hi_ms: float, bins: int = DEFAULT_BINS) -> np.ndarray:
    if bins < 2:
        raise DataError(f"need at least 2 bins, got {bins}")
    if not (lo_ms > 0 and hi_ms > lo_ms):
        raise DataError(f"invalid histogram range ({lo_ms}, {hi_ms})")
    return np.linspace(np.log(lo_ms), np.log(hi_ms), bins + 1)


def build_histogram(samples, bins: int = DEFAULT_BINS, range: tuple[float, float] | None = None,
                    edges: np.ndarray | None = None) -> LogHistogram:
    """Histogram of positive millisecond values on equal-width ln bins.

    Bins are half-open ``[lo, hi)`` except the last, which is closed.
    Values outside the range fall into the end bins. The range defaults to
    the sample min and max; ``edges`` (ln units) overrides both.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise DataError("cannot build a histogram from zero samples")
    if not np.all(x > 0):
        raise DataError("histogram samples must be positive")
    if edges is None:
        lo, hi = (x.min(), x.max()) if range is None else range
        edges = log_edges(lo, hi, bins)
    edges = np.asarray(edges, dtype=float)
    idx = np.searchsorted(edges, np.log(x), side="right") - 1
    idx = np.clip(idx, 0, edges.size - 2)
    counts = np.bincount(idx, minlength=edges.size - 1).astype(float)
    return LogHistogram(edges, counts / x.size, int(x.size))


def kl_divergence(p: LogHistogram, q: LogHistogram) -> float:
    """KL(p || q) in nats.

    If ``q`` is empty somewhere ``p`` has mass, ``q`` gets 1e-10 added to
    every bin and is renormalized, so a missed mode costs a large finite
    penalty instead of infinity.
    """
    if not np.array_equal(p.edges, q.edges):
        raise DataError("histograms must share bin edges")
    pm, qm = p.masses, q.masses
    support = pm > 0
    if np.any(qm[support] == 0):
        qm = (qm + KL_SMOOTHING) / (1.0 + KL_SMOOTHING * qm.size)
    return max(0.0, float(np.sum(pm[support] * np.log(pm[support] / qm[support]))))


def export_histogram(hist: LogHistogram, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["edge_lo", "edge_hi", "mass"])
        for lo, hi, m in zip(hist.edges[:-1], hist.edges[1:], hist.masses):
            writer.writerow([repr(float(lo)), repr(float(hi)), repr(float(m))])


def read_histogram(path, sample_count: int = 0) -> LogHistogram:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: histogram file has no bins")
    edges = [float(rows[0]["edge_lo"])] + [float(r["edge_hi"]) for r in rows]
    return LogHistogram(np.array(edges), np.array([float(r["mass"]) for r in rows]), sample_count)


# model comparison ----------------------------------------------------------

class InterarrivalSource(Protocol):
    def covers(self, state: ProductionState) -> bool: ...

    def interarrivals(self, state, n: int, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class ReplaySampler:
    """Bootstraps stored samples; with the real test data it is the best possible generator."""

    pools: Mapping[ProductionState, np.ndarray]

    def covers(self, state) -> bool:
        return len(self.pools.get(state, ())) > 0

    def interarrivals(self, state, n, rng):
        pool = np.asarray(self.pools[state], dtype=float)
        return pool[rng.integers(pool.size, size=n)]


@dataclass
class ExponentialSampler:
    """Poisson-arrival baseline with a per-state rate (events per ms)."""

    rates: Mapping[ProductionState, float]

    @classmethod
    def fit(cls, samples: Sequence[TrafficSample]) -> "ExponentialSampler":
        by_state: dict[ProductionState, list[float]] = {}
        for s in samples:
            by_state.setdefault(s.state, []).append(s.interarrival_ms)
        return cls({st: 1.0 / float(np.mean(v)) for st, v in by_state.items()})

    def covers(self, state) -> bool:
        return state in self.rates

    def interarrivals(self, state, n, rng):
        from .traffic import exponential_baseline
        return exponential_baseline(self.rates[state], n, rng)


@dataclass
class ComparisonTable:
    rows: list[str]
    states: list[ProductionState]
    values: np.ndarray
    real_histograms: dict[ProductionState, LogHistogram] = field(default_factory=dict)
    generated_histograms: dict[tuple[str, ProductionState], LogHistogram] = field(default_factory=dict)

    def value(self, row: str, state) -> float:
        return float(self.values[self.rows.index(row), self.states.index(ProductionState.parse(state))])

    def to_csv(self) -> str:
        lines = [",".join(["model"] + [s.label for s in self.states])]
        for name, vals in zip(self.rows, self.values):
            lines.append(",".join([name] + [repr(float(v)) for v in vals]))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def state_kl(real_ms, generated_ms, bins: int = DEFAULT_BINS) -> float:
    """KL between real and generated interarrivals on bins fit to the real data."""
    real = build_histogram(real_ms, bins)
    return kl_divergence(real, build_histogram(generated_ms, edges=real.edges))


def compare_models(real: Mapping[ProductionState, Sequence[float]],
                   samplers: Mapping[str, InterarrivalSource], seed: int = 0,
                   bins: int = DEFAULT_BINS, required: Sequence[str] = STANDARD_ROWS) -> ComparisonTable:
    """KL table, one row per generator and one column per state.

    Each cell compares the real per-state interarrivals with
    ``max(len(real), 10_000)`` generated ones on ``bins`` ln-bins fit to the
    real data. Rows named in ``required`` come first, in that order.
    """
    for name in required:
        if name not in samplers:
            raise DataError(f"missing model for row {name!r}")
    rows = list(required) + [name for name in samplers if name not in required]
    states = [st for st in STATES if len(real.get(st, ())) > 0]
    if not states:
        raise DataError("no real test samples for any state")
    values = np.empty((len(rows), len(states)))
    table = ComparisonTable(rows, states, values)
    for j, st in enumerate(states):
        table.real_histograms[st] = build_histogram(real[st], bins)
    for i, name in enumerate(rows):
        sampler = samplers[name]
        for j, st in enumerate(states):
            if not sampler.covers(st):
                raise DataError(f"missing model for cell ({name}, {st.label})")
            rng = np.random.default_rng([seed, i, int(st)])
            n = max(len(real[st]), MIN_GENERATED)
            gen = build_histogram(sampler.interarrivals(st, n, rng), edges=table.real_histograms[st].edges)
            table.generated_histograms[(name, st)] = gen
            values[i, j] = kl_divergence(table.real_histograms[st], gen)
    return table


# synthetic ground truth ------------------------------------------------------

@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mu: float
    """Mean of ln(interarrival ms)."""
    sigma: float


@dataclass
class StateProfile:
    components: list[MixtureComponent]
    sizes: dict[int, float]
    """Packet size in bytes -> probability."""
    packets_per_visit: float

    def __post_init__(self):
        w = np.array([c.weight for c in self.components])
        if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DataError("mixture weights must be non-negative and sum to 1")
        if any(c.sigma <= 0 for c in self.components):
            raise DataError("mixture sigmas must be positive")
        if any(s <= 0 or s % PAYLOAD_QUANTUM for s in self.sizes) or abs(sum(self.sizes.values()) - 1.0) > 1e-9:
            raise DataError("packet sizes must be positive multiples of 32 with probabilities summing to 1")
        if self.packets_per_visit < 0:
            raise DataError("packets_per_visit must be non-negative")

    def draw_interarrivals(self, n: int, rng: np.random.Generator) -> np.ndarray:
        w = np.array([c.weight for c in self.components])
        mu = np.array([c.mu for c in self.components])
        sg = np.array([c.sigma for c in self.components])
        k = rng.choice(w.size, size=n, p=w)
        return np.exp(mu[k] + sg[k] * rng.standard_normal(n))

    def draw_sizes(self, n: int, rng: np.random.Generator) -> np.ndarray:
        values = np.array(sorted(self.sizes), dtype=np.int64)
        probs = np.array([self.sizes[v] for v in values])
        return values[rng.choice(values.size, size=n, p=probs)]

    def bin_masses(self, edges: np.ndarray) -> np.ndarray:
        """Exact mixture probability of each ln-bin, renormalized to the bin range."""
        cdf = sum(c.weight * ndtr((edges - c.mu) / c.sigma) for c in self.components)
        masses = np.diff(cdf)
        return masses / masses.sum()


@dataclass
class SyntheticSpec:
    """Ground truth for synthetic logs.

    Episodes follow an embedded chain with transition probabilities ``p``.
    Inside an episode the machine sends ``Poisson(packets_per_visit)``
    packets with i.i.d. interarrivals from the state's log-normal mixture,
    then stays idle for a log-normal gap (``gap_mu``/``gap_sigma`` per
    ordered state pair) before announcing the next state. The episode
    duration, i.e. the jumping time, is the packet span plus that gap.
    """

    profiles: dict[ProductionState, StateProfile]
    p: np.ndarray
    gap_mu: np.ndarray
    gap_sigma: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.gap_mu = np.asarray(self.gap_mu, dtype=float)
        self.gap_sigma = np.asarray(self.gap_sigma, dtype=float)
        if self.p.shape != (N_STATES, N_STATES) or np.any(np.diag(self.p) != 0):
            raise DataError("transition matrix must be 5x5 with zero diagonal")
        rows = self.p.sum(axis=1)
        if np.any((rows != 0) & (np.abs(rows - 1.0) > 1e-9)):
            raise DataError("transition rows must sum to 1 or be all zero")
        if np.any(self.gap_sigma <= 0):
            raise DataError("gap sigmas must be positive")
        for i, j in zip(*np.nonzero(self.p)):
            if ProductionState(j + 1) not in self.profiles:
                raise DataError(f"state {j + 1} is reachable but has no traffic profile")

    def to_dict(self) -> dict:
        return {
            "profiles": {
                st.label: {
                    "components": [[c.weight, c.mu, c.sigma] for c in prof.components],
                    "sizes": {str(k): v for k, v in sorted(prof.sizes.items())},
                    "packets_per_visit": prof.packets_per_visit,
                }
                for st, prof in sorted(self.profiles.items())
            },
            "p": self.p.tolist(),
            "gap_mu": self.gap_mu.tolist(),
            "gap_sigma": self.gap_sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        profiles = {
            ProductionState.parse(name): StateProfile(
                [MixtureComponent(*c) for c in prof["components"]],
                {int(k): float(v) for k, v in prof["sizes"].items()},
                float(prof["packets_per_visit"]),
            )
            for name, prof in doc["profiles"].items()
        }
        return cls(profiles, np.array(doc["p"]), np.array(doc["gap_mu"]), np.array(doc["gap_sigma"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


# Transition counts measured on a production machine, among Running, Reentry, Stopped, Aborted, Ended.
MEASURED_TRANSITION_COUNTS = np.array([
    [0, 4, 296, 17, 151],
    [51, 0, 36, 21, 0],
    [198, 52, 0, 2, 15],
    [9, 0, 31, 0, 0],
    [63, 0, 103, 0, 0],
])

# Sample counts per state the default spec aims for: roughly 15000 for
# Running and 500 for Reentry and Aborted, as in the measured data.
DEFAULT_TARGETS = {
    ProductionState.RUNNING: 15000,
    ProductionState.REENTRY: 500,
    ProductionState.STOPPED: 3000,
    ProductionState.ABORTED: 500,
    ProductionState.ENDED: 2000,
}
DEFAULT_JUMPS = 4000

_LN = np.log


def _mix(*parts) -> list[MixtureComponent]:
    return [MixtureComponent(w, float(_LN(median_ms)), s) for w, median_ms, s in parts]


def default_mixtures() -> dict[ProductionState, list[MixtureComponent]]:
    """Distinct multi-modal interarrival mixtures, one per state."""
    return {
        # peaks at tens of ms, tens of seconds and minutes
        ProductionState.RUNNING: _mix((0.75, 30.0, 0.6), (0.18, 20_000.0, 0.5), (0.07, 120_000.0, 0.4)),
        ProductionState.REENTRY: _mix((0.6, 8.0, 0.5), (0.4, 200.0, 0.7)),
        ProductionState.STOPPED: _mix((0.5, 50.0, 0.8), (0.5, 5_000.0, 0.9)),
        ProductionState.ABORTED: _mix((0.7, 15.0, 0.5), (0.3, 1_500.0, 0.6)),
        ProductionState.ENDED: _mix((0.4, 100.0, 0.5), (0.6, 60_000.0, 0.7)),
    }


DEFAULT_SIZES = {
    ProductionState.RUNNING: {32: 0.55, 64: 0.25, 256: 0.12, 1024: 0.08},
    ProductionState.REENTRY: {32: 0.7, 64: 0.3},
    ProductionState.STOPPED: {32: 0.5, 96: 0.3, 512: 0.2},
    ProductionState.ABORTED: {32: 0.6, 128: 0.4},
    ProductionState.ENDED: {32: 0.4, 64: 0.4, 2048: 0.2},
}

# median idle gap (ms) before leaving each source state
_GAP_MEDIANS = np.array([600_000.0, 500.0, 120_000.0, 30_000.0, 60_000.0])


def default_spec(n_jumps: int = DEFAULT_JUMPS,
                 targets: Mapping[ProductionState, int] = DEFAULT_TARGETS) -> SyntheticSpec:
    """Five-state ground truth on the measured transition matrix.

    Packets per visit are set so that ``n_jumps`` episodes are expected to
    yield ``targets`` samples per state.
    """
    p = estimate_transition_matrix(MEASURED_TRANSITION_COUNTS).p
    visits = embedded_stationary(p) * n_jumps
    mixtures = default_mixtures()
    profiles = {
        st: StateProfile(mixtures[st], DEFAULT_SIZES[st], targets[st] / visits[st - 1]) for st in STATES
    }
    # destination-dependent offset keeps F_ij distinct across j
    gap_mu = np.log(_GAP_MEDIANS)[:, None] + 0.15 * np.arange(N_STATES)[None, :]
    gap_sigma = np.full((N_STATES, N_STATES), 0.8)
    return SyntheticSpec(profiles, p, gap_mu, gap_sigma)


def expected_counts(spec: SyntheticSpec, n_jumps: int) -> dict[ProductionState, float]:
    visits = embedded_stationary(spec.p) * n_jumps
    return {st: visits[st - 1] * prof.packets_per_visit for st, prof in spec.profiles.items()}


CONTROL_ID = "machine.state"
DATA_ID = "machine.data"


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    trace: AnnotatedTrace
    samples: list[TrafficSample]

    @property
    def records(self) -> list[LogRecord]:
        return [r for ep in self.trace.episodes for r in ep.records]

    def state_counts(self) -> dict[ProductionState, int]:
        counts = {st: 0 for st in STATES}
        for s in self.samples:
            counts[s.state] += 1
        return counts


def _on_clock(ms: float) -> float:
    # Log timestamps carry whole microseconds; snapping keeps written logs
    # re-ingestable into exactly the same samples.
    return round(ms * 1000.0) / 1000.0


def generate_synthetic_dataset(spec: SyntheticSpec, n_jumps: int = DEFAULT_JUMPS, seed: int = 0,
                               start: ProductionState = ProductionState.RUNNING,
                               t0_ms: float = 1_646_122_500_000.0) -> SyntheticDataset:
    """Simulate a machine log from ``spec``.

    Every episode opens with a control record announcing the state, so the
    samples returned here are exactly what ``extract_samples`` recovers from
    the records. The simulation stops after ``n_jumps`` transitions or on
    reaching a state with no outgoing transitions. Raw payloads are drawn
    below each packet size so that quantization restores the size.
    """
    rng = np.random.default_rng(seed)
    state = ProductionState.parse(start)
    t = _on_clock(t0_ms)
    episodes: list[StateEpisode] = []
    samples: list[TrafficSample] = []
    cum = np.cumsum(spec.p, axis=1)
    for n in range(n_jumps + 1):
        prof = spec.profiles[state]
        row = spec.p[state - 1]
        last = n == n_jumps or not row.any()
        ctrl = LogRecord(t, CONTROL_ID, state.label, int(rng.integers(8, 64)))
        episode = StateEpisode(state, t, t, [ctrl])
        k = int(rng.poisson(prof.packets_per_visit))
        gaps = prof.draw_interarrivals(k, rng)
        sizes = prof.draw_sizes(k, rng)
        raw = sizes - rng.integers(0, PAYLOAD_QUANTUM, size=k)
        cursor = t
        for gap, size, payload in zip(gaps, sizes, raw):
            nxt = _on_clock(cursor + float(gap))
            if nxt == cursor:
                continue
            episode.records.append(LogRecord(nxt, DATA_ID, "value", int(payload)))
            samples.append(TrafficSample(nxt - cursor, int(size), state))
            cursor = nxt
        episode.end_ms = cursor
        episodes.append(episode)
        if last:
            break
        target = ProductionState(pick_categorical(cum[state - 1], rng.random()) + 1)
        i, j = state - 1, target - 1
        idle = float(np.exp(spec.gap_mu[i, j] + spec.gap_sigma[i, j] * rng.standard_normal()))
        t = _on_clock(cursor + max(idle, 1e-3))
        episode.end_ms = t
        state = target
    return SyntheticDataset(spec, AnnotatedTrace(episodes), samples)
