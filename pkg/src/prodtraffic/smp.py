"""Semi-Markov model of the production process.

The embedded chain is a 5x5 transition matrix with zero diagonal, and each
observed ordered pair of states keeps the empirical set of jumping times
(the time spent in the source state before moving to that target).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import N_STATES, DataError, NumericalError, ProductionState
from .ingest import AnnotatedTrace

FORMAT_VERSION = 1

# Log clock resolution; shorter episodes are recorded at this floor so every
# stored jumping time stays positive.
MIN_JUMP_MS = 1.0


def _state_index(state) -> int:
    return int(ProductionState.parse(state)) - 1


def count_transitions(trace: AnnotatedTrace) -> tuple[np.ndarray, dict[tuple[int, int], list[float]]]:
    """Count episode boundaries and collect per-pair jumping times.

    Returns the 5x5 integer count matrix (row = source state, 0-based) and a
    dict mapping ``(i, j)`` 0-based pairs to the durations of source episodes
    that ended in a jump to ``j``. The last episode is open-ended and only
    contributes its incoming transition.
    """
    eps = trace.episodes
    if len(eps) < 2:
        raise DataError(f"need at least 2 episodes to count transitions, got {len(eps)}")
    counts = np.zeros((N_STATES, N_STATES), dtype=np.int64)
    jumping: dict[tuple[int, int], list[float]] = {}
    for src, dst in zip(eps, eps[1:]):
        i, j = src.state - 1, dst.state - 1
        counts[i, j] += 1
        jumping.setdefault((i, j), []).append(max(float(src.duration_ms), MIN_JUMP_MS))
    return counts, jumping


@dataclass(frozen=True)
class TransitionMatrix:
    p: np.ndarray
    dead_states: tuple[int, ...] = ()

    def row(self, i: int) -> np.ndarray:
        return self.p[i]


def estimate_transition_matrix(counts) -> TransitionMatrix:
    """Row-normalize a count matrix; all-zero rows stay zero and are flagged."""
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise DataError(f"count matrix must be square, got shape {counts.shape}")
    if np.any(counts < 0):
        raise DataError("transition counts must be non-negative")
    if np.any(np.diag(counts) != 0):
        i = int(np.flatnonzero(np.diag(counts))[0])
        raise DataError(f"self-transition count at state {i + 1} must be zero")
    totals = counts.sum(axis=1)
    p = np.zeros(counts.shape, dtype=float)
    live = totals > 0
    p[live] = counts[live] / totals[live, None]
    dead = tuple(int(i) for i in np.flatnonzero(~live))
    return TransitionMatrix(p, dead)


@dataclass
class SemiMarkovModel:
    counts: np.ndarray
    jumping: dict[tuple[int, int], np.ndarray]
    matrix: TransitionMatrix = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.matrix = estimate_transition_matrix(self.counts)
        clean = {}
        for (i, j), times in self.jumping.items():
            arr = np.sort(np.asarray(times, dtype=float))
            if arr.size == 0:
                continue
            if np.any(arr <= 0):
                raise DataError(f"jumping times for pair ({i + 1},{j + 1}) must be positive")
            clean[(int(i), int(j))] = arr
        for i in range(N_STATES):
            for j in range(N_STATES):
                if (self.counts[i, j] > 0) != ((i, j) in clean):
                    raise DataError(f"pair ({i + 1},{j + 1}): jumping samples present iff count > 0")
        self.jumping = clean

    @classmethod
    def from_trace(cls, trace: AnnotatedTrace) -> "SemiMarkovModel":
        counts, jumping = count_transitions(trace)
        return cls(counts, jumping)

    @property
    def p(self) -> np.ndarray:
        return self.matrix.p

    # persistence -------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "version": FORMAT_VERSION,
            "counts": self.counts.tolist(),
            "jumping_times": {
                f"{i + 1}-{j + 1}": [float(v) for v in times]
                for (i, j), times in sorted(self.jumping.items())
            },
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SemiMarkovModel":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"SMP file is not valid JSON: {exc}") from None
        if doc.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported SMP file version {doc.get('version')!r}")
        jumping = {}
        for key, times in doc["jumping_times"].items():
            a, b = key.split("-")
            jumping[(int(a) - 1, int(b) - 1)] = times
        return cls(np.array(doc["counts"], dtype=np.int64), jumping)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SemiMarkovModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def sojourn_cdf(model: SemiMarkovModel, state, t: float) -> float:
    """Sojourn distribution of ``state``: the p-weighted mix of empirical jumping-time CDFs."""
    i = _state_index(state)
    if i in model.matrix.dead_states:
        raise DataError(f"state {ProductionState(i + 1).label} has no outgoing transitions")
    if t < 0:
        raise DataError(f"time must be non-negative, got {t}")
    total = 0.0
    for j in range(N_STATES):
        pij = model.p[i, j]
        if pij == 0.0:
            continue
        times = model.jumping[(i, j)]
        total += pij * np.searchsorted(times, t, side="right") / times.size
    return float(total)


def pick_categorical(cum: np.ndarray, u: float) -> int:
    j = int(np.searchsorted(cum, u, side="right"))
    # u can land past a final cumulative sum a hair below 1
    if j >= cum.size:
        j = int(np.flatnonzero(np.diff(cum, prepend=0.0) > 0)[-1])
    return j


def sample_next_state(model: SemiMarkovModel, state, rng: np.random.Generator) -> ProductionState:
    i = _state_index(state)
    row = model.p[i]
    if not row.any():
        raise DataError(f"dead state {ProductionState(i + 1).label}: no outgoing transitions")
    return ProductionState(pick_categorical(np.cumsum(row), rng.random()) + 1)


def sample_jumping_time(model: SemiMarkovModel, src, dst, rng: np.random.Generator) -> float:
    """Bootstrap draw from the observed jumping times of ``src -> dst``."""
    i, j = _state_index(src), _state_index(dst)
    times = model.jumping.get((i, j))
    if times is None or times.size == 0:
        raise DataError(
            f"no jumping times for {ProductionState(i + 1).label} -> {ProductionState(j + 1).label}")
    return float(times[rng.integers(times.size)])


def simulate_chain(p: np.ndarray, n_jumps: int, rng: np.random.Generator, start: int = 0) -> np.ndarray:
    """State index sequence of length ``n_jumps + 1`` from the embedded chain."""
    p = np.asarray(p, dtype=float)
    cum = np.cumsum(p, axis=1)
    u = rng.random(n_jumps)
    seq = np.empty(n_jumps + 1, dtype=np.int64)
    seq[0] = start
    for k in range(n_jumps):
        row = p[seq[k]]
        if not row.any():
            raise DataError(f"dead state {seq[k] + 1} reached after {k} jumps")
        seq[k + 1] = pick_categorical(cum[seq[k]], u[k])
    return seq


def sequence_counts(seq, n_states: int = N_STATES) -> np.ndarray:
    """Transition counts of a 0-based state index sequence."""
    seq = np.asarray(seq, dtype=np.int64)
    counts = np.zeros((n_states, n_states), dtype=np.int64)
    np.add.at(counts, (seq[:-1], seq[1:]), 1)
    return counts


def embedded_stationary(matrix, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary vector of the embedded chain by power iteration.

    Iterates the lazy chain ``(I + P) / 2`` (same fixed point, no periodic
    oscillation) starting from uniform mass on the states that carry any
    transition, until the L1 change drops below ``tol``.
    """
    p = np.asarray(matrix.p if isinstance(matrix, TransitionMatrix) else matrix, dtype=float)
    n = p.shape[0]
    support = p.any(axis=1) | p.any(axis=0)
    if not support.any():
        raise DataError("transition matrix has no mass")
    rows = p.sum(axis=1)
    if np.any(np.abs(rows[support] - 1.0) > 1e-9):
        bad = int(np.flatnonzero(support & (np.abs(rows - 1.0) > 1e-9))[0])
        raise DataError(f"state {bad + 1} is on the support but its row does not sum to 1")
    lazy = 0.5 * (np.eye(n) + p)
    v = support / support.sum()
    for _ in range(max_iter):
        nxt = v @ lazy
        nxt /= nxt.sum()
        if np.abs(nxt - v).sum() < tol:
            return nxt
        v = nxt
    raise NumericalError(f"power iteration did not converge in {max_iter} iterations")
