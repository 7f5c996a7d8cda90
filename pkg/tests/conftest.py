import time
from dataclasses import dataclass

import numpy as np
import pytest

from prodtraffic.core import ProductionState, TrafficSample, fit_normalization, normalize
from prodtraffic.evaluation import default_mixtures, default_spec, generate_synthetic_dataset
from prodtraffic.generative import TrafficSampler, TrainConfig, fit_model, train_gan, train_vae
from prodtraffic.ingest import split_dataset

SUITE_START = time.perf_counter()
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def mixture_samples(n: int, seed: int) -> np.ndarray:
    """Interarrivals (ms) from the three-peak Running mixture of the default spec."""
    comps = default_mixtures()[ProductionState.RUNNING]
    rng = np.random.default_rng(seed)
    w = np.array([c.weight for c in comps])
    pick = rng.choice(len(comps), size=n, p=w / w.sum())
    mu = np.array([c.mu for c in comps])[pick]
    sigma = np.array([c.sigma for c in comps])[pick]
    return np.exp(mu + sigma * rng.standard_normal(n))


@dataclass
class MixtureRun:
    train: np.ndarray
    test: np.ndarray
    norm: object
    model: object
    history: np.ndarray
    seconds: float


@pytest.fixture(scope="session")
def mixture_split():
    t = mixture_samples(10_000, seed=1)
    samples = [TrafficSample(float(v), 64, ProductionState.RUNNING) for v in t]
    split = split_dataset(samples, 0.7, seed=0)
    train = np.array([s.interarrival_ms for s in split.train])
    test = np.array([s.interarrival_ms for s in split.test])
    return train, test


@pytest.fixture(scope="session")
def mixture_vae(mixture_split) -> MixtureRun:
    """VAE on the three-peak mixture with the full training protocol."""
    train, test = mixture_split
    norm = fit_normalization(train)
    t0 = time.perf_counter()
    model, hist = train_vae(normalize(norm, train), TrainConfig(), norm)
    return MixtureRun(train, test, norm, model, hist, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def mixture_gan(mixture_split) -> MixtureRun:
    train, test = mixture_split
    norm = fit_normalization(train)
    t0 = time.perf_counter()
    model, g_hist, d_hist = train_gan(normalize(norm, train), TrainConfig(), norm)
    return MixtureRun(train, test, norm, model, np.column_stack([g_hist, d_hist]), time.perf_counter() - t0)


@dataclass
class CvaeRun:
    dataset: object
    split: object
    sampler: TrafficSampler
    history: np.ndarray
    seconds: float


@pytest.fixture(scope="session")
def synthetic_dataset():
    return generate_synthetic_dataset(default_spec(), seed=0)


@pytest.fixture(scope="session")
def five_state_cvae(synthetic_dataset) -> CvaeRun:
    """One CVAE over the five-state synthetic dataset shaped like the measured machine."""
    split = split_dataset(synthetic_dataset.samples, 0.7, seed=0)
    t0 = time.perf_counter()
    fit = fit_model("cvae", split.train, 1, TrainConfig())
    seconds = time.perf_counter() - t0
    pools = {}
    for s in split.train:
        pools.setdefault(s.state, []).append(s.size_bytes)
    sampler = TrafficSampler(cvae=fit.model, size_pool={k: np.array(v) for k, v in pools.items()})
    return CvaeRun(synthetic_dataset, split, sampler, fit.history, seconds)
