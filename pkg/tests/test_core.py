import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prodtraffic.core import (
    N_STATES,
    DataError,
    LogRecord,
    NormalizationSpec,
    ProductionState,
    TrafficSample,
    denormalize,
    fit_normalization,
    normalize,
    quantize_payload,
)


def test_states_are_five_with_stable_codes():
    assert N_STATES == 5
    assert [s.value for s in ProductionState] == [1, 2, 3, 4, 5]
    assert [s.label for s in ProductionState] == ["Running", "Reentry", "Stopped", "Aborted", "Ended"]


@pytest.mark.parametrize("text,expected", [
    (3, ProductionState.STOPPED), ("3", ProductionState.STOPPED),
    ("Stopped", ProductionState.STOPPED), ("ABORTED", ProductionState.ABORTED), (" ended ", ProductionState.ENDED),
])
def test_parse_state(text, expected):
    assert ProductionState.parse(text) is expected


def test_parse_unknown_state():
    with pytest.raises(DataError, match="unknown production state"):
        ProductionState.parse("Idle")


def test_one_hot_running():
    assert ProductionState.RUNNING.one_hot().tolist() == [1, 0, 0, 0, 0]


@pytest.mark.parametrize("raw,expected", [(0, 0), (32, 32), (33, 64), (1, 32), (64, 64)])
def test_quantize_payload_examples(raw, expected):
    assert quantize_payload(raw) == expected


def test_quantize_negative():
    with pytest.raises(DataError):
        quantize_payload(-1)


@given(st.integers(min_value=0, max_value=10**9))
def test_quantize_properties(n):
    q = quantize_payload(n)
    assert q % 32 == 0
    assert 0 <= q - n < 32
    assert quantize_payload(q) == q
    assert quantize_payload(n + 1) >= q


def test_sample_validation():
    with pytest.raises(DataError):
        TrafficSample(0.0, 32, ProductionState.RUNNING)
    with pytest.raises(DataError):
        TrafficSample(1.0, 33, ProductionState.RUNNING)
    with pytest.raises(DataError):
        LogRecord(0.0, "a", "b", -1)
    assert TrafficSample(1.0, 0, ProductionState.RUNNING).size_bytes == 0


def test_fit_normalization_one_dim():
    spec = fit_normalization([1.0, math.e ** 2])
    assert spec.min_log == (0.0,)
    assert spec.max_log == pytest.approx((2.0,), abs=1e-15)


def test_fit_normalization_two_dim():
    spec = fit_normalization([(1.0, 32.0), (math.e, 64.0)])
    assert spec.min_log == pytest.approx((0.0, math.log(32)))
    assert spec.max_log == pytest.approx((1.0, math.log(64)))


def test_fit_normalization_degenerate_names_dimension():
    with pytest.raises(DataError, match="dimension 0"):
        fit_normalization([10.0, 10.0])
    with pytest.raises(DataError, match="dimension 1"):
        fit_normalization([(1.0, 5.0), (2.0, 5.0)])


def test_fit_normalization_rejects_bad_input():
    with pytest.raises(DataError):
        fit_normalization([1.0])
    with pytest.raises(DataError):
        fit_normalization([1.0, -2.0])


def test_normalize_examples():
    spec = NormalizationSpec((0.0,), (2.0,))
    out = normalize(spec, [1.0, math.e ** 2, math.e])
    assert out[:, 0] == pytest.approx([0.0, 1.0, 0.5])
    assert normalize(spec, [1e-3, 1e6])[:, 0].tolist() == [0.0, 1.0]
    with pytest.raises(DataError):
        normalize(spec, [0.0])


def test_denormalize_examples():
    spec = NormalizationSpec((0.0,), (2.0,))
    assert denormalize(spec, [0.0, 0.5])[:, 0] == pytest.approx([1.0, math.e])
    with pytest.raises(DataError):
        denormalize(spec, [1.5])


def test_spec_invariant_and_dict_round_trip():
    with pytest.raises(DataError):
        NormalizationSpec((1.0,), (1.0,))
    spec = NormalizationSpec((0.1, 3.0), (2.5, 6.0))
    assert NormalizationSpec.from_dict(spec.to_dict()) == spec


@given(st.floats(min_value=-5, max_value=5), st.floats(min_value=0.01, max_value=10), st.floats(0, 1))
def test_round_trip_property(lo, width, frac):
    spec = NormalizationSpec((lo,), (lo + width,))
    x = math.exp(lo + frac * width)
    back = denormalize(spec, normalize(spec, [x]))[0, 0]
    assert abs(back - x) / x < 1e-9


def test_two_dim_round_trip():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.lognormal(3, 2, 100), rng.choice([32, 64, 512], 100)])
    spec = fit_normalization(x)
    assert np.allclose(denormalize(spec, normalize(spec, x)), x, rtol=1e-9)
