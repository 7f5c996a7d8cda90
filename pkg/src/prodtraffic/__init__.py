"""State-aware synthesis of industrial network traffic.

A semi-Markov model of the machine's production states drives per-state
generative models (VAE, conditional VAE, GAN) of packet interarrival times
and sizes.
"""

__version__ = "0.1.0"

from .core import (
    N_STATES,
    PAYLOAD_QUANTUM,
    STATES,
    DataError,
    LogRecord,
    NormalizationSpec,
    NumericalError,
    ProductionState,
    TrafficSample,
    denormalize,
    fit_normalization,
    normalize,
    quantize_payload,
)
from .evaluation import (
    LogHistogram,
    build_histogram,
    compare_models,
    default_spec,
    generate_synthetic_dataset,
    kl_divergence,
)
from .generative import (
    CvaeModel,
    GanModel,
    TrafficSampler,
    TrainConfig,
    VaeModel,
    fit_model,
    load_model,
    save_model,
)
from .ingest import AnnotatedTrace, annotate_states, extract_samples, load_state_map, parse_log, split_dataset
from .smp import SemiMarkovModel, embedded_stationary, estimate_transition_matrix
from .traffic import SyntheticTrace, exponential_baseline, export_trace, generate_trace

__all__ = [
    "N_STATES", "PAYLOAD_QUANTUM", "STATES", "DataError", "LogRecord", "NormalizationSpec",
    "NumericalError", "ProductionState", "TrafficSample", "denormalize", "fit_normalization",
    "normalize", "quantize_payload", "LogHistogram", "build_histogram", "compare_models",
    "default_spec", "generate_synthetic_dataset", "kl_divergence", "CvaeModel", "GanModel",
    "TrafficSampler", "TrainConfig", "VaeModel", "fit_model", "load_model", "save_model",
    "AnnotatedTrace", "annotate_states", "extract_samples", "load_state_map", "parse_log", "split_dataset",
    "SemiMarkovModel", "embedded_stationary", "estimate_transition_matrix", "SyntheticTrace",
    "exponential_baseline", "export_trace", "generate_trace",
]
