"""VAE, conditional VAE and GAN models for state-dependent traffic.

Models work on log-rescaled, min-max normalized data in ``[0, 1]^d`` where
``d`` is 1 (interarrival time only) or 2 (interarrival time and packet
size). Every network uses the hidden widths ``(32, 64, 32, 16, 32)`` with
relu hidden units.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    N_STATES,
    PAYLOAD_QUANTUM,
    DataError,
    NormalizationSpec,
    NumericalError,
    ProductionState,
    TrafficSample,
    denormalize,
    fit_normalization,
    normalize,
)
from .neural import (
    HIDDEN_WIDTHS,
    Adam,
    DenseNetwork,
    backward,
    bce_loss,
    forward,
    gaussian_kl_loss,
    network_finite_difference,
    relative_error,
    relu_pattern,
)

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
LATENT_DIMS = {1: 2, 2: 4}
KINDS = ("vae", "cvae", "gan")


class ModelFileError(DataError):
    """Model file is truncated or not a model document."""


class ModelVersionError(ModelFileError):
    pass


class ModelKindError(ModelFileError):
    pass


@dataclass
class TrainConfig:
    """Mini-batch training settings: batch 32, 500 epochs, Adam at 1e-3 and
    a 70/30 split. ``kl_weight`` defaults below 1: at full weight the KL term
    swamps a single-value BCE and the VAE collapses to the data mean."""

    batch_size: int = 32
    epochs: int = 500
    learning_rate: float = 1e-3
    train_ratio: float = 0.7
    seed: int = 0
    kl_weight: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate <= 0 or self.kl_weight < 0:
            raise DataError("batch_size, epochs and learning_rate must be positive, kl_weight >= 0")
        if not 0.0 < self.train_ratio < 1.0:
            raise DataError(f"train_ratio must lie in (0, 1), got {self.train_ratio}")


def latent_dim_for(data_dim: int) -> int:
    try:
        return LATENT_DIMS[data_dim]
    except KeyError:
        raise DataError(f"data dimension must be 1 or 2, got {data_dim}") from None


def _mlp(n_in: int, n_out: int, out_act: str, rng) -> DenseNetwork:
    sizes = (n_in,) + HIDDEN_WIDTHS + (n_out,)
    return DenseNetwork(sizes, ("relu",) * len(HIDDEN_WIDTHS) + (out_act,), rng)


@dataclass
class VaeModel:
    encoder: DenseNetwork
    decoder: DenseNetwork
    data_dim: int
    latent_dim: int
    norm: NormalizationSpec | None = None
    state: ProductionState | None = None

    kind = "vae"
    condition_dim = 0

    @classmethod
    def create(cls, data_dim: int, rng: np.random.Generator, norm=None, state=None):
        latent = latent_dim_for(data_dim)
        c = cls.condition_dim
        enc = _mlp(data_dim + c, 2 * latent, "linear", rng)
        dec = _mlp(latent + c, data_dim, "sigmoid", rng)
        return cls(enc, dec, data_dim, latent, norm, state)

    @property
    def networks(self) -> dict[str, DenseNetwork]:
        return {"encoder": self.encoder, "decoder": self.decoder}


@dataclass
class CvaeModel(VaeModel):
    kind = "cvae"
    condition_dim = N_STATES


@dataclass
class GanModel:
    generator: DenseNetwork
    discriminator: DenseNetwork
    data_dim: int
    latent_dim: int
    norm: NormalizationSpec | None = None
    state: ProductionState | None = None

    kind = "gan"

    @classmethod
    def create(cls, data_dim: int, rng: np.random.Generator, norm=None, state=None):
        latent = latent_dim_for(data_dim)
        gen = _mlp(latent, data_dim, "sigmoid", rng)
        disc = _mlp(data_dim, 1, "sigmoid", rng)
        return cls(gen, disc, data_dim, latent, norm, state)

    @property
    def networks(self) -> dict[str, DenseNetwork]:
        return {"generator": self.generator, "discriminator": self.discriminator}


GenerativeModel = VaeModel | CvaeModel | GanModel


def reparameterize(mu, logvar, rng: np.random.Generator) -> np.ndarray:
    """``mu + exp(logvar / 2) * eps`` with standard normal ``eps``."""
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    if mu.shape != logvar.shape:
        raise ValueError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
    return mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)


def one_hot_states(states: Sequence) -> np.ndarray:
    codes = np.array([int(ProductionState.parse(s)) for s in states], dtype=np.int64)
    out = np.zeros((codes.size, N_STATES))
    out[np.arange(codes.size), codes - 1] = 1.0
    return out


def _check_one_hot(cond: np.ndarray, n: int) -> None:
    if cond.shape != (n, N_STATES):
        raise DataError(f"conditions must have shape ({n}, {N_STATES}), got {cond.shape}")
    if not (np.all((cond == 0.0) | (cond == 1.0)) and np.all(cond.sum(axis=1) == 1.0)):
        raise DataError("conditions must be valid one-hot vectors")


def _check_data(data, cfg: TrainConfig | None = None) -> np.ndarray:
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[1] not in (1, 2):
        raise DataError(f"data must be 1- or 2-dimensional, got {x.shape[1]} dims")
    if not np.all((x >= 0.0) & (x <= 1.0)):
        raise DataError("training data must be normalized into [0, 1]")
    if cfg is not None and x.shape[0] < cfg.batch_size:
        raise DataError(f"need at least batch_size={cfg.batch_size} samples, got {x.shape[0]}")
    return x


def vae_loss_and_grads(model: VaeModel, x: np.ndarray, eps: np.ndarray, cond: np.ndarray | None = None,
                       kl_weight: float = 1.0) -> tuple[float, np.ndarray, np.ndarray]:
    """Objective ``BCE(x', x) + kl_weight * KL`` for one batch and its gradients.

    ``eps`` is the reparameterization noise, passed in so that the objective
    is a deterministic function of the parameters.
    Returns ``(loss, encoder_grads, decoder_grads)``.
    """
    latent = model.latent_dim
    enc_in = x if cond is None else np.hstack([x, cond])
    enc_cache = forward(model.encoder, enc_in)
    out = enc_cache.output
    mu, logvar = out[:, :latent], out[:, latent:]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    dec_in = z if cond is None else np.hstack([z, cond])
    dec_cache = forward(model.decoder, dec_in)
    recon, g_recon = bce_loss(dec_cache.output, x)
    kl, g_mu, g_logvar = gaussian_kl_loss(mu, logvar)
    dec_grads, g_in = backward(model.decoder, dec_cache, g_recon)
    g_z = g_in[:, :latent]
    g_out = np.hstack([g_z + kl_weight * g_mu, g_z * eps * 0.5 * std + kl_weight * g_logvar])
    enc_grads, _ = backward(model.encoder, enc_cache, g_out)
    return float(recon + kl_weight * kl), enc_grads, dec_grads


def vae_grad_check(model: VaeModel, x: np.ndarray, eps: np.ndarray, cond: np.ndarray | None = None,
                   kl_weight: float = 1.0, h: float = 1e-5) -> float:
    """Max relative error of :func:`vae_loss_and_grads` against central differences.

    Covers every encoder and decoder parameter, with the noise ``eps`` held
    fixed. The numeric side is evaluated in extended precision.
    """
    _, enc_grads, dec_grads = vae_loss_and_grads(model, x, eps, cond, kl_weight)
    latent = model.latent_dim
    ld = np.longdouble
    encoder, decoder = model.encoder.copy(ld), model.decoder.copy(ld)
    x_ld, eps_ld = np.asarray(x, dtype=ld), np.asarray(eps, dtype=ld)
    c_ld = None if cond is None else np.asarray(cond, dtype=ld)

    def latent_head(out):
        mu, logvar = out[:, :latent], out[:, latent:]
        z = mu + np.exp(0.5 * logvar) * eps_ld
        return z, gaussian_kl_loss(mu, logvar)[0]

    def decode(z, kl) -> tuple[float, bytes]:
        dec = forward(decoder, z if c_ld is None else np.hstack([z, c_ld]), dtype=ld)
        recon, _ = bce_loss(dec.output, x_ld)
        return recon + kl_weight * kl, relu_pattern(dec, decoder)

    enc_in = x_ld if c_ld is None else np.hstack([x_ld, c_ld])
    numeric_enc = network_finite_difference(encoder, enc_in, lambda out: decode(*latent_head(out)), h)
    z, kl = latent_head(forward(encoder, enc_in, dtype=ld).output)
    dec_in = z if c_ld is None else np.hstack([z, c_ld])
    numeric_dec = network_finite_difference(
        decoder, dec_in, lambda out: (bce_loss(out, x_ld)[0] + kl_weight * kl, b""), h)
    return float(max(relative_error(enc_grads, numeric_enc).max(),
                     relative_error(dec_grads, numeric_dec).max()))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _train_vae_like(model: VaeModel, x: np.ndarray, cond: np.ndarray | None, cfg: TrainConfig,
                    rng: np.random.Generator) -> np.ndarray:
    enc_opt = Adam(model.encoder, cfg.learning_rate)
    dec_opt = Adam(model.decoder, cfg.learning_rate)
    n = x.shape[0]
    history = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            eps = rng.standard_normal((idx.size, model.latent_dim))
            loss, g_enc, g_dec = vae_loss_and_grads(
                model, x[idx], eps, None if cond is None else cond[idx], cfg.kl_weight)
            if not np.isfinite(loss):
                raise NumericalError(f"{model.kind} loss became non-finite at epoch {epoch}")
            try:
                enc_opt.step(g_enc)
                dec_opt.step(g_dec)
            except NumericalError:
                raise NumericalError(f"{model.kind} gradient became non-finite at epoch {epoch}") from None
            total += loss * idx.size
        history[epoch] = total / n
        if epoch % 100 == 0:
            log.debug("%s epoch %d loss %.6f", model.kind, epoch, history[epoch])
    return history


def train_vae(data, cfg: TrainConfig, norm: NormalizationSpec | None = None,
              state: ProductionState | None = None) -> tuple[VaeModel, np.ndarray]:
    """Fit a VAE by mini-batch Adam; returns the model and per-epoch mean loss."""
    x = _check_data(data, cfg)
    rng = np.random.default_rng(cfg.seed)
    model = VaeModel.create(x.shape[1], rng, norm, state)
    return model, _train_vae_like(model, x, None, cfg, rng)


def train_cvae(data, conditions, cfg: TrainConfig,
               norm: NormalizationSpec | None = None) -> tuple[CvaeModel, np.ndarray]:
    """Fit one conditional VAE over all states.

    ``conditions`` is either an ``(n, 5)`` one-hot matrix or a sequence of
    production states.
    """
    x = _check_data(data, cfg)
    cond = np.asarray(conditions)
    if cond.ndim == 1:
        cond = one_hot_states(cond)
    cond = cond.astype(float)
    _check_one_hot(cond, x.shape[0])
    rng = np.random.default_rng(cfg.seed)
    model = CvaeModel.create(x.shape[1], rng, norm)
    return model, _train_vae_like(model, x, cond, cfg, rng)


def sample_vae(model: VaeModel, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 0:
        raise DataError(f"sample count must be non-negative, got {n}")
    if n == 0:
        return np.empty((0, model.data_dim))
    z = rng.standard_normal((n, model.latent_dim))
    return model.decoder(z)


def sample_cvae(model: CvaeModel, state, n: int, rng: np.random.Generator) -> np.ndarray:
    state = ProductionState.parse(state)
    if n < 0:
        raise DataError(f"sample count must be non-negative, got {n}")
    if n == 0:
        return np.empty((0, model.data_dim))
    z = rng.standard_normal((n, model.latent_dim))
    return model.decoder(np.hstack([z, np.tile(state.one_hot(), (n, 1))]))


def train_gan(data, cfg: TrainConfig, norm: NormalizationSpec | None = None,
              state: ProductionState | None = None) -> tuple[GanModel, np.ndarray, np.ndarray]:
    """Alternating GAN training: one discriminator step, then one generator step per batch.

    Returns the model and per-epoch mean generator and discriminator losses.
    """
    x = _check_data(data, cfg)
    rng = np.random.default_rng(cfg.seed)
    model = GanModel.create(x.shape[1], rng, norm, state)
    gen, disc = model.generator, model.discriminator
    g_opt = Adam(gen, cfg.learning_rate)
    d_opt = Adam(disc, cfg.learning_rate)
    n = x.shape[0]
    gen_hist = np.empty(cfg.epochs)
    disc_hist = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        g_total = d_total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            b = idx.size
            fake = gen(rng.standard_normal((b, model.latent_dim)))
            d_cache = forward(disc, np.vstack([x[idx], fake]))
            targets = np.concatenate([np.ones((b, 1)), np.zeros((b, 1))])
            d_loss, g_out = bce_loss(d_cache.output, targets)
            d_grads, _ = backward(disc, d_cache, g_out)

            z = rng.standard_normal((b, model.latent_dim))
            g_cache = forward(gen, z)
            d_cache = forward(disc, g_cache.output)
            g_loss, g_out = bce_loss(d_cache.output, np.ones((b, 1)))
            if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
                raise NumericalError(f"gan loss became non-finite at epoch {epoch}")
            _, g_fake = backward(disc, d_cache, g_out)
            g_grads, _ = backward(gen, g_cache, g_fake)
            try:
                d_opt.step(d_grads)
                g_opt.step(g_grads)
            except NumericalError:
                raise NumericalError(f"gan gradient became non-finite at epoch {epoch}") from None
            g_total += float(g_loss) * b
            d_total += float(d_loss) * b
        gen_hist[epoch] = g_total / n
        disc_hist[epoch] = d_total / n
    return model, gen_hist, disc_hist


def sample_gan(model: GanModel, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 0:
        raise DataError(f"sample count must be non-negative, got {n}")
    if n == 0:
        return np.empty((0, model.data_dim))
    return model.generator(rng.standard_normal((n, model.latent_dim)))


# feature preparation ------------------------------------------------------

def sample_features(samples: Sequence[TrafficSample], data_dim: int) -> np.ndarray:
    """Raw feature rows: interarrival ms, plus packet bytes when ``data_dim`` is 2.

    Zero-byte packets have no log, so 2-dim features skip them.
    """
    if data_dim == 1:
        return np.array([[s.interarrival_ms] for s in samples], dtype=float).reshape(-1, 1)
    if data_dim != 2:
        raise DataError(f"data dimension must be 1 or 2, got {data_dim}")
    rows = [[s.interarrival_ms, float(s.size_bytes)] for s in samples if s.size_bytes > 0]
    skipped = len(samples) - len(rows)
    if skipped:
        log.warning("skipping %d zero-byte samples in 2-dim features", skipped)
    return np.array(rows, dtype=float).reshape(-1, 2)


def decode_features(norm: NormalizationSpec, u: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Map normalized model output back to ``(interarrival_ms, size_bytes or None)``."""
    raw = denormalize(norm, np.clip(u, 0.0, 1.0))
    if norm.dim == 1:
        return raw[:, 0], None
    sizes = (np.ceil(raw[:, 1] / PAYLOAD_QUANTUM) * PAYLOAD_QUANTUM).astype(np.int64)
    return raw[:, 0], sizes


@dataclass
class FitResult:
    model: GenerativeModel
    history: np.ndarray
    """Per-epoch loss; for GANs two columns (generator, discriminator)."""


def fit_model(kind: str, samples: Sequence[TrafficSample], data_dim: int, cfg: TrainConfig,
              state: ProductionState | None = None) -> FitResult:
    """Normalize training samples and fit one model.

    For ``vae`` and ``gan`` a ``state`` restricts training to that state's
    samples. ``cvae`` always trains on every state at once.
    """
    if kind not in KINDS:
        raise DataError(f"unknown model kind {kind!r}")
    if kind != "cvae" and state is not None:
        samples = [s for s in samples if s.state == state]
    if kind == "cvae":
        samples = [s for s in samples if data_dim == 1 or s.size_bytes > 0]
    feats = sample_features(samples, data_dim)
    if feats.shape[0] < max(2, cfg.batch_size):
        label = state.label if state is not None else "all states"
        raise DataError(f"too few samples for {kind} ({label}): {feats.shape[0]}")
    norm = fit_normalization(feats)
    x = normalize(norm, feats)
    if kind == "vae":
        model, hist = train_vae(x, cfg, norm, state)
    elif kind == "cvae":
        model, hist = train_cvae(x, [s.state for s in samples], cfg, norm)
    else:
        model, g_hist, d_hist = train_gan(x, cfg, norm, state)
        hist = np.column_stack([g_hist, d_hist])
    return FitResult(model, hist)


# sampling facade ----------------------------------------------------------

@dataclass
class TrafficSampler:
    """Draws per-state traffic from trained models.

    Holds either a single CVAE or a mapping of state to per-state VAE/GAN.
    In 1-dim mode packet sizes are bootstrapped from ``size_pool``.
    """

    models: dict[ProductionState, GenerativeModel] = field(default_factory=dict)
    cvae: CvaeModel | None = None
    size_pool: dict[ProductionState, np.ndarray] = field(default_factory=dict)

    @property
    def data_dim(self) -> int:
        if self.cvae is not None:
            return self.cvae.data_dim
        dims = {m.data_dim for m in self.models.values()}
        if len(dims) != 1:
            raise DataError("per-state models mix 1-dim and 2-dim data")
        return dims.pop()

    def covers(self, state: ProductionState) -> bool:
        return self.cvae is not None or state in self.models

    def normalized(self, state, n: int, rng: np.random.Generator) -> np.ndarray:
        state = ProductionState.parse(state)
        if self.cvae is not None:
            return sample_cvae(self.cvae, state, n, rng)
        model = self.models.get(state)
        if model is None:
            raise DataError(f"no generative model for state {state.label}")
        if model.kind == "gan":
            return sample_gan(model, n, rng)
        return sample_vae(model, n, rng)

    def interarrivals(self, state, n: int, rng: np.random.Generator) -> np.ndarray:
        t, _ = self.traffic(state, n, rng, with_sizes=False)
        return t

    def traffic(self, state, n: int, rng: np.random.Generator,
                with_sizes: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
        """``n`` interarrival times (ms) and, if requested, packet sizes (bytes)."""
        state = ProductionState.parse(state)
        u = self.normalized(state, n, rng)
        model = self.cvae if self.cvae is not None else self.models[state]
        if model.norm is None:
            raise DataError(f"{model.kind} model for {state.label} carries no normalization")
        t, sizes = decode_features(model.norm, u)
        if not with_sizes or sizes is not None:
            return t, sizes
        pool = self.size_pool.get(state)
        if pool is None or pool.size == 0:
            raise DataError(f"no packet sizes to bootstrap for state {state.label}")
        return t, pool[rng.integers(pool.size, size=n)]


# persistence --------------------------------------------------------------

def _net_doc(net: DenseNetwork) -> dict:
    return {
        "sizes": list(net.sizes),
        "activations": list(net.activations),
        "layers": [{"weights": w.tolist(), "bias": b.tolist()} for w, b in net.layers],
    }


def _net_from_doc(doc: dict) -> DenseNetwork:
    net = DenseNetwork(doc["sizes"], doc["activations"])
    if len(doc["layers"]) != len(net.layers):
        raise ModelFileError("layer count does not match network sizes")
    for (w, b), layer in zip(net.layers, doc["layers"]):
        w_new = np.array(layer["weights"], dtype=float)
        b_new = np.array(layer["bias"], dtype=float)
        if w_new.shape != w.shape or b_new.shape != b.shape:
            raise ModelFileError("layer parameter shape does not match network sizes")
        w[...] = w_new
        b[...] = b_new
    return net


def model_to_json(model: GenerativeModel) -> str:
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "data_dim": model.data_dim,
        "latent_dim": model.latent_dim,
        "state": None if model.state is None else model.state.label,
        "normalization": None if model.norm is None else model.norm.to_dict(),
        "networks": {name: _net_doc(net) for name, net in model.networks.items()},
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def model_from_json(text: str, kind: str | None = None) -> GenerativeModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"model file is truncated or malformed: {exc}") from None
    if not isinstance(doc, dict) or "version" not in doc:
        raise ModelFileError("model file has no version field")
    if doc["version"] != MODEL_FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model file version {doc['version']!r}")
    found = doc.get("kind")
    if found not in KINDS:
        raise ModelKindError(f"unknown model kind {found!r}")
    if kind is not None and found != kind:
        raise ModelKindError(f"expected a {kind} model, file holds {found}")
    try:
        nets = {name: _net_from_doc(d) for name, d in doc["networks"].items()}
        norm = None if doc["normalization"] is None else NormalizationSpec.from_dict(doc["normalization"])
        state = None if doc["state"] is None else ProductionState.parse(doc["state"])
        args = (int(doc["data_dim"]), int(doc["latent_dim"]), norm, state)
        if found == "gan":
            return GanModel(nets["generator"], nets["discriminator"], *args)
        cls = CvaeModel if found == "cvae" else VaeModel
        return cls(nets["encoder"], nets["decoder"], *args)
    except KeyError as exc:
        raise ModelFileError(f"model file lacks field {exc}") from None


def save_model(model: GenerativeModel, path) -> None:
    Path(path).write_text(model_to_json(model), encoding="utf-8")


def load_model(path, kind: str | None = None) -> GenerativeModel:
    return model_from_json(Path(path).read_text(encoding="utf-8"), kind)
