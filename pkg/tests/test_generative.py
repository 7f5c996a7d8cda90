import json

import numpy as np
import pytest

from prodtraffic import generative
from prodtraffic.core import DataError, NumericalError, ProductionState, TrafficSample, quantize_payload
from prodtraffic.evaluation import state_kl
from prodtraffic.generative import (
    CvaeModel,
    GanModel,
    ModelFileError,
    ModelKindError,
    ModelVersionError,
    TrafficSampler,
    TrainConfig,
    VaeModel,
    fit_model,
    load_model,
    model_from_json,
    model_to_json,
    reparameterize,
    sample_cvae,
    sample_gan,
    sample_vae,
    save_model,
    train_cvae,
    train_gan,
    train_vae,
)

STATES = list(ProductionState)


def test_reparameterize_limit_and_moments():
    rng = np.random.default_rng(0)
    z = reparameterize(np.full((4, 2), 0.3), np.full((4, 2), -80.0), rng)
    assert np.allclose(z, 0.3, atol=1e-12)
    z = reparameterize(np.full((200_000, 1), 1.0), np.full((200_000, 1), np.log(4.0)), rng)
    assert abs(z.mean() - 1.0) < 0.02
    assert abs(z.std() - 2.0) < 0.02
    with pytest.raises(ValueError):
        reparameterize(np.zeros(2), np.zeros(3), rng)


def test_model_shapes_follow_latent_convention():
    rng = np.random.default_rng(0)
    vae = VaeModel.create(1, rng)
    assert vae.latent_dim == 2 and vae.encoder.sizes == (1, 32, 64, 32, 16, 32, 4)
    cvae = CvaeModel.create(2, rng)
    assert cvae.latent_dim == 4 and cvae.encoder.in_dim == 7 and cvae.decoder.in_dim == 9
    gan = GanModel.create(2, rng)
    assert gan.generator.in_dim == 4 and gan.discriminator.out_dim == 1


def test_constant_vae_oracle():
    x = np.full((64, 1), 0.5)
    model, hist = train_vae(x, TrainConfig(epochs=200))
    recon = model.decoder(model.encoder(x)[:, :model.latent_dim])
    assert np.abs(recon - 0.5).max() < 1e-3
    assert abs(sample_vae(model, 1000, np.random.default_rng(1)).mean() - 0.5) < 0.01
    assert hist[-1] < hist[0]


def test_constant_gan_oracle():
    x = np.full((256, 1), 0.5)
    model, g_hist, d_hist = train_gan(x, TrainConfig())
    out = sample_gan(model, 1000, np.random.default_rng(2))
    assert abs(out.mean() - 0.5) < 0.15
    assert g_hist.shape == d_hist.shape == (500,)


def test_cvae_separable_states():
    targets = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
    states = np.repeat(STATES, 64)
    x = np.repeat(targets, 64).reshape(-1, 1)
    model, _ = train_cvae(x, states, TrainConfig(epochs=100))
    means = np.array([sample_cvae(model, st, 500, np.random.default_rng(3)).mean() for st in STATES])
    assert np.abs(means - targets).max() < 0.05
    assert np.all(np.diff(means) > 0)


def test_cvae_condition_validation():
    x = np.full((40, 1), 0.5)
    bad = np.zeros((40, 5))
    bad[:, 0] = 0.5
    with pytest.raises(DataError, match="one-hot"):
        train_cvae(x, bad, TrainConfig(epochs=1))
    with pytest.raises(DataError, match="shape"):
        train_cvae(x, np.eye(5)[:3], TrainConfig(epochs=1))


def test_training_input_validation():
    with pytest.raises(DataError, match="normalized"):
        train_vae(np.full((40, 1), 2.0), TrainConfig(epochs=1))
    with pytest.raises(DataError, match="batch_size"):
        train_vae(np.full((10, 1), 0.5), TrainConfig(epochs=1))
    with pytest.raises(DataError):
        TrainConfig(epochs=0)


def test_empty_and_negative_sample_requests():
    rng = np.random.default_rng(0)
    vae, cvae, gan = VaeModel.create(1, rng), CvaeModel.create(2, rng), GanModel.create(1, rng)
    assert sample_vae(vae, 0, rng).shape == (0, 1)
    assert sample_cvae(cvae, "Stopped", 0, rng).shape == (0, 2)
    assert sample_gan(gan, 0, rng).shape == (0, 1)
    with pytest.raises(DataError):
        sample_vae(vae, -1, rng)


def test_persistence_round_trip(tmp_path):
    samples = [TrafficSample(float(t), 64, ProductionState.STOPPED)
               for t in np.random.default_rng(0).lognormal(2, 1, 80)]
    for kind in ("vae", "cvae", "gan"):
        model = fit_model(kind, samples, 1, TrainConfig(epochs=2)).model
        a, b = tmp_path / f"{kind}.json", tmp_path / f"{kind}-again.json"
        save_model(model, a)
        loaded = load_model(a, kind)
        save_model(loaded, b)
        assert a.read_bytes() == b.read_bytes()
        draw = {"vae": sample_vae, "cvae": lambda m, n, r: sample_cvae(m, "Stopped", n, r), "gan": sample_gan}[kind]
        assert np.array_equal(draw(model, 50, np.random.default_rng(4)), draw(loaded, 50, np.random.default_rng(4)))


def test_persistence_errors():
    text = model_to_json(VaeModel.create(1, np.random.default_rng(0)))
    doc = json.loads(text)
    doc["version"] = 99
    with pytest.raises(ModelVersionError):
        model_from_json(json.dumps(doc))
    with pytest.raises(ModelFileError, match="truncated"):
        model_from_json(text[: len(text) // 2])
    with pytest.raises(ModelKindError, match="expected a gan"):
        model_from_json(text, "gan")


def test_nan_loss_aborts_with_epoch(monkeypatch):
    real = generative.vae_loss_and_grads
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        loss, ge, gd = real(*args, **kwargs)
        return (np.nan if calls["n"] > 4 else loss), ge, gd

    monkeypatch.setattr(generative, "vae_loss_and_grads", flaky)
    with pytest.raises(NumericalError, match="epoch 2"):
        train_vae(np.full((64, 1), 0.5), TrainConfig(epochs=10))


def test_fit_model_needs_samples():
    few = [TrafficSample(1.0 + i, 32, ProductionState.ABORTED) for i in range(5)]
    with pytest.raises(DataError, match="too few samples"):
        fit_model("vae", few, 1, TrainConfig(), ProductionState.ABORTED)
    with pytest.raises(DataError, match="unknown model kind"):
        fit_model("flow", few, 1, TrainConfig())


def test_sampler_bootstraps_sizes_in_1d():
    rng = np.random.default_rng(0)
    samples = [TrafficSample(float(t), 32, ProductionState.RUNNING) for t in rng.lognormal(2, 1, 64)]
    model = fit_model("vae", samples, 1, TrainConfig(epochs=1), ProductionState.RUNNING).model
    sampler = TrafficSampler({ProductionState.RUNNING: model}, size_pool={ProductionState.RUNNING: np.array([32, 96])})
    t, sizes = sampler.traffic("Running", 100, rng)
    assert t.shape == (100,) and np.all(t > 0)
    assert set(sizes.tolist()) <= {32, 96}
    assert not sampler.covers(ProductionState.ENDED)
    with pytest.raises(DataError, match="no generative model"):
        sampler.traffic("Ended", 3, rng)


def test_loss_decreases_vae(mixture_vae):
    h = mixture_vae.history
    assert h[-50:].mean() < h[:50].mean()


def test_loss_decreases_cvae(five_state_cvae):
    h = five_state_cvae.history
    assert h[-50:].mean() < h[:50].mean()


def test_loss_decreases_gan_generator(mixture_gan):
    h = mixture_gan.history
    assert np.all(np.isfinite(h))
    assert h[-50:, 0].mean() < h[:50, 0].mean()


def test_factorization_one_dim_matches_joint():
    rng = np.random.default_rng(10)
    t = rng.lognormal(3.0, 1.0, 3000)
    sizes = [quantize_payload(int(v)) for v in rng.lognormal(5.0, 0.5, 3000)]
    samples = [TrafficSample(float(a), int(b), ProductionState.RUNNING) for a, b in zip(t, sizes)]
    cfg = TrainConfig(epochs=100)
    gen = np.random.default_rng(11)
    kl = {}
    for dim in (1, 2):
        model = fit_model("vae", samples, dim, cfg, ProductionState.RUNNING).model
        sampler = TrafficSampler({ProductionState.RUNNING: model})
        kl[dim] = state_kl(t, sampler.interarrivals("Running", 10_000, gen))
    assert abs(kl[1] - kl[2]) < 0.3
