import numpy as np
import pytest
import torch

from cdstl.data import make_shapes, stratified_holdout
from cdstl.distill import DistillConfig, distill_objective, dm_loss
from cdstl.errors import ConfigError, DataError, DimensionError
from cdstl.latentprior import (
    LatentDatasetDistiller,
    build_decoder,
    decode,
    decoder_latent_shape,
    distill_latent_run,
    init_codes,
    pretrain_decoder,
    reconstruction_mse,
    render_container,
)
from cdstl.nncore import build_model, derive_seed, load_model, model_hash, save_model
from cdstl.pruning import CoreSet

from gradchecks import decoder_code_check, decoder_dm_check, decoder_param_check


@pytest.fixture(scope="module")
def split():
    return stratified_holdout(make_shapes(17, 30, 16, 4), 0.25, 0)


def test_epochs_zero_is_seeded_init(split):
    train, _ = split
    a = pretrain_decoder(train, epochs=0, seed=5)
    b = pretrain_decoder(train, epochs=0, seed=5)
    assert model_hash(a) == model_hash(b)
    assert model_hash(a) == model_hash(build_decoder(train.image_shape, derive_seed(5, "decoder")))


def test_pretraining_lowers_heldout_mse(split):
    train, test = split
    before = reconstruction_mse(pretrain_decoder(train, epochs=0, seed=1), test)
    trained = pretrain_decoder(train, epochs=5, seed=1)
    assert reconstruction_mse(trained, test) < before
    assert trained.meta["mse"][-1] < trained.meta["mse"][0]


def test_pretraining_deterministic(split):
    train, _ = split
    assert model_hash(pretrain_decoder(train, 2, seed=3)) == model_hash(pretrain_decoder(train, 2, seed=3))


def test_zero_codes_give_half():
    dec = build_decoder((1, 16, 16), 0)
    out = decode(dec, torch.zeros(3, 16, 2, 2, dtype=torch.float64))
    assert out.shape == (3, 1, 16, 16)
    assert torch.all(out == 0.5)


def test_output_strictly_inside_unit_interval(rng):
    dec = build_decoder((1, 16, 16), 2)
    out = decode(dec, rng.normal(size=(4, 16, 2, 2)))
    assert torch.all(out > 0) and torch.all(out < 1)


def test_compression_enforced():
    with pytest.raises(ConfigError):
        build_decoder((1, 16, 16), 0, latent_channels=64)  # 64*2*2 = 256 = C*H*W, not strictly smaller
    with pytest.raises(ConfigError):
        build_decoder((1, 16, 16), 0, latent_channels=32)  # 2x < default 4x floor
    with pytest.raises(DimensionError):
        build_decoder((1, 12, 12), 0)


def test_decode_wrong_code_shape():
    with pytest.raises(DimensionError):
        decode(build_decoder((1, 16, 16), 0), torch.zeros(1, 8, 2, 2, dtype=torch.float64))


@pytest.mark.parametrize("seed", range(3))
def test_decoder_gradients(seed):
    assert decoder_code_check(seed) < 1e-3
    assert decoder_dm_check(seed) < 1e-3
    assert decoder_param_check(seed) < 1e-4


def test_checkpoint_infers_latent_shape(tmp_path):
    dec = build_decoder((1, 16, 16), 0)
    save_model(dec, tmp_path / "d.nnc")
    assert decoder_latent_shape(load_model(tmp_path / "d.nnc")) == (16, 2, 2)


def _cfg(**kw):
    base = dict(method="DM", iterations=20, batch_per_class=16, seed=0)
    base.update(kw)
    return DistillConfig(**base)


def test_iterations_zero_keeps_codes(split):
    train, _ = split
    dec = pretrain_decoder(train, 0, seed=0)
    latent, _ = distill_latent_run(CoreSet.full(train), train, _cfg(iterations=0, seed=4), 1, dec)
    assert np.array_equal(latent.payload, init_codes(4, 1, dec, 4).detach().numpy())


@pytest.mark.parametrize("method", ["DC", "DM", "MTT"])
def test_decoder_frozen_and_render_matches(method, split):
    train, _ = split
    dec = pretrain_decoder(train, 1, seed=0)
    before = model_hash(dec)
    cfg = _cfg(method=method, iterations=3, expert_total_steps=20, expert_interval=10, num_experts=1)
    latent, pixels = distill_latent_run(CoreSet.full(train), train, cfg, 1, dec)
    assert model_hash(dec) == before
    assert all(p.grad is None and not p.requires_grad for p in dec.params.values())
    assert latent.space == "latent" and latent.provenance["decoder_hash"] == before
    with torch.no_grad():
        assert np.array_equal(pixels.payload, decode(dec, latent.payload).numpy())
    assert np.array_equal(render_container(latent, dec).payload, pixels.payload)


def test_codes_receive_gradient(split):
    train, _ = split
    dec = pretrain_decoder(train, 0, seed=0)
    z = init_codes(4, 1, dec, 0)
    net = build_model("ConvNetS", (1, 16, 16), 4, seed=0)
    net.requires_grad_(False)
    real = {c: torch.from_numpy(train.images[train.class_indices(c)[:8]]) for c in range(4)}
    (g,) = torch.autograd.grad(dm_loss(decode(dec, z), np.arange(4), real, net), z)
    assert torch.count_nonzero(g) > 0


def test_latent_dm_descends(split):
    train, _ = split
    dec = pretrain_decoder(train, 3, seed=0)
    core = CoreSet.full(train)
    drops = []
    for seed in range(3):
        cfg = _cfg(iterations=40, seed=seed)
        z0 = init_codes(4, 1, dec, seed)
        with torch.no_grad():
            before = distill_objective(decode(dec, z0), np.arange(4), core, train, cfg)
        _, pixels = distill_latent_run(core, train, cfg, 1, dec)
        drops.append(before - distill_objective(pixels.payload, pixels.labels, core, train, cfg))
    assert min(drops) > 0


def test_latent_container_needs_decoder_hash(split):
    train, _ = split
    dec = pretrain_decoder(train, 0, seed=0)
    latent, _ = distill_latent_run(CoreSet.full(train), train, _cfg(iterations=0), 1, dec)
    latent.provenance.pop("decoder_hash")
    with pytest.raises(DataError):
        latent.validate()


def test_latent_estimator(split):
    train, _ = split
    est = LatentDatasetDistiller(ipc=1, iterations=2, decoder_epochs=0, seed=1)
    X, y = est.fit_resample(train.images, train.labels)
    assert X.shape == (4, 1, 16, 16) and est.codes_.shape == (4, 16, 2, 2)
