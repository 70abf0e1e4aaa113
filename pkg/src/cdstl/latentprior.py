"""Distillation in the latent space of a frozen decoder.

The decoder maps codes ``[M, d, h, w]`` (``h = H/8``) through a dense layer
and two stride-2 transposed convolutions to sigmoid images ``[M, C, H, W]``.
Any of the three matching losses is applied to the decoded images and the
gradient flows into the codes only.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator

from cdstl._validation import check_images_labels, check_positive
from cdstl.data import DistilledContainer, LabeledDataset
from cdstl.distill import DistillConfig, optimize, provenance_for, synthetic_labels
from cdstl.errors import ConfigError, DimensionError, NumericError
from cdstl.nncore import DTYPE, Arch, Model, Rng, as_tensor, derive_seed, model_hash
from cdstl.nncore.model import DECODER_WIDTH, run_layers
from cdstl.nncore.train import iterate_minibatches
from cdstl.pruning import CoreSet

DEFAULT_LATENT_CHANNELS = 16
DEFAULT_MIN_COMPRESSION = 4.0


def latent_shape(image_shape, latent_channels: int = DEFAULT_LATENT_CHANNELS) -> tuple[int, int, int]:
    c, h, w = image_shape
    if h != w or h % 8:
        raise DimensionError(f"decoder needs square images with side divisible by 8, got {h}x{w}")
    return latent_channels, h // 8, w // 8


def build_decoder(
    image_shape,
    seed: int = 0,
    latent_channels: int = DEFAULT_LATENT_CHANNELS,
    min_compression: float = DEFAULT_MIN_COMPRESSION,
    *,
    zero_bias: bool = True,
) -> Model:
    c, h, w = image_shape
    d, lh, lw = latent_shape(image_shape, latent_channels)
    code_size, pixels = d * lh * lw, c * h * w
    if not code_size < pixels or pixels / code_size < min_compression:
        raise ConfigError(
            f"latent {d}x{lh}x{lw} = {code_size} values gives {pixels / code_size:.2f}x compression, "
            f"need > 1 and >= {min_compression}"
        )
    rng = Rng(seed)
    ch = DECODER_WIDTH
    side = h // 4
    shapes = [
        ("fc.weight", (ch * side * side, code_size), code_size),
        ("fc.bias", (ch * side * side,), 0),
        ("up0.weight", (ch, ch // 2, 4, 4), ch * 4),
        ("up0.bias", (ch // 2,), 0),
        ("up1.weight", (ch // 2, c, 4, 4), (ch // 2) * 4),
        ("up1.bias", (c,), 0),
    ]
    params = {}
    for name, shape, fan_in in shapes:
        if fan_in:
            bound = math.sqrt(6.0 / fan_in)
            t = torch.from_numpy(rng.uniform(shape, -bound, bound))
        else:
            t = torch.zeros(shape, dtype=DTYPE)
        params[name] = t
    return Model(Arch.DECODER, params, None, (c, h, w), {"latent_shape": (d, lh, lw)})


def decoder_latent_shape(dec: Model) -> tuple[int, int, int]:
    if "latent_shape" in dec.meta:
        return tuple(dec.meta["latent_shape"])
    ch = dec.params["up0.weight"].shape[0]
    side = math.isqrt(dec.params["fc.weight"].shape[0] // ch)
    lh = (4 * side) // 8
    d = dec.params["fc.weight"].shape[1] // (lh * lh)
    return d, lh, lh


def freeze(dec: Model) -> Model:
    for p in dec.params.values():
        p.requires_grad_(False)
        p.grad = None
    return dec


def decode(dec: Model, codes) -> torch.Tensor:
    """Images in (0, 1); differentiable with respect to ``codes`` only."""
    z = as_tensor(codes)
    want = decoder_latent_shape(dec)
    if z.dim() != 4 or tuple(z.shape[1:]) != want:
        raise DimensionError(f"decoder expects codes [M, {want[0]}, {want[1]}, {want[2]}], got {list(z.shape)}")
    params = {k: v.detach() for k, v in dec.params.items()}
    return run_layers(dec, z, params)


def _encoder(image_shape, code_size, seed):
    pixels = int(np.prod(image_shape))
    bound = math.sqrt(6.0 / pixels)
    w = torch.from_numpy(Rng(seed).uniform((code_size, pixels), -bound, bound)).requires_grad_(True)
    b = torch.zeros(code_size, dtype=DTYPE, requires_grad=True)
    return w, b


def pretrain_decoder(
    ds: LabeledDataset,
    epochs: int = 10,
    lr: float = 0.5,
    seed: int = 0,
    batch_size: int = 64,
    latent_channels: int = DEFAULT_LATENT_CHANNELS,
    min_compression: float = DEFAULT_MIN_COMPRESSION,
) -> Model:
    """Autoencoder training (linear encoder, discarded afterwards); returns the frozen decoder.

    ``epochs=0`` returns the seeded random initialisation, the untrained
    "random" prior. Per-epoch reconstruction MSE is kept in
    ``decoder.meta["mse"]``.
    """
    if len(ds) == 0:
        raise ConfigError("cannot pretrain a decoder on an empty dataset")
    check_positive("epochs", epochs, integer=True, allow_zero=True)
    dec = build_decoder(ds.image_shape, derive_seed(seed, "decoder"), latent_channels, min_compression)
    shape = decoder_latent_shape(dec)
    enc_w, enc_b = _encoder(ds.image_shape, int(np.prod(shape)), derive_seed(seed, "encoder"))
    for p in dec.params.values():
        p.requires_grad_(True)
    x_all = as_tensor(ds.images)
    rng = Rng(derive_seed(seed, "decoder_batches"))
    batches = iterate_minibatches(len(ds), min(batch_size, len(ds)), rng)
    steps_per_epoch = math.ceil(len(ds) / min(batch_size, len(ds)))
    mse_log = []
    trainable = [enc_w, enc_b, *dec.params.values()]
    for epoch in range(epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            x = x_all[torch.as_tensor(next(batches))]
            z = (x.reshape(x.shape[0], -1) @ enc_w.T + enc_b).reshape(x.shape[0], *shape)
            loss = ((run_layers(dec, z) - x) ** 2).mean()
            if not torch.isfinite(loss):
                raise NumericError(f"decoder pretraining diverged in epoch {epoch}")
            grads = torch.autograd.grad(loss, trainable)
            with torch.no_grad():
                for p, g in zip(trainable, grads):
                    p.sub_(lr * g)
            total += loss.item()
        mse_log.append(total / steps_per_epoch)
    dec.meta["mse"] = mse_log
    dec.meta["encoder"] = (enc_w.detach(), enc_b.detach())
    return freeze(dec)


def reconstruction_mse(dec: Model, ds: LabeledDataset, encoder=None) -> float:
    """Reconstruction error using the pretraining encoder (or the one passed in)."""
    enc_w, enc_b = encoder if encoder is not None else dec.meta["encoder"]
    x = as_tensor(ds.images)
    with torch.no_grad():
        z = (x.reshape(x.shape[0], -1) @ enc_w.T + enc_b).reshape(x.shape[0], *decoder_latent_shape(dec))
        return float(((decode(dec, z) - x) ** 2).mean())


def init_codes(num_classes: int, ipc: int, dec: Model, seed: int) -> torch.Tensor:
    shape = (num_classes * ipc, *decoder_latent_shape(dec))
    z = Rng(derive_seed(seed, "init_codes")).normal(shape)
    return torch.tensor(z, dtype=DTYPE, requires_grad=True)


def render_container(latent: DistilledContainer, dec: Model) -> DistilledContainer:
    with torch.no_grad():
        images = decode(dec, latent.payload).numpy().copy()
    prov = dict(latent.provenance, rendered_from="latent")
    return DistilledContainer(images, latent.labels, latent.ipc, latent.num_classes, "pixel", prov)


def distill_latent_run(core: CoreSet, ds: LabeledDataset, cfg: DistillConfig, ipc: int, dec: Model, experts=None):
    """Optimise latent codes through the frozen decoder.

    Returns ``(latent_container, rendered_pixel_container)``.
    """
    freeze(dec)
    codes = init_codes(ds.num_classes, ipc, dec, cfg.seed)
    labels = synthetic_labels(ds.num_classes, ipc)
    history = optimize(codes, lambda z: decode(dec, z), labels, core, ds, cfg, lr=cfg.lr, clamp=False, experts=experts)
    prov = provenance_for(core, ds, cfg, ipc=ipc, init="normal", decoder_hash=model_hash(dec))
    latent = DistilledContainer(codes.detach().numpy().copy(), labels, ipc, ds.num_classes, "latent", prov)
    latent.history = history
    return latent, render_container(latent, dec)


class LatentDatasetDistiller(BaseEstimator):
    """``fit(X, y)`` pretrains (or randomly initialises) a decoder and distills latent codes."""

    def __init__(self, method="DM", ipc=1, iterations=200, syn_lr=None, batch_per_class=32, decoder_epochs=10, decoder=None, seed=0):
        self.method = method
        self.ipc = ipc
        self.iterations = iterations
        self.syn_lr = syn_lr
        self.batch_per_class = batch_per_class
        self.decoder_epochs = decoder_epochs
        self.decoder = decoder
        self.seed = seed

    def fit(self, X, y, num_classes=None):
        X, y = check_images_labels(X, y)
        k = int(num_classes if num_classes is not None else y.max() + 1)
        ds = LabeledDataset(X, y, k)
        self.decoder_ = self.decoder if self.decoder is not None else pretrain_decoder(ds, self.decoder_epochs, seed=self.seed)
        cfg = DistillConfig(
            method=self.method, iterations=self.iterations, syn_lr=self.syn_lr, batch_per_class=self.batch_per_class, seed=self.seed
        )
        self.latent_, self.container_ = distill_latent_run(CoreSet.full(ds), ds, cfg, self.ipc, self.decoder_)
        self.codes_ = self.latent_.payload
        self.X_syn_ = self.container_.payload
        self.y_syn_ = self.container_.labels
        return self

    def fit_resample(self, X, y):
        self.fit(X, y)
        return self.X_syn_, self.y_syn_
