"""Float64 tensor core: architectures, losses, SGD, checkpoints, seeded RNG.

Tensors are ``torch.float64`` tensors; reverse-mode differentiation is
torch autograd. Everything else (architectures, parameter layout, RNG,
checkpoint format) is defined here.
"""

import torch

from cdstl.nncore.checkpoint import load_model, model_hash, parse_model, save_model, checkpoint_bytes
from cdstl.nncore.model import DTYPE, Arch, Model, as_tensor, build_model, layer_spec
from cdstl.nncore.ops import (
    backward,
    cross_entropy,
    embed,
    flatten_params,
    forward,
    load_flat_,
    per_sample_cross_entropy,
    predict_labels,
    sgd_step,
    unflatten_params,
)
from cdstl.nncore.rng import Rng, derive_seed
from cdstl.nncore.train import train_sgd


def use_single_thread() -> None:
    """Pin torch to one intra-op thread so reductions are order-stable."""
    torch.set_num_threads(1)


__all__ = [
    "DTYPE",
    "Arch",
    "Model",
    "Rng",
    "as_tensor",
    "backward",
    "build_model",
    "checkpoint_bytes",
    "cross_entropy",
    "derive_seed",
    "embed",
    "flatten_params",
    "forward",
    "layer_spec",
    "load_flat_",
    "load_model",
    "model_hash",
    "parse_model",
    "per_sample_cross_entropy",
    "predict_labels",
    "save_model",
    "sgd_step",
    "train_sgd",
    "unflatten_params",
    "use_single_thread",
]
