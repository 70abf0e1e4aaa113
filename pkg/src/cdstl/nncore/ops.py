from __future__ import annotations

import numpy as np
import torch

from cdstl.errors import DataError, DimensionError, UsageError
from cdstl.nncore.model import DTYPE, Model, as_tensor, run_layers


def forward(model: Model, batch, params=None) -> torch.Tensor:
    """Logits ``[B, K]`` for a ``[B, C, H, W]`` batch."""
    x = as_tensor(batch)
    if x.dim() != 4:
        raise DimensionError(f"input: expected a [B,C,H,W] batch, got shape {list(x.shape)}")
    return run_layers(model, x, params)


def embed(model: Model, batch, params=None) -> torch.Tensor:
    """Activations feeding the final dense layer, ``[B, F]``."""
    x = as_tensor(batch)
    if x.dim() != 4:
        raise DimensionError(f"input: expected a [B,C,H,W] batch, got shape {list(x.shape)}")
    return run_layers(model, x, params, stop_before_head=True)


def _check_labels(labels, k: int) -> torch.Tensor:
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64).reshape(-1)
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{int(y.min())}, {int(y.max())}]")
    return y


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))


def per_sample_cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    if logits.dim() != 2:
        raise DimensionError(f"cross_entropy: logits must be [B,K], got {list(logits.shape)}")
    y = _check_labels(labels, logits.shape[1])
    if y.numel() != logits.shape[0]:
        raise DimensionError(f"cross_entropy: {logits.shape[0]} logits rows vs {y.numel()} labels")
    return -log_softmax(logits).gather(1, y[:, None]).squeeze(1)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-softmax of the true class (max-shifted)."""
    return per_sample_cross_entropy(logits, labels).mean()


def backward(scalar: torch.Tensor) -> None:
    if not isinstance(scalar, torch.Tensor) or scalar.dim() != 0:
        raise UsageError("backward() needs a 0-dim tensor")
    if not scalar.requires_grad:
        raise UsageError("backward() on a tensor that is not on a recorded graph")
    scalar.backward()


@torch.no_grad()
def sgd_step(model: Model, lr: float) -> None:
    """theta <- theta - lr * grad, in place. Gradients are left as they are."""
    if lr < 0:
        raise UsageError(f"learning rate must be non-negative, got {lr}")
    for name, p in model.params.items():
        if p.grad is None:
            raise UsageError(f"sgd_step: parameter {name!r} has no gradient; call backward first")
    for p in model.params.values():
        p.sub_(lr * p.grad)


def flatten_params(model_or_params) -> torch.Tensor:
    params = model_or_params.params if isinstance(model_or_params, Model) else model_or_params
    return torch.cat([p.reshape(-1) for p in params.values()])


def unflatten_params(model: Model, flat: torch.Tensor) -> dict[str, torch.Tensor]:
    """Split a flat vector into tensors shaped like ``model.params`` (graph-preserving)."""
    if flat.dim() != 1 or flat.numel() != model.num_parameters():
        raise DimensionError(f"flat vector has {flat.numel()} entries, model needs {model.num_parameters()}")
    out, offset = {}, 0
    for name, p in model.params.items():
        n = p.numel()
        out[name] = flat[offset : offset + n].reshape(p.shape)
        offset += n
    return out


@torch.no_grad()
def load_flat_(model: Model, flat: torch.Tensor) -> Model:
    for name, t in unflatten_params(model, flat.detach()).items():
        model.params[name].copy_(t)
    return model


def predict_labels(model: Model, batch, chunk: int = 512) -> np.ndarray:
    x = as_tensor(batch)
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], chunk):
            out.append(forward(model, x[i : i + chunk]).argmax(dim=1))
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def zeros_like_params(model: Model) -> dict[str, torch.Tensor]:
    return {k: torch.zeros_like(v, dtype=DTYPE) for k, v in model.params.items()}
