from __future__ import annotations

import math

import numpy as np
import torch

from cdstl.errors import NumericError
from cdstl.nncore.model import Model, as_tensor
from cdstl.nncore.ops import cross_entropy, forward, sgd_step
from cdstl.nncore.rng import Rng


def iterate_minibatches(n: int, batch_size: int, rng: Rng):
    """Endless stream of index batches, reshuffled every pass."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i : i + batch_size]


def train_sgd(
    model: Model,
    images,
    labels,
    *,
    epochs: int | None = None,
    steps: int | None = None,
    lr: float,
    batch_size: int,
    rng: Rng,
    on_step=None,
) -> list[float]:
    """Plain SGD on cross-entropy. Give either ``epochs`` or ``steps``.

    ``on_step(step, model)`` is called before the first update and after
    every update, so step 0 sees the initial parameters.
    """
    x = as_tensor(images)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    n = x.shape[0]
    batch_size = min(batch_size, n)
    if steps is None:
        steps = (epochs or 0) * math.ceil(n / batch_size)
    model.requires_grad_(True)
    history = []
    batches = iterate_minibatches(n, batch_size, rng)
    if on_step is not None:
        on_step(0, model)
    for step in range(1, steps + 1):
        idx = torch.as_tensor(next(batches))
        model.zero_grad()
        loss = cross_entropy(forward(model, x[idx]), y[idx])
        if not torch.isfinite(loss):
            raise NumericError(f"training loss became non-finite at step {step}")
        loss.backward()
        sgd_step(model, lr)
        history.append(loss.item())
        if on_step is not None:
            on_step(step, model)
    model.zero_grad()
    return history
