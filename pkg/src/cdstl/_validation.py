"""Input checks shared by the estimators and the functional API."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from cdstl.errors import ConfigError


def check_images(X) -> np.ndarray:
    """Coerce to a finite float64 ``[N, C, H, W]`` array (``[N, H, W]`` gains a channel)."""
    if hasattr(X, "detach"):
        X = X.detach().cpu().numpy()
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=False)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [N, C, H, W], got {X.shape}")
    return X


def check_images_labels(X, y):
    X = check_images(X)
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be a 1-d integer array")
    check_consistent_length(X, y)
    return X, y.astype(np.int64)


def check_ratio(r) -> float:
    r = float(r)
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"r must be in (0, 1], got {r}")
    return r


def check_mode(mode) -> str:
    if mode not in ("easy", "hard"):
        raise ConfigError(f"mode must be 'easy' or 'hard', got {mode!r}")
    return mode


def check_positive(name, value, *, integer=False, allow_zero=False):
    ok = value >= 0 if allow_zero else value > 0
    if integer and int(value) != value:
        ok = False
    if not ok:
        kind = "integer" if integer else "number"
        bound = ">= 0" if allow_zero else "> 0"
        raise ConfigError(f"{name} must be a {kind} {bound}, got {value!r}")
    return int(value) if integer else float(value)
