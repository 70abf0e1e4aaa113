"""Loss-value-based core-set selection.

A trained scorer assigns every training sample its cross-entropy loss. Within
each class the samples are sorted by loss and the first ``int(r * N_c)`` are
kept: lowest losses for ``mode="easy"``, highest for ``mode="hard"``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from cdstl._validation import check_images_labels, check_mode, check_ratio
from cdstl.data import LabeledDataset, dataset_hash
from cdstl.errors import ArtifactIOError, ConfigError, DataFormatError
from cdstl.nncore import Model, as_tensor, forward, model_hash, per_sample_cross_entropy

log = logging.getLogger(__name__)

MODES = ("easy", "hard")


@dataclass
class LossRanking:
    """Per-class ``(index, loss)`` lists sorted ascending, ties by index."""

    per_class: dict[int, list[tuple[int, float]]]
    scorer_id: str
    dataset_id: str = ""

    def losses(self) -> dict[int, float]:
        return {i: loss for pairs in self.per_class.values() for i, loss in pairs}

    def ordered(self, c: int, direction: str = "asc") -> list[tuple[int, float]]:
        """Class ``c`` sorted by loss in ``direction``; ties always by ascending index."""
        pairs = self.per_class[c]
        if direction == "asc":
            return list(pairs)
        if direction == "desc":
            return sorted(pairs, key=lambda p: (-p[1], p[0]))
        raise ConfigError(f"direction must be 'asc' or 'desc', got {direction!r}")


@dataclass
class CoreSet:
    kept: np.ndarray
    r: float
    mode: str
    dataset_id: str = ""
    scorer_id: str = ""
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=np.int64)
        if self.kept.size > 1 and np.any(np.diff(self.kept) <= 0):
            raise ValueError("core-set indices must be strictly increasing")

    def __len__(self):
        return int(self.kept.size)

    def view(self, ds: LabeledDataset) -> LabeledDataset:
        return ds.subset(self.kept, "train") if len(self) < len(ds) else ds

    def class_members(self, ds: LabeledDataset, c: int) -> np.ndarray:
        return self.kept[ds.labels[self.kept] == c]

    @classmethod
    def full(cls, ds: LabeledDataset, mode: str = "easy") -> "CoreSet":
        return cls(np.arange(len(ds)), 1.0, mode, dataset_hash(ds), "none")


def score_losses(ds: LabeledDataset, scorer: Model, chunk: int = 256) -> LossRanking:
    """Cross-entropy of every sample under ``scorer``, grouped by label.

    Samples go through the network one at a time; chunks are only a
    loop-vectorisation device and do not couple samples because every layer
    normalises per sample.
    """
    if scorer.num_classes != ds.num_classes:
        raise ConfigError(f"scorer predicts {scorer.num_classes} classes, dataset has {ds.num_classes}")
    x = as_tensor(ds.images)
    losses = np.empty(len(ds))
    with torch.no_grad():
        for i in range(0, len(ds), chunk):
            sl = slice(i, i + chunk)
            losses[sl] = per_sample_cross_entropy(forward(scorer, x[sl]), ds.labels[sl]).numpy()
    per_class = {}
    for c in range(ds.num_classes):
        idx = ds.class_indices(c)
        order = np.lexsort((idx, losses[idx]))
        per_class[c] = [(int(idx[j]), float(losses[idx[j]])) for j in order]
    return LossRanking(per_class, model_hash(scorer), dataset_hash(ds))


def keep_count(r: float, n_c: int) -> int:
    """``int(r * n_c)``, with r == 1 keeping everything."""
    if r >= 1.0:
        return n_c
    return int(math.floor(r * n_c))


def select_coreset(ranking: LossRanking, r: float, mode: str) -> CoreSet:
    check_ratio(r)
    mode = check_mode(mode)
    kept, warnings = [], []
    direction = "asc" if mode == "easy" else "desc"
    for c in sorted(ranking.per_class):
        pairs = ranking.ordered(c, direction)
        n = keep_count(r, len(pairs))
        if n == 0:
            msg = f"class {c}: r={r} of {len(pairs)} samples keeps none"
            log.warning(msg)
            warnings.append(msg)
        kept.extend(i for i, _ in pairs[:n])
    return CoreSet(np.sort(np.asarray(kept, dtype=np.int64)), float(r), mode, ranking.dataset_id, ranking.scorer_id, warnings)


def prune(ds: LabeledDataset, scorer: Model, r: float, mode: str) -> CoreSet:
    return select_coreset(score_losses(ds, scorer), r, mode)


# --------------------------------------------------------------------------
# text persistence


def format_coreset(core: CoreSet, **extra) -> str:
    fields = {"r": repr(float(core.r)), "mode": core.mode, "scorer": core.scorer_id or "none"}
    if core.dataset_id:
        fields["data"] = core.dataset_id
    fields.update({k: str(v) for k, v in extra.items()})
    header = "coreset v1 " + " ".join(f"{k}={v}" for k, v in fields.items())
    return header + "\n" + "".join(f"{i}\n" for i in core.kept)


def parse_coreset(text: str) -> tuple[CoreSet, dict]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("coreset v1"):
        raise DataFormatError("core-set file must start with 'coreset v1'", 0)
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    try:
        kept = [int(line) for line in lines[1:] if line.strip()]
        core = CoreSet(kept, float(meta["r"]), meta["mode"], meta.get("data", ""), meta.get("scorer", ""))
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"malformed core-set file: {exc}") from exc
    return core, meta


def save_coreset(core: CoreSet, path, **extra) -> None:
    try:
        Path(path).write_text(format_coreset(core, **extra), encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def load_coreset(path) -> tuple[CoreSet, dict]:
    try:
        return parse_coreset(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc


class LossValuePruner(BaseEstimator):
    """Sampler-style estimator: ``fit_resample(X, y)`` returns the core-set.

    ``scorer`` is a fitted nncore ``Model`` or anything exposing ``model_``
    (e.g. a fitted :class:`cdstl.training.NetClassifier`).
    """

    def __init__(self, scorer=None, r=0.6, mode="easy"):
        self.scorer = scorer
        self.r = r
        self.mode = mode

    def _scorer_model(self) -> Model:
        scorer = getattr(self.scorer, "model_", self.scorer)
        if not isinstance(scorer, Model):
            raise ConfigError("LossValuePruner needs a fitted scorer model")
        return scorer

    def fit(self, X, y):
        X, y = check_images_labels(X, y)
        model = self._scorer_model()
        ds = LabeledDataset(X, y, model.num_classes)
        self.ranking_ = score_losses(ds, model)
        self.coreset_ = select_coreset(self.ranking_, self.r, self.mode)
        self.support_ = np.zeros(len(ds), dtype=bool)
        self.support_[self.coreset_.kept] = True
        return self

    def fit_resample(self, X, y):
        self.fit(X, y)
        X, y = check_images_labels(X, y)
        return X[self.coreset_.kept], y[self.coreset_.kept]
