"""Prune a dataset by per-sample loss, then distill the core-set into a few synthetic images."""

from cdstl.config import ExperimentConfig
from cdstl.data import DistilledContainer, LabeledDataset, load_distilled, load_idx, make_shapes, save_distilled
from cdstl.distill import DatasetDistiller, DistillConfig, dc_loss, distill_run, dm_loss, mtt_loss
from cdstl.evaluation import EvalReport, compare_reports, evaluate, sweep_r
from cdstl.latentprior import LatentDatasetDistiller, distill_latent_run, pretrain_decoder
from cdstl.pruning import CoreSet, LossValuePruner, prune, score_losses, select_coreset
from cdstl.training import NetClassifier, train_scorer

__version__ = "0.1.0"

__all__ = [
    "CoreSet",
    "DatasetDistiller",
    "DistillConfig",
    "DistilledContainer",
    "EvalReport",
    "ExperimentConfig",
    "LabeledDataset",
    "LatentDatasetDistiller",
    "LossValuePruner",
    "NetClassifier",
    "compare_reports",
    "dc_loss",
    "distill_latent_run",
    "distill_run",
    "dm_loss",
    "evaluate",
    "load_distilled",
    "load_idx",
    "make_shapes",
    "mtt_loss",
    "pretrain_decoder",
    "prune",
    "save_distilled",
    "score_losses",
    "select_coreset",
    "sweep_r",
    "train_scorer",
]
