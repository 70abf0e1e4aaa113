from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from cdstl._validation import check_images, check_images_labels
from cdstl.data import LabeledDataset
from cdstl.nncore import Arch, Model, Rng, build_model, derive_seed, predict_labels, train_sgd

SCORER_DEFAULTS = {"arch": "ConvNetDeep", "epochs": 10, "lr": 0.05, "batch_size": 32}


class NetClassifier(ClassifierMixin, BaseEstimator):
    """SGD-trained nncore network behind the usual fit/predict surface."""

    def __init__(self, arch="ConvNetDeep", epochs=10, lr=0.05, batch_size=32, seed=0):
        self.arch = arch
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y, num_classes=None):
        X, y = check_images_labels(X, y)
        k = int(num_classes if num_classes is not None else y.max() + 1)
        self.classes_ = np.arange(k)
        self.model_ = build_model(Arch.parse(self.arch), X.shape[1:], k, derive_seed(self.seed, "init"))
        self.loss_history_ = train_sgd(
            self.model_,
            X,
            y,
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            rng=Rng(derive_seed(self.seed, "batches")),
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_labels(self.model_, check_images(X))


def train_scorer(ds: LabeledDataset, seed: int, arch="ConvNetDeep", epochs=10, lr=0.05, batch_size=32) -> Model:
    clf = NetClassifier(arch, epochs, lr, batch_size, seed).fit(ds.images, ds.labels, ds.num_classes)
    model = clf.model_
    model.requires_grad_(False)
    return model
