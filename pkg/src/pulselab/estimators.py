"""scikit-learn style wrappers around the encoder and the probe."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .model import PulseConfig
from .probe import fit_softmax
from .sde import WindowDataset
from .seeding import make_rng
from .train import TrainConfig, Variant, train

_MODEL_KEYS = ("depth", "width", "init_kernel", "init_dilation", "init_hidden",
               "decoder_layers", "decoder_hidden", "tv_segments", "pseudo_pairs")


def check_windows(X, name="X"):
    """Validate a ``[n_windows, time, channels]`` float array."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False, input_name=name)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3:
        raise ValueError(f"{name} must be [n_windows, time, channels], got shape {X.shape}")
    return X


class PulseEncoder(TransformerMixin, BaseEstimator):
    """Self-supervised window encoder; ``transform`` returns max-pooled features.

    ``y`` is only read by the label-paired oracle variants.
    """

    def __init__(self, variant="pulse", depth=6, width=64, init_kernel=5, init_dilation=1,
                 init_hidden=64, decoder_layers=2, decoder_hidden=64, tv_segments=4,
                 pseudo_pairs=3, epochs=50, lr=1e-3, weight_decay=1e-4, batch_size=64,
                 validation_fraction=0.15, random_state=0):
        self.variant = variant
        self.depth = depth
        self.width = width
        self.init_kernel = init_kernel
        self.init_dilation = init_dilation
        self.init_hidden = init_hidden
        self.decoder_layers = decoder_layers
        self.decoder_hidden = decoder_hidden
        self.tv_segments = tv_segments
        self.pseudo_pairs = pseudo_pairs
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_windows(X)
        Variant(self.variant)
        if y is None:
            if self.variant in (Variant.ORACLE_POSITIVE.value, Variant.ORACLE_NEGATIVE.value):
                raise ValueError(f"variant {self.variant!r} needs labels")
            y = np.zeros(len(X), dtype=np.int64)
        else:
            y = np.asarray(y)
            if len(y) != len(X):
                raise ValueError(f"{len(X)} windows but {len(y)} labels")
            self.classes_, y = np.unique(y, return_inverse=True)
        n_val = max(1, int(round(self.validation_fraction * len(X))))
        if n_val >= len(X):
            raise ValueError("need more windows than the validation holdout")
        perm = make_rng(self.random_state, "holdout").permutation(len(X))
        split = np.full(len(X), "train", dtype="<U5")
        split[perm[:n_val]] = "val"
        ds = WindowDataset(X, y, split, np.zeros(len(X), dtype=np.int64),
                           np.zeros(len(X), dtype=np.int64), class_params=[])
        mcfg = PulseConfig(channels=X.shape[2], window=X.shape[1],
                           **{k: getattr(self, k) for k in _MODEL_KEYS})
        tcfg = TrainConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, seed=self.random_state,
                           variant=self.variant)
        state = train(ds, mcfg, tcfg)
        self.model_ = state.restore_best()
        self.history_ = state.history
        self.n_features_in_ = X.shape[2]
        self.window_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_windows(X)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} channels, got {X.shape[2]}")
        return self.model_.embed(X)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "model_")
        return np.array([f"theta{k}" for k in range(self.model_.config.width)], dtype=object)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """L2-regularized multinomial logistic regression (``lambda = 1 / C``)."""

    def __init__(self, C=1.0, max_iter=2000, tol=1e-6):
        self.C = C
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if self.C <= 0:
            raise ValueError(f"C must be positive, got {self.C}")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)
        self.coef_, self.intercept_, info = fit_softmax(
            X, codes, len(self.classes_), self.C, sample_weight, self.max_iter, self.tol)
        self.n_iter_ = info["iterations"]
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        z = self.decision_function(X)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

