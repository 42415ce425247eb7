"""scikit-learn style wrapper around one target network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_non_negative

from .separator import MagnitudeSet, ModelSpec, SeparatorModel, TrainConfig, evaluate_loss, train


def _check_magnitudes(X, name: str) -> np.ndarray:
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim != 4:
        raise ValueError(f"{name} must be (n_examples, channels, frames, bins), got shape {X.shape}")
    check_non_negative(X.reshape(len(X), -1), name)
    return X


class SeparatorEstimator(BaseEstimator):
    """Fit a mask-based separator on ``(n, channels, frames, bins)`` magnitudes.

    ``fit(X, y)`` takes mixture magnitudes ``X`` and target magnitudes ``y``;
    ``predict`` returns estimated target magnitudes and ``score`` the negative
    mean squared error on the kept bins.
    """

    def __init__(self, variant="deq_umx", hidden=32, bins_cropped=None, unroll_l=4, l_max=6, epsilon=1e-3,
                 backward_mode="jfb", pretrain_epochs=20, epochs=100, lr=1e-3, weight_decay=1e-5, batch_size=16,
                 validation_fraction=0.2, seed=0):
        self.variant = variant
        self.hidden = hidden
        self.bins_cropped = bins_cropped
        self.unroll_l = unroll_l
        self.l_max = l_max
        self.epsilon = epsilon
        self.backward_mode = backward_mode
        self.pretrain_epochs = pretrain_epochs
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y):
        X = _check_magnitudes(X, "X")
        y = _check_magnitudes(y, "y")
        if X.shape != y.shape:
            raise ValueError(f"X {X.shape} and y {y.shape} must have the same shape")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")
        n_valid = max(1, int(round(len(X) * self.validation_fraction)))
        if n_valid >= len(X):
            raise ValueError(f"need more than {n_valid} examples to hold out a validation split")
        _, C, T, F = X.shape
        frame_len = 2 * (F - 1)
        self.spec_ = ModelSpec.build(
            self.variant, unroll_l=self.unroll_l, l_max=self.l_max, epsilon=self.epsilon,
            backward_mode=self.backward_mode, bins_total=F, bins_cropped=self.bins_cropped or F, channels=C,
            hidden=self.hidden, targets=("target",), sample_rate=frame_len, frame_len=frame_len, hop=1,
        )
        config = TrainConfig(
            segment_seconds=T, lr=self.lr, weight_decay=self.weight_decay, pretrain_unroll_l=self.unroll_l,
            pretrain_epochs=self.pretrain_epochs if self.variant == "deq_umx" else 0,
            l_max_after_pretrain=self.l_max, epochs=self.epochs, batch_size=self.batch_size,
            backward_mode=self.backward_mode, seed=self.seed,
        )
        order = np.random.default_rng(self.seed).permutation(len(X))
        valid, fit = order[:n_valid], order[n_valid:]
        self.model_ = SeparatorModel(self.spec_, np.random.default_rng(self.seed))
        result = train(self.model_, MagnitudeSet(X[fit], y[fit]), MagnitudeSet(X[valid], y[valid]), config)
        self.history_ = result.history
        self.n_features_in_ = C * F
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.separate(_check_magnitudes(X, "X"))

    def score(self, X, y) -> float:
        check_is_fitted(self, "model_")
        data = MagnitudeSet(_check_magnitudes(X, "X"), _check_magnitudes(y, "y"))
        return -evaluate_loss(self.model_, data, self.batch_size)
