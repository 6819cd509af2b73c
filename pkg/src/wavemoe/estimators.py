"""scikit-learn style wrappers around the transform and the forecaster."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_contexts, check_horizon, check_positive_int, check_series_collection
from .data import Corpus, RawSeries, build_windows
from .evalbench import persistence_forecast, rollout_batch, zscore_metrics
from .exceptions import InvalidLengthError
from .model import ModelConfig
from .train import TrainConfig, TrainState, train_loop
from .wavelet import CoefficientPyramid, build_filter_bank, dwt_multi, idwt_multi


class DWTTransformer(TransformerMixin, BaseEstimator):
    """Row-wise multi-level DWT.

    ``transform`` returns the flattened pyramid ``[cA_L | cD_L | ... | cD_1]``
    and ``inverse_transform`` reconstructs the signals.
    """

    def __init__(self, wavelet: str = "bior2.2", levels: int = 2):
        self.wavelet = wavelet
        self.levels = levels

    def fit(self, X, y=None):
        X = check_array(X, dtype=float, ensure_all_finite=True)
        levels = check_positive_int(self.levels, "levels")
        if X.shape[1] % (1 << levels):
            raise InvalidLengthError(f"signal length {X.shape[1]} not divisible by 2**{levels}")
        self.bank_ = build_filter_bank(self.wavelet)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "bank_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise InvalidLengthError(f"expected {self.n_features_in_} samples per row, got {X.shape[1]}")
        return dwt_multi(X, self.bank_, self.levels).to_array()

    def inverse_transform(self, Xt):
        check_is_fitted(self, "bank_")
        Xt = check_array(Xt, dtype=float)
        return idwt_multi(CoefficientPyramid.from_array(Xt, self.levels), self.bank_)


class WaveMoEForecaster(BaseEstimator):
    """Train a dual-path forecaster on raw series and roll it out on contexts.

    ``fit`` takes a collection of 1-D series (ragged is fine), builds the
    windowed corpus and trains; ``predict`` maps ``(n, context)`` arrays to
    ``(n, horizon)`` forecasts in the original scale.
    """

    def __init__(self, model_params=None, steps: int = 1000, batch_size: int = 32,
                 learning_rate: float = 1e-3, warmup_ratio: float = 0.05, seq_len: int = 640,
                 window_length: int = 4096, horizon: int = 96, fusion: str = "time",
                 seed: int = 0):
        self.model_params = model_params
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_ratio = warmup_ratio
        self.seq_len = seq_len
        self.window_length = window_length
        self.horizon = horizon
        self.fusion = fusion
        self.seed = seed

    def _configs(self):
        mc = ModelConfig(**{"seed": self.seed, **(self.model_params or {})})
        tc = TrainConfig(base_lr=self.learning_rate, batch_size=self.batch_size,
                         total_steps=self.steps, warmup_ratio=self.warmup_ratio,
                         seq_len=self.seq_len, seed=self.seed, checkpoint_interval=10**9)
        return mc, tc

    def fit(self, X, y=None):
        mc, tc = self._configs()
        check_horizon(self.horizon, mc.patch_length)
        rows = check_series_collection(X, min_length=2)
        raw = [RawSeries(f"series-{i}", "fit", r) for i, r in enumerate(rows)]
        windows, self.pipeline_stats_ = build_windows(raw, self.window_length)
        self.corpus_ = Corpus.from_windows(windows)
        self.state_: TrainState = train_loop(self.corpus_, mc, tc)
        self.model_ = self.state_.model
        self.loss_history_ = np.asarray(self.state_.history)
        return self

    def predict(self, X, horizon: int | None = None):
        check_is_fitted(self, "model_")
        P = self.model_.config.patch_length
        H = check_horizon(horizon or self.horizon, P)
        ctx = check_contexts(X, P)
        with torch.inference_mode():
            return rollout_batch(self.model_, ctx, H, fusion=self.fusion)

    def score(self, X, y):
        """Negative mean z-scored MSE (context statistics), so larger is better."""
        ctx = check_contexts(X, self.model_.config.patch_length)
        y = np.atleast_2d(np.asarray(y, dtype=float))
        pred = self.predict(ctx, horizon=y.shape[1])
        return -float(np.mean([zscore_metrics(c, f, t)[0] for c, f, t in zip(ctx, pred, y)]))

    def baseline_score(self, X, y):
        """The same score for the persistence forecast."""
        ctx = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        naive = persistence_forecast(ctx, y.shape[1])
        return -float(np.mean([zscore_metrics(c, f, t)[0] for c, f, t in zip(ctx, naive, y)]))
