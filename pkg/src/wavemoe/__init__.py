"""Dual-path (time + wavelet) mixture-of-experts time-series forecaster."""

__version__ = "0.1.0"

from .data import (
    Corpus,
    CorpusManifest,
    RawSeries,
    Window,
    balanced_batch,
    build_windows,
    impute_and_mask,
    ingest,
    pack_fragments,
    quality_filter,
    read_corpus,
    segment_series,
    synthetic_sinusoids,
    write_corpus,
)
from .evalbench import EvalTask, ForecastReport, metrics, naive_baselines, rollout, run_benchmark
from .exceptions import *  # noqa: F401,F403
from .model import ModelConfig, WaveMoE, count_parameters, init_model, parameter_counts
from .tokenizer import AlignedTokenSequence, tokenize
from .train import TrainConfig, TrainState, adamw_step, lr_at, train_loop
from .wavelet import CoefficientPyramid, FilterBank, build_filter_bank, dwt_multi, idwt_multi

from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .estimators import DWTTransformer, WaveMoEForecaster  # noqa: E402
