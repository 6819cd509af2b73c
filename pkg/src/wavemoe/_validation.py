"""Input checks shared by the estimator wrappers and the command line."""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import AlignmentError, ContractError, InvalidLengthError
from .tokenizer import check_context_alignment


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ContractError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_series_collection(X, min_length: int = 1) -> list[np.ndarray]:
    """Accept a 2-D array or a sequence of 1-D arrays (ragged allowed)."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        rows = list(X.astype(float))
    elif isinstance(X, np.ndarray) and X.ndim == 1 and X.dtype != object:
        rows = [X.astype(float)]
    else:
        try:
            rows = [np.asarray(x, dtype=float) for x in X]
        except (TypeError, ValueError) as exc:
            raise ContractError("expected a 2-D array or a list of 1-D numeric series") from exc
    if not rows:
        raise ContractError("no series given")
    for i, r in enumerate(rows):
        if r.ndim != 1:
            raise ContractError(f"series {i} is {r.ndim}-D; expected 1-D")
        if len(r) < min_length:
            raise InvalidLengthError(f"series {i} has length {len(r)} < {min_length}")
    return rows


def check_contexts(X, patch_length: int) -> np.ndarray:
    """2-D float array of equal-length contexts with an aligned length."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ContractError(f"contexts must be 1-D or 2-D, got {arr.ndim}-D")
    check_context_alignment(arr.shape[1], patch_length)
    return arr


def check_horizon(horizon: int, patch_length: int) -> int:
    horizon = check_positive_int(horizon, "horizon")
    if horizon % patch_length:
        raise AlignmentError(f"horizon {horizon} is not a multiple of patch length {patch_length}")
    return horizon
