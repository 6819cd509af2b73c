"""Dual-path tokenization: time patches and temporally aligned wavelet patches.

With a level-2 pyramid and patch length ``P`` (a multiple of 4), wavelet
patch ``j`` is the concatenation::

    cD1[jP/2 : jP/2 + P/2] | cD2[jP/4 : jP/4 + P/4] | cA2[jP/4 : jP/4 + P/4]

so each wavelet token has ``P`` entries and covers the same sample interval
``[jP, (j+1)P)`` as time patch ``j``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import (
    AlignmentError,
    DegenerateWindowError,
    InsufficientContextError,
    InvalidLengthError,
)
from .wavelet import CoefficientPyramid, FilterBank, build_filter_bank, dwt_multi

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean


@dataclass
class AlignedTokenSequence:
    time_patches: np.ndarray
    wavelet_patches: np.ndarray
    patch_mask: np.ndarray
    wavelet_mask: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.time_patches.shape[-2]

    @property
    def patch_length(self) -> int:
        return self.time_patches.shape[-1]


def instance_normalize(window, mask=None) -> tuple[np.ndarray, NormStats]:
    """Z-score ``window`` using only mask-valid positions; masked positions become 0."""
    x = np.asarray(window, dtype=float)
    m = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise DegenerateWindowError("window has no valid positions to normalize")
    valid = x[m]
    mean = float(valid.mean())
    std = max(float(valid.std()), STD_FLOOR)
    out = np.where(m, (np.where(m, x, mean) - mean) / std, 0.0)
    return out, NormStats(mean, std)


def batch_normalize(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise ``instance_normalize`` for a ``(B, L)`` batch; returns (normalized, means, stds)."""
    x = np.asarray(values, dtype=float)
    m = np.asarray(mask, dtype=bool)
    counts = m.sum(axis=-1)
    if (counts == 0).any():
        raise DegenerateWindowError("batch contains a window with no valid positions")
    mean = np.where(m, x, 0.0).sum(axis=-1) / counts
    centered = np.where(m, x - mean[:, None], 0.0)
    std = np.maximum(np.sqrt((centered**2).sum(axis=-1) / counts), STD_FLOOR)
    return centered / std[:, None], mean, std


def patchify_time(series, P: int) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    n = x.shape[-1]
    if P < 1 or n == 0 or n % P:
        raise InvalidLengthError(f"length {n} is not divisible by patch length {P}")
    return x.reshape(x.shape[:-1] + (n // P, P))


def _check_wavelet_alignment(levels: int, P: int) -> None:
    if levels != 2:
        raise AlignmentError(f"wavelet patch alignment is defined for 2 levels, got {levels}")
    if P < 4 or P % 4:
        raise AlignmentError(f"patch length must be a positive multiple of 4, got {P}")


def patchify_wavelet(pyramid: CoefficientPyramid, P: int) -> np.ndarray:
    _check_wavelet_alignment(pyramid.levels, P)
    pyramid.validate()
    n = pyramid.original_length
    if n % P:
        raise AlignmentError(f"length {n} is not divisible by patch length {P}")
    lead = pyramid.approx.shape[:-1]
    n_patches = n // P
    cd1 = pyramid.detail(1).reshape(lead + (n_patches, P // 2))
    cd2 = pyramid.detail(2).reshape(lead + (n_patches, P // 4))
    ca2 = pyramid.approx.reshape(lead + (n_patches, P // 4))
    return np.concatenate([cd1, cd2, ca2], axis=-1)


def wavelet_patch_mask(mask, P: int) -> np.ndarray:
    """Coefficient validity mirroring ``patchify_wavelet``'s layout.

    A level-1 coefficient ``k`` stands for samples ``2k, 2k+1``; a level-2
    coefficient for ``4k .. 4k+3``.  It is valid only if all of them are.
    """
    m = np.asarray(mask, dtype=bool)
    n = m.shape[-1]
    lead = m.shape[:-1]
    lvl1 = m.reshape(lead + (n // 2, 2)).all(axis=-1)
    lvl2 = m.reshape(lead + (n // 4, 4)).all(axis=-1)
    pyr = CoefficientPyramid(2, lvl2, [lvl2, lvl1], n)
    return patchify_wavelet(pyr, P).astype(bool)


def tokenize(series, P: int, mask=None, bank: FilterBank | None = None) -> AlignedTokenSequence:
    """Tokenize an (already normalized) series or batch of series along the last axis."""
    x = np.asarray(series, dtype=float)
    n = x.shape[-1]
    if P % 4 or P < 4:
        raise AlignmentError(f"patch length must be a positive multiple of 4, got {P}")
    if n == 0 or n % P:
        raise AlignmentError(f"series length {n} is not a multiple of patch length {P}")
    m = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    bank = bank or build_filter_bank("bior2.2")
    pyr = dwt_multi(x, bank, levels=2)
    return AlignedTokenSequence(
        time_patches=patchify_time(x, P),
        wavelet_patches=patchify_wavelet(pyr, P),
        patch_mask=patchify_time(m, P).astype(bool),
        wavelet_mask=wavelet_patch_mask(m, P),
    )


def make_training_targets(tokens: AlignedTokenSequence):
    """Shift-by-one targets: ``(time_targets, wavelet_targets, time_mask, wavelet_mask)``."""
    if tokens.n_patches < 2:
        raise InsufficientContextError(
            f"need at least 2 patches for next-patch targets, got {tokens.n_patches}"
        )
    return (
        tokens.time_patches[..., 1:, :],
        tokens.wavelet_patches[..., 1:, :],
        tokens.patch_mask[..., 1:, :],
        tokens.wavelet_mask[..., 1:, :],
    )


def check_context_alignment(context_length: int, P: int) -> None:
    """Context lengths accepted by loaders and evaluation: multiples of ``4 * P``."""
    if P < 4 or P % 4:
        raise AlignmentError(f"patch length must be a positive multiple of 4, got {P}")
    if context_length <= 0 or context_length % (4 * P):
        raise AlignmentError(
            f"context length {context_length} is not a multiple of 4 * patch_length = {4 * P}"
        )
