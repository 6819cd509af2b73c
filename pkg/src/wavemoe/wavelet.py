"""Periodized biorthogonal discrete wavelet transform.

Filters are stored as tap vectors plus the sample offset of their first tap.
Analysis is a circular correlation followed by keeping every second sample::

    approx[k] = sum_i h[i] * x[(2k + offset_h + i - shift) mod L]

and synthesis is the matching transposed scatter.  ``shift`` delays the input
so that every coefficient depends only on current and earlier samples, which
keeps wavelet tokens from peeking into the next time patch.

All transforms operate on the last axis, so a batch of windows shaped
``(n_windows, L)`` is transformed in one call.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidLengthError, MalformedPyramidError, UnsupportedWaveletError

__all__ = [
    "FilterBank",
    "CoefficientPyramid",
    "SUPPORTED_WAVELETS",
    "build_filter_bank",
    "dwt_step",
    "idwt_step",
    "dwt_multi",
    "idwt_multi",
]

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class FilterBank:
    name: str
    analysis_low: np.ndarray
    analysis_high: np.ndarray
    synthesis_low: np.ndarray
    synthesis_high: np.ndarray
    # sample offset of tap 0 for each filter, in the order above
    offsets: tuple[int, int, int, int] = (0, 0, 0, 0)
    shift: int = 0

    @property
    def filter_length(self) -> int:
        return max(len(self.analysis_low), len(self.analysis_high))


def _haar() -> FilterBank:
    h = np.array([1.0, 1.0]) / SQRT2
    g = np.array([1.0, -1.0]) / SQRT2
    return FilterBank("haar", h, g, h.copy(), g.copy(), offsets=(0, 0, 0, 0), shift=0)


def _bior22() -> FilterBank:
    # CDF 5/3 spline pair; highpass filters from the alternating-sign
    # quadrature relations g[n] = (-1)^n h_syn[1-n], g_syn[n] = (-1)^n h[1-n]
    h = SQRT2 * np.array([-1 / 8, 1 / 4, 3 / 4, 1 / 4, -1 / 8])  # taps -2..2
    h_syn = SQRT2 * np.array([1 / 4, 1 / 2, 1 / 4])  # taps -1..1
    g = SQRT2 * np.array([1 / 4, -1 / 2, 1 / 4])  # taps 0..2
    g_syn = SQRT2 * np.array([1 / 8, 1 / 4, -3 / 4, 1 / 4, 1 / 8])  # taps -1..3
    # shift=2 makes approx[k] depend on x[2k-4 .. 2k] and detail[k] on x[2k-2 .. 2k]
    return FilterBank("bior2.2", h, g, h_syn, g_syn, offsets=(-2, 0, -1, -1), shift=2)


_REGISTRY = {"haar": _haar, "bior2.2": _bior22}
SUPPORTED_WAVELETS = tuple(_REGISTRY)


def build_filter_bank(name: str) -> FilterBank:
    """Return the analysis/synthesis filter bank for a supported wavelet family."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise UnsupportedWaveletError(
            f"unsupported wavelet {name!r}; expected one of {SUPPORTED_WAVELETS}"
        ) from None
    return factory()


@dataclass
class CoefficientPyramid:
    """Multi-level coefficients ordered coarsest first.

    ``details`` holds ``[cD_L, ..., cD_1]``.  Arrays may carry leading batch
    dimensions; the coefficient index is always the last axis.
    """

    levels: int
    approx: np.ndarray
    details: list[np.ndarray] = field(default_factory=list)
    original_length: int = 0

    def expected_lengths(self) -> list[int]:
        n = self.original_length
        return [n >> self.levels] + [n >> lvl for lvl in range(self.levels, 0, -1)]

    def validate(self) -> None:
        if self.levels < 1 or len(self.details) != self.levels:
            raise MalformedPyramidError(
                f"pyramid declares {self.levels} levels but holds {len(self.details)} detail bands"
            )
        if self.original_length <= 0 or self.original_length % (1 << self.levels):
            raise MalformedPyramidError(
                f"original_length {self.original_length} not divisible by 2**{self.levels}"
            )
        bands = [self.approx, *self.details]
        got = [np.shape(b)[-1] for b in bands]
        if got != self.expected_lengths():
            raise MalformedPyramidError(
                f"band lengths {got} inconsistent with original_length "
                f"{self.original_length} (expected {self.expected_lengths()})"
            )
        lead = {np.shape(b)[:-1] for b in bands}
        if len(lead) != 1:
            raise MalformedPyramidError(f"bands disagree on batch shape: {sorted(lead)}")

    @property
    def cA(self) -> np.ndarray:
        return self.approx

    def detail(self, level: int) -> np.ndarray:
        """Detail band at ``level`` (1 = finest)."""
        return self.details[self.levels - level]

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.approx, *self.details], axis=-1)

    @classmethod
    def from_array(cls, flat: np.ndarray, levels: int) -> "CoefficientPyramid":
        flat = np.asarray(flat, dtype=float)
        n = flat.shape[-1]
        pyr = cls(levels=levels, approx=flat[..., :0], details=[], original_length=n)
        sizes = pyr.expected_lengths()
        if n % (1 << levels):
            raise MalformedPyramidError(f"flat length {n} not divisible by 2**{levels}")
        edges = np.cumsum([0, *sizes])
        bands = [flat[..., a:b] for a, b in zip(edges[:-1], edges[1:])]
        return cls(levels=levels, approx=bands[0], details=bands[1:], original_length=n)


def _check_even(n: int) -> None:
    if n < 2 or n % 2:
        raise InvalidLengthError(f"signal length must be even and >= 2, got {n}")


def _analysis(x: np.ndarray, taps: np.ndarray, offset: int, shift: int) -> np.ndarray:
    n = x.shape[-1]
    base = 2 * np.arange(n // 2) + offset - shift
    out = np.zeros(x.shape[:-1] + (n // 2,), dtype=np.result_type(x, taps))
    for i, c in enumerate(taps):
        out += c * x[..., (base + i) % n]
    return out


def _synthesis(coef: np.ndarray, taps: np.ndarray, offset: int, shift: int, out: np.ndarray) -> None:
    n = out.shape[-1]
    base = 2 * np.arange(n // 2) + offset - shift
    for i, c in enumerate(taps):
        # (base + i) mod n hits distinct positions, so fancy += is safe
        out[..., (base + i) % n] += c * coef


def dwt_step(signal, bank: FilterBank) -> tuple[np.ndarray, np.ndarray]:
    """One analysis level: ``(approx, detail)``, each half the input length."""
    x = np.asarray(signal, dtype=float)
    _check_even(x.shape[-1] if x.ndim else 0)
    oa, od, _, _ = bank.offsets
    return (
        _analysis(x, bank.analysis_low, oa, bank.shift),
        _analysis(x, bank.analysis_high, od, bank.shift),
    )


def idwt_step(approx, detail, bank: FilterBank) -> np.ndarray:
    a = np.asarray(approx, dtype=float)
    d = np.asarray(detail, dtype=float)
    if a.shape != d.shape:
        raise MalformedPyramidError(f"approx {a.shape} and detail {d.shape} differ in shape")
    out = np.zeros(a.shape[:-1] + (2 * a.shape[-1],))
    _, _, sa, sd = bank.offsets
    _synthesis(a, bank.synthesis_low, sa, bank.shift, out)
    _synthesis(d, bank.synthesis_high, sd, bank.shift, out)
    return out


def dwt_multi(signal, bank: FilterBank, levels: int = 2) -> CoefficientPyramid:
    x = np.asarray(signal, dtype=float)
    if levels < 1:
        raise InvalidLengthError(f"levels must be >= 1, got {levels}")
    n = x.shape[-1] if x.ndim else 0
    if n == 0 or n % (1 << levels):
        raise InvalidLengthError(f"length {n} is not divisible by 2**{levels}")
    details = []
    approx = x
    for _ in range(levels):
        approx, d = dwt_step(approx, bank)
        details.append(d)
    return CoefficientPyramid(levels, approx, details[::-1], n)


def idwt_multi(pyramid: CoefficientPyramid, bank: FilterBank) -> np.ndarray:
    pyramid.validate()
    x = np.asarray(pyramid.approx, dtype=float)
    for d in pyramid.details:
        x = idwt_step(x, d, bank)
    return x
