"""Training-corpus construction.

Raw series are cut into non-overlapping windows of ``W`` samples; tails and
short series are packed together (first-fit decreasing, per domain) instead
of being zero-padded.  Every window goes through three quality checks on its
raw values, then NaN/Inf and exact zeros are imputed to 0 with a loss mask.

Corpus file layout (all integers little-endian)::

    b"WMCORPUS"  u16 version  u16 reserved(0)
    u32 manifest_len  manifest (UTF-8 JSON)  u32 crc32(manifest)
    repeated:  u32 payload_len  payload  u32 crc32(payload)

    payload := u16 len + domain (UTF-8)
               u32 n + n * u32 fragment boundaries
               u16 n + n * (u16 len + source id (UTF-8))
               u32 W + W * f32 values + ceil(W/8) mask bytes (LSB-first bit packing)
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .exceptions import EmptyCorpusError, FormatError, IngestionError, VersionMismatchError

log = logging.getLogger(__name__)

WINDOW_LENGTH = 4096
MAX_BAD_FRACTION = 0.20
NEAR_ZERO = 1e-6
MIN_PACK_FILL = 0.5

MISSING = "missing"
ZEROS = "near-zero"
LOW_VARIABILITY = "low-variability"

CORPUS_MAGIC = b"WMCORPUS"
CORPUS_VERSION = 1


@dataclass
class RawSeries:
    id: str
    domain: str
    values: np.ndarray


@dataclass
class Fragment:
    values: np.ndarray
    source_id: str


@dataclass
class PackedBin:
    values: np.ndarray  # length W; unfilled tail is zero
    filled: int
    boundaries: list[int] = field(default_factory=list)
    source_ids: list[str] = field(default_factory=list)


@dataclass
class Window:
    values: np.ndarray
    mask: np.ndarray
    domain: str
    fragment_boundaries: list[int] = field(default_factory=list)
    source_ids: list[str] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, Window):
            return NotImplemented
        return (
            np.array_equal(self.values, other.values)
            and np.array_equal(self.mask, other.mask)
            and self.domain == other.domain
            and list(self.fragment_boundaries) == list(other.fragment_boundaries)
            and list(self.source_ids) == list(other.source_ids)
        )


@dataclass(frozen=True)
class FilterResult:
    accepted: bool
    reason: str | None = None

    def __bool__(self):
        return self.accepted


ACCEPT = FilterResult(True)


def segment_series(series: RawSeries, W: int = WINDOW_LENGTH) -> tuple[list[np.ndarray], list[Fragment]]:
    """Non-overlapping stride-``W`` windows plus the leftover tail (if any)."""
    if W < 2:
        raise ValueError(f"window length must be >= 2, got {W}")
    x = np.asarray(series.values, dtype=float)
    n_full = len(x) // W
    windows = [x[i * W:(i + 1) * W] for i in range(n_full)]
    tail = x[n_full * W:]
    leftovers = [Fragment(tail, series.id)] if len(tail) else []
    return windows, leftovers


def pack_fragments(pool: Iterable[Fragment], W: int = WINDOW_LENGTH) -> list[PackedBin]:
    """First-fit-decreasing packing into bins of length ``W``.

    Bins filled below ``MIN_PACK_FILL`` are dropped; the rest keep a zero tail
    that the caller masks out.
    """
    frags = sorted(pool, key=lambda f: len(f.values), reverse=True)
    bins: list[list[Fragment]] = []
    room: list[int] = []
    for frag in frags:
        size = len(frag.values)
        if size == 0:
            continue
        if size > W:
            raise ValueError(f"fragment of length {size} exceeds window length {W}")
        for i, free in enumerate(room):
            if size <= free:
                bins[i].append(frag)
                room[i] -= size
                break
        else:
            bins.append([frag])
            room.append(W - size)

    packed = []
    for members in bins:
        values = np.zeros(W)
        boundaries, pos = [], 0
        for frag in members:
            if pos:
                boundaries.append(pos)
            values[pos:pos + len(frag.values)] = frag.values
            pos += len(frag.values)
        if pos < MIN_PACK_FILL * W:
            continue
        packed.append(PackedBin(values, pos, boundaries, [f.source_id for f in members]))
    return packed


def _near_zero_fraction(diffs: np.ndarray) -> float:
    if diffs.size == 0:
        return 0.0
    return float(np.count_nonzero(np.abs(diffs) < NEAR_ZERO)) / diffs.size


def quality_filter(window_values) -> FilterResult:
    """Apply the missing / near-zero / low-variability checks in that order.

    All thresholds are strict: exactly 20% bad entries is still accepted.
    Difference checks skip pairs (or triples) that touch a missing value.
    """
    x = np.asarray(window_values, dtype=float)
    n = x.size
    if n == 0:
        return FilterResult(False, MISSING)
    finite = np.isfinite(x)
    if np.count_nonzero(~finite) > MAX_BAD_FRACTION * n:
        return FilterResult(False, MISSING)
    if np.count_nonzero(finite & (np.abs(np.where(finite, x, 1.0)) < NEAR_ZERO)) > MAX_BAD_FRACTION * n:
        return FilterResult(False, ZEROS)
    xs = np.where(finite, x, 0.0)
    d1 = np.diff(xs)
    d1_ok = finite[1:] & finite[:-1]
    d2 = np.diff(xs, n=2)
    d2_ok = finite[2:] & finite[1:-1] & finite[:-2]
    if (_near_zero_fraction(d1[d1_ok]) > MAX_BAD_FRACTION
            or _near_zero_fraction(d2[d2_ok]) > MAX_BAD_FRACTION):
        return FilterResult(False, LOW_VARIABILITY)
    return ACCEPT


def impute_and_mask(window_values) -> tuple[np.ndarray, np.ndarray]:
    """NaN/Inf -> 0; mask is 0 there and at original exact zeros, 1 elsewhere."""
    x = np.asarray(window_values, dtype=float)
    finite = np.isfinite(x)
    values = np.where(finite, x, 0.0)
    mask = finite & (x != 0)
    return values, mask


@dataclass
class PipelineStats:
    accepted: Counter = field(default_factory=Counter)
    rejected: dict = field(default_factory=lambda: defaultdict(Counter))
    packed: Counter = field(default_factory=Counter)
    full: Counter = field(default_factory=Counter)
    series: int = 0

    @property
    def total_accepted(self) -> int:
        return sum(self.accepted.values())

    @property
    def total_rejected(self) -> int:
        return sum(sum(c.values()) for c in self.rejected.values())

    def rejected_by_reason(self) -> Counter:
        out = Counter()
        for c in self.rejected.values():
            out.update(c)
        return out


def build_windows(series: Iterable[RawSeries], W: int = WINDOW_LENGTH,
                  stats: PipelineStats | None = None) -> tuple[list[Window], PipelineStats]:
    """Run segmentation, packing, filtering and imputation over a series stream."""
    stats = stats if stats is not None else PipelineStats()
    windows: list[Window] = []
    pools: dict[str, list[Fragment]] = defaultdict(list)

    def admit(raw, domain, boundaries, sources, filled):
        verdict = quality_filter(raw[:filled])
        if not verdict:
            stats.rejected[domain][verdict.reason] += 1
            return False
        values, mask = impute_and_mask(raw)
        mask[filled:] = False
        windows.append(Window(values, mask, domain, list(boundaries), list(sources)))
        stats.accepted[domain] += 1
        return True

    for s in series:
        stats.series += 1
        full, leftovers = segment_series(s, W)
        for raw in full:
            if admit(raw, s.domain, [], [s.id], W):
                stats.full[s.domain] += 1
        pools[s.domain].extend(leftovers)

    for domain in sorted(pools):
        for b in pack_fragments(pools[domain], W):
            if admit(b.values, domain, b.boundaries, b.source_ids, b.filled):
                stats.packed[domain] += 1
    return windows, stats


# -- sampling -----------------------------------------------------------------

@dataclass
class CorpusManifest:
    window_length: int
    domains: list[str]  # domain tag per stored window, in file order
    offsets: list[int] = field(default_factory=list)
    version: int = CORPUS_VERSION

    @property
    def domain_counts(self) -> dict[str, int]:
        return dict(sorted(Counter(self.domains).items()))

    def domain_windows(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = defaultdict(list)
        for i, d in enumerate(self.domains):
            out[d].append(i)
        return dict(sorted(out.items()))

    def to_json(self) -> dict:
        return {
            "format_version": self.version,
            "window_length": self.window_length,
            "n_windows": len(self.domains),
            "domain_counts": self.domain_counts,
            "records": [[o, d] for o, d in zip(self.offsets, self.domains)],
        }


def balanced_batch(manifest: CorpusManifest, batch_size: int, rng: np.random.Generator) -> list[int]:
    """Window indices: a uniform domain per slot, then a uniform window within it."""
    groups = [g for g in manifest.domain_windows().values() if g]
    if not groups:
        raise EmptyCorpusError("corpus has no windows to sample")
    dom = rng.integers(0, len(groups), size=batch_size)
    return [groups[d][int(rng.integers(0, len(groups[d])))] for d in dom]


# -- binary corpus ------------------------------------------------------------

class Corpus:
    """In-memory corpus: ``values``/``masks`` are ``(N, W)`` arrays."""

    def __init__(self, manifest: CorpusManifest, values: np.ndarray, masks: np.ndarray,
                 boundaries: list[list[int]], source_ids: list[list[str]]):
        self.manifest = manifest
        self.values = values
        self.masks = masks
        self.boundaries = boundaries
        self.source_ids = source_ids

    @classmethod
    def from_windows(cls, windows: list[Window]) -> "Corpus":
        if not windows:
            raise EmptyCorpusError("no windows")
        W = len(windows[0].values)
        if any(len(w.values) != W for w in windows):
            raise ValueError("windows differ in length")
        manifest = CorpusManifest(W, [w.domain for w in windows])
        return cls(
            manifest,
            np.stack([np.asarray(w.values, dtype=np.float32) for w in windows]),
            np.stack([np.asarray(w.mask, dtype=bool) for w in windows]),
            [list(w.fragment_boundaries) for w in windows],
            [list(w.source_ids) for w in windows],
        )

    def __len__(self):
        return len(self.manifest.domains)

    def __getitem__(self, i) -> Window:
        return Window(self.values[i], self.masks[i], self.manifest.domains[i],
                      list(self.boundaries[i]), list(self.source_ids[i]))

    def __iter__(self) -> Iterator[Window]:
        return (self[i] for i in range(len(self)))


def _encode_window(w: Window) -> bytes:
    buf = io.BytesIO()
    dom = w.domain.encode()
    buf.write(struct.pack("<H", len(dom)) + dom)
    buf.write(struct.pack("<I", len(w.fragment_boundaries)))
    buf.write(struct.pack(f"<{len(w.fragment_boundaries)}I", *w.fragment_boundaries))
    buf.write(struct.pack("<H", len(w.source_ids)))
    for sid in w.source_ids:
        raw = sid.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
    vals = np.asarray(w.values, dtype="<f4")
    buf.write(struct.pack("<I", len(vals)))
    buf.write(vals.tobytes())
    buf.write(np.packbits(np.asarray(w.mask, dtype=bool), bitorder="little").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_window(payload: bytes) -> Window:
    r = _Reader(payload, "window record")
    (n,) = r.unpack("<H")
    domain = r.take(n).decode()
    (nb,) = r.unpack("<I")
    boundaries = list(r.unpack(f"<{nb}I"))
    (ns,) = r.unpack("<H")
    sources = []
    for _ in range(ns):
        (k,) = r.unpack("<H")
        sources.append(r.take(k).decode())
    (W,) = r.unpack("<I")
    values = np.frombuffer(r.take(4 * W), dtype="<f4").astype(np.float32)
    mask = np.unpackbits(np.frombuffer(r.take(math.ceil(W / 8)), dtype=np.uint8),
                         bitorder="little")[:W].astype(bool)
    return Window(values, mask, domain, boundaries, sources)


def write_corpus(windows: Iterable[Window], path) -> CorpusManifest:
    windows = list(windows)
    if not windows:
        raise EmptyCorpusError("refusing to write an empty corpus")
    body = io.BytesIO()
    offsets = []
    for w in windows:
        payload = _encode_window(w)
        offsets.append(body.tell())
        body.write(struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload)))
    manifest = CorpusManifest(len(windows[0].values), [w.domain for w in windows], offsets)
    meta = json.dumps(manifest.to_json(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC + struct.pack("<HH", CORPUS_VERSION, 0))
        fh.write(struct.pack("<I", len(meta)) + meta + struct.pack("<I", zlib.crc32(meta)))
        fh.write(body.getvalue())
    return manifest


def read_corpus(path) -> Corpus:
    data = Path(path).read_bytes()
    r = _Reader(data, str(path))
    if r.take(len(CORPUS_MAGIC)) != CORPUS_MAGIC:
        raise FormatError(f"{path}: not a corpus file (bad magic)")
    version, _ = r.unpack("<HH")
    if version != CORPUS_VERSION:
        raise VersionMismatchError(f"{path}: corpus version {version}, expected {CORPUS_VERSION}")
    (mlen,) = r.unpack("<I")
    meta = r.take(mlen)
    (crc,) = r.unpack("<I")
    if zlib.crc32(meta) != crc:
        raise FormatError(f"{path}: manifest checksum mismatch")
    try:
        info = json.loads(meta)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON") from exc
    start = r.pos
    windows = []
    for offset, domain in info["records"]:
        if r.pos - start != offset:
            raise FormatError(f"{path}: record offset {r.pos - start} does not match manifest {offset}")
        (plen,) = r.unpack("<I")
        payload = r.take(plen)
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise FormatError(f"{path}: checksum mismatch in record at offset {offset}")
        w = _decode_window(payload)
        if w.domain != domain or len(w.values) != info["window_length"]:
            raise FormatError(f"{path}: record at offset {offset} disagrees with manifest")
        windows.append(w)
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after last record")
    if len(windows) != info["n_windows"]:
        raise FormatError(f"{path}: manifest lists {info['n_windows']} windows, found {len(windows)}")
    corpus = Corpus.from_windows(windows)
    corpus.manifest.offsets = [o for o, _ in info["records"]]
    return corpus


# -- ingestion ----------------------------------------------------------------

_TIME_COLUMNS = {"date", "time", "timestamp", "datetime", "ds"}


def _to_float(cell) -> float:
    if cell is None:
        return math.nan
    if isinstance(cell, (int, float)) and not isinstance(cell, bool):
        return float(cell)
    try:
        return float(str(cell).strip())
    except ValueError:
        return math.nan


def _ingest_csv(path: Path, value_columns, id_column, domain_column, domain) -> Iterator[RawSeries]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if not header:
            raise IngestionError(f"{path}: empty file or missing header")
        if value_columns is None:
            if "value" in header:
                value_columns = ["value"]
            else:
                skip = {id_column, domain_column}
                value_columns = [c for c in header if c not in skip and c.lower() not in _TIME_COLUMNS]
        missing = [c for c in value_columns if c not in header]
        if missing:
            raise IngestionError(f"{path}: columns {missing} not found in header {header}")
        if not value_columns:
            raise IngestionError(f"{path}: no value columns")

        def emit(key, dom, cols):
            for c, vals in cols.items():
                sid = key if len(value_columns) == 1 else f"{key}:{c}"
                yield RawSeries(sid, dom, np.asarray(vals, dtype=float))

        current, cur_dom = None, None
        cols: dict[str, list[float]] = {c: [] for c in value_columns}
        for lineno, row in enumerate(reader, start=2):
            if None in row:
                raise IngestionError(f"{path}:{lineno}: row has more fields than the header")
            key = row[id_column] if id_column else path.stem
            dom = (row.get(domain_column) if domain_column else None) or domain or path.stem
            if current is not None and key != current:
                yield from emit(current, cur_dom, cols)
                cols = {c: [] for c in value_columns}
            current, cur_dom = key, dom
            for c in value_columns:
                cols[c].append(_to_float(row[c]))
        if current is not None:
            yield from emit(current, cur_dom, cols)


def _ingest_jsonl(path: Path, domain) -> Iterator[RawSeries]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or not isinstance(rec.get("values"), list):
                raise IngestionError(f"{path}:{lineno}: expected an object with a 'values' list")
            yield RawSeries(
                str(rec.get("id", f"{path.stem}:{lineno}")),
                str(rec.get("domain") or domain or path.stem),
                np.array([_to_float(v) for v in rec["values"]], dtype=float),
            )


def ingest(path, format: str = "csv", *, value_columns=None, id_column=None,
           domain_column=None, domain=None) -> Iterator[RawSeries]:
    """Stream series from a CSV or JSON-lines file; unparseable cells become NaN.

    CSV files without an ``id_column`` yield one series per value column
    (multivariate files are split channel by channel).
    """
    path = Path(path)
    if format == "csv":
        if isinstance(value_columns, str):
            value_columns = [value_columns]
        return _ingest_csv(path, value_columns, id_column, domain_column, domain)
    if format in ("jsonl", "json-lines"):
        return _ingest_jsonl(path, domain)
    raise IngestionError(f"unknown ingestion format {format!r}")


def ingest_dir(directory, format: str = "csv", **kwargs) -> Iterator[RawSeries]:
    suffix = ".csv" if format == "csv" else ".jsonl"
    for p in sorted(Path(directory).glob(f"*{suffix}")):
        yield from ingest(p, format, **kwargs)


# -- synthetic data -----------------------------------------------------------

def synthetic_sinusoids(n_series: int, length: int, rng: np.random.Generator, *,
                        n_components: int = 3, noise: float = 0.05,
                        periods: tuple[float, float] = (8.0, 256.0),
                        domain: str = "synthetic") -> list[RawSeries]:
    """Sums of sinusoids with log-uniform periods plus Gaussian noise.

    ``noise`` is relative: the noise standard deviation is that fraction of the
    clean signal's standard deviation.
    """
    t = np.arange(length, dtype=float)
    lo, hi = np.log(periods[0]), np.log(periods[1])
    out = []
    for i in range(n_series):
        per = np.exp(rng.uniform(lo, hi, size=n_components))
        amp = rng.uniform(0.5, 1.5, size=n_components)
        phase = rng.uniform(0, 2 * np.pi, size=n_components)
        clean = (amp[:, None] * np.sin(2 * np.pi * t[None, :] / per[:, None] + phase[:, None])).sum(0)
        clean += rng.normal(0, 1)
        x = clean + noise * clean.std() * rng.normal(size=length)
        out.append(RawSeries(f"{domain}-{i:05d}", domain, x))
    return out
