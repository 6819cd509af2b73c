"""Autoregressive rollout, point-forecast metrics, naive baselines and benchmark reports.

Protocol: one evaluation window per series (its last ``context + horizon``
points); forecasts and ground truth are z-scored with the context's own
statistics before MSE/MAE are computed, and dataset scores are the mean over
their series.  The point forecast is the time head's output; the wavelet
head can optionally be folded in with ``fusion="average"``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import impute_and_mask, ingest
from .exceptions import AlignmentError, ContractError, DegenerateWindowError
from .model import WaveMoE
from .tokenizer import batch_normalize, check_context_alignment, tokenize
from .wavelet import build_filter_bank, dwt_multi, idwt_multi

log = logging.getLogger(__name__)

CONTEXT_LENGTH = 512
HORIZON = 96


@dataclass
class EvalTask:
    dataset: str
    context_length: int = CONTEXT_LENGTH
    horizon: int = HORIZON
    normalize: bool = True

    def validate(self, patch_length: int) -> None:
        check_context_alignment(self.context_length, patch_length)
        if self.horizon <= 0 or self.horizon % patch_length:
            raise AlignmentError(
                f"horizon {self.horizon} is not a positive multiple of patch length {patch_length}"
            )


def _decode_wavelet_patch(seq: np.ndarray, patch: np.ndarray, P: int, bank) -> np.ndarray:
    """Time-domain values of the last patch after swapping in predicted coefficients."""
    pyr = dwt_multi(seq, bank, levels=2)
    n = seq.shape[-1] // P
    h, q = P // 2, P // 4
    pyr.details[1][..., (n - 1) * h:] = patch[..., :h]
    pyr.details[0][..., (n - 1) * q:] = patch[..., h:h + q]
    pyr.approx[..., (n - 1) * q:] = patch[..., h + q:]
    return idwt_multi(pyr, bank)[..., -P:]


@torch.no_grad()
def rollout_batch(model: WaveMoE, contexts, horizon: int, *, fusion: str = "time",
                  return_wavelet: bool = False):
    """Forecast ``horizon`` values for each row of ``contexts`` (shape ``(B, C)``).

    Each step tokenizes the whole (normalized) sequence so far, recomputing
    its wavelet pyramid, and appends the last position's next-patch output.
    """
    cfg = model.config
    P = cfg.patch_length
    ctx = np.atleast_2d(np.asarray(contexts, dtype=float))
    C = ctx.shape[-1]
    check_context_alignment(C, P)
    if horizon <= 0 or horizon % P:
        raise AlignmentError(f"horizon {horizon} is not a positive multiple of patch length {P}")
    if fusion not in ("time", "average"):
        raise ContractError(f"unknown fusion rule {fusion!r}")
    # same missing/zero masking as the training windows
    values, mask = impute_and_mask(ctx)
    empty = ~mask.any(axis=-1)
    z, mean, std = batch_normalize(values, mask | empty[:, None])
    bank = build_filter_bank(cfg.wavelet)
    seq, seq_mask = z, mask
    wavelet_out = []
    for _ in range(horizon // P):
        tok = tokenize(seq, P, seq_mask, bank)
        trace = model(torch.from_numpy(tok.time_patches), torch.from_numpy(tok.wavelet_patches))
        nxt = trace.time_out[:, -1].double().numpy()
        wpatch = trace.wavelet_out[:, -1].double().numpy()
        wavelet_out.append(wpatch)
        if fusion == "average":
            guess = np.concatenate([seq, nxt], axis=-1)
            nxt = 0.5 * (nxt + _decode_wavelet_patch(guess, wpatch, P, bank))
        seq = np.concatenate([seq, nxt], axis=-1)
        seq_mask = np.concatenate([seq_mask, np.ones_like(nxt, dtype=bool)], axis=-1)
    forecast = seq[:, C:] * std[:, None] + mean[:, None]
    if return_wavelet:
        return forecast, np.concatenate(wavelet_out, axis=-1)
    return forecast


def rollout(model: WaveMoE, context, horizon: int = HORIZON, **kwargs) -> np.ndarray:
    context = np.asarray(context, dtype=float)
    if context.ndim != 1:
        raise ContractError("rollout expects a 1-D context; use rollout_batch for batches")
    if not np.isfinite(context).any():
        raise DegenerateWindowError("context has no finite values")
    out = rollout_batch(model, context[None, :], horizon, **kwargs)
    if isinstance(out, tuple):
        return out[0][0], out[1][0]
    return out[0]


def metrics(forecast, truth) -> tuple[float, float]:
    f = np.asarray(forecast, dtype=float)
    t = np.asarray(truth, dtype=float)
    if f.shape != t.shape:
        raise ContractError(f"forecast shape {f.shape} != truth shape {t.shape}")
    err = f - t
    return float(np.mean(err**2)), float(np.mean(np.abs(err)))


def naive_baselines(context, horizon: int, seasons=(24,)) -> dict[str, np.ndarray]:
    """Persistence (repeat last value) and seasonal-naive (repeat last ``s`` values)."""
    x = np.asarray(context, dtype=float)
    out = {"persistence": np.full(horizon, x[-1])}
    for s in seasons:
        if s < 1 or s > len(x):
            raise ContractError(f"season {s} must lie in [1, context length {len(x)}]")
        out[f"seasonal_naive_{s}"] = x[-s:][np.arange(horizon) % s]
    return out


def persistence_forecast(contexts, horizon: int) -> np.ndarray:
    """Row-wise persistence, carrying the last finite value."""
    ctx = np.atleast_2d(np.asarray(contexts, dtype=float))
    out = np.empty((ctx.shape[0], horizon))
    for i, row in enumerate(ctx):
        finite = row[np.isfinite(row)]
        out[i] = finite[-1] if finite.size else 0.0
    return out


def zscore_metrics(context, forecast, truth) -> tuple[float, float]:
    """MSE/MAE after z-scoring with the context's statistics, over finite truth points."""
    ctx = np.asarray(context, dtype=float)
    finite = np.isfinite(ctx)
    mean = ctx[finite].mean()
    std = max(ctx[finite].std(), 1e-8)
    t = np.asarray(truth, dtype=float)
    ok = np.isfinite(t)
    return metrics((np.asarray(forecast)[ok] - mean) / std, (t[ok] - mean) / std)


@dataclass
class DatasetResult:
    dataset: str
    mse: float
    mae: float
    n_series: int
    baseline_mse: float
    baseline_mae: float
    skipped: int = 0


@dataclass
class ForecastReport:
    results: list[DatasetResult]
    context_length: int
    horizon: int
    fingerprint: str
    protocol: str = "tail window per series; z-scored with context statistics; time-head forecast"
    fusion: str = "time"

    def average(self) -> dict[str, float]:
        keys = ("mse", "mae", "baseline_mse", "baseline_mae")
        if not self.results:
            return {k: float("nan") for k in keys}
        return {k: float(np.mean([getattr(r, k) for r in self.results])) for k in keys}

    def records(self) -> list[dict]:
        recs = [{"record": "dataset", **asdict(r)} for r in self.results]
        recs.append({"record": "average", "dataset": "Average", **self.average(),
                     "n_series": sum(r.n_series for r in self.results)})
        recs.append({"record": "meta", "context_length": self.context_length, "horizon": self.horizon,
                     "fingerprint": self.fingerprint, "protocol": self.protocol, "fusion": self.fusion})
        return recs

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def table(self) -> str:
        rows = [("Dataset", "MSE", "MAE", "Naive MSE", "Naive MAE", "Series")]
        for r in self.results:
            rows.append((r.dataset, f"{r.mse:.4f}", f"{r.mae:.4f}", f"{r.baseline_mse:.4f}",
                         f"{r.baseline_mae:.4f}", str(r.n_series)))
        avg = self.average()
        rows.append(("Average", f"{avg['mse']:.4f}", f"{avg['mae']:.4f}", f"{avg['baseline_mse']:.4f}",
                     f"{avg['baseline_mae']:.4f}", str(sum(r.n_series for r in self.results))))
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.insert(len(lines) - 1, "-" * len(lines[0]))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.jsonl").write_text(self.to_jsonl())
        (out / "report.txt").write_text(self.table())


def model_fingerprint(model: WaveMoE, task: dict) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"config": model.config.to_dict(), "task": task}, sort_keys=True).encode())
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


def plot_forecast(context, truth, forecast, path, title: str = "") -> None:
    """Line chart of context tail, ground truth (optional) and forecast as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with plt.rc_context({"svg.hashsalt": "wavemoe", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(8, 3))
        c = np.asarray(context, dtype=float)
        H = len(forecast)
        tail = c[-min(len(c), 4 * H):]
        x0 = np.arange(-len(tail), 0)
        xh = np.arange(H)
        ax.plot(x0, tail, color="0.5", lw=1, label="context")
        if truth is not None:
            ax.plot(xh, truth, color="black", lw=1.2, label="ground truth")
        ax.plot(xh, forecast, color="tab:red", lw=1.2, label="forecast")
        ax.axvline(0, color="0.8", lw=0.8)
        ax.set_title(title)
        ax.legend(loc="upper left", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def run_benchmark(model: WaveMoE, dataset_dir, tasks=None, *, out_dir=None, plot_dir=None,
                  fusion: str = "time", batch_size: int = 64) -> ForecastReport:
    """Evaluate every CSV in ``dataset_dir``; each file is a dataset, each column a series."""
    P = model.config.patch_length
    default = tasks if isinstance(tasks, EvalTask) else None
    by_name = tasks if isinstance(tasks, dict) else {}
    files = sorted(Path(dataset_dir).glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no CSV datasets found in {dataset_dir}")
    results = []
    C = H = None
    for path in files:
        task = by_name.get(path.stem) or (EvalTask(path.stem, default.context_length, default.horizon)
                                          if default else EvalTask(path.stem))
        task.validate(P)
        C, H = task.context_length, task.horizon
        contexts, truths, skipped = [], [], 0
        for s in ingest(path, "csv"):
            v = s.values
            if len(v) < C + H:
                log.info("skipping %s: length %d < %d", s.id, len(v), C + H)
                skipped += 1
                continue
            ctx, truth = v[-(C + H):-H], v[-H:]
            if not np.isfinite(ctx).any() or not np.isfinite(truth).any():
                log.info("skipping %s: no finite values in context or horizon", s.id)
                skipped += 1
                continue
            contexts.append(ctx)
            truths.append(truth)
        if not contexts:
            log.warning("dataset %s has no evaluable series", path.stem)
            continue
        forecasts = np.concatenate([
            rollout_batch(model, np.stack(contexts[i:i + batch_size]), H, fusion=fusion)
            for i in range(0, len(contexts), batch_size)
        ])
        naive = persistence_forecast(np.stack(contexts), H)
        m = np.array([zscore_metrics(c, f, t) for c, f, t in zip(contexts, forecasts, truths)])
        b = np.array([zscore_metrics(c, f, t) for c, f, t in zip(contexts, naive, truths)])
        results.append(DatasetResult(path.stem, float(m[:, 0].mean()), float(m[:, 1].mean()),
                                     len(contexts), float(b[:, 0].mean()), float(b[:, 1].mean()),
                                     skipped))
        if plot_dir is not None:
            pdir = Path(plot_dir)
            pdir.mkdir(parents=True, exist_ok=True)
            for i, (c, t, f) in enumerate(zip(contexts, truths, forecasts)):
                plot_forecast(c, t, f, pdir / f"{path.stem}_{i:04d}.svg", f"{path.stem} #{i}")
    report = ForecastReport(results, C, H, model_fingerprint(model, {"C": C, "H": H, "fusion": fusion}),
                            fusion=fusion)
    if out_dir is not None:
        report.write(out_dir)
    return report
