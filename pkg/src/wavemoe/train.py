"""Joint-loss training with AdamW, linear warmup and cosine decay."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import Corpus, balanced_batch
from .exceptions import ConfigError, ContractError, EmptyCorpusError, NumericError
from .losses import huber, joint_loss  # noqa: F401  (re-exported)
from .model import ModelConfig, WaveMoE, init_model, loss_and_gradients
from .tokenizer import batch_normalize, check_context_alignment, tokenize
from .wavelet import FilterBank, build_filter_bank

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 2e-4
    batch_size: int = 128
    total_steps: int = 100_000
    warmup_ratio: float = 0.1
    min_lr_ratio: float = 0.01
    huber_delta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    seq_len: int = 4096
    log_interval: int = 100
    checkpoint_interval: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_ratio * self.total_steps))

    def validate(self) -> None:
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError(f"warmup_ratio must be in [0, 1], got {self.warmup_ratio}")
        for name in ("base_lr", "huber_delta", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("batch_size", "seq_len", "log_interval", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.total_steps < 0 or self.weight_decay < 0 or self.grad_clip_norm < 0:
            raise ConfigError("total_steps, weight_decay and grad_clip_norm must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then cosine down to base_lr * min_lr_ratio."""
    T = config.total_steps
    if not 0 <= step <= T:
        raise ContractError(f"step {step} outside [0, {T}]")
    base, warm = config.base_lr, config.warmup_steps
    if warm and step <= warm:
        return base * step / warm
    floor = base * config.min_lr_ratio
    if T == warm:
        return base
    progress = (step - warm) / (T - warm)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    model: WaveMoE
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    running: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # per-step totals; not checkpointed
    train_config: TrainConfig | None = None

    @classmethod
    def fresh(cls, model: WaveMoE, seed: int = 0) -> "TrainState":
        zeros = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        return cls(
            model=model,
            exp_avg={n: z.clone() for n, z in zeros.items()},
            exp_avg_sq={n: z.clone() for n, z in zeros.items()},
            rng=np.random.default_rng(seed),
        )


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm {norm}")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g.mul_(scale)
    return norm


def adamw_step(state: TrainState, grads: dict, config: TrainConfig) -> TrainState:
    """Clip, then one bias-corrected AdamW update with decoupled weight decay."""
    clip_grad_norm(grads, config.grad_clip_norm)
    t = state.step + 1
    lr = lr_at(min(t, config.total_steps), config) if config.total_steps else config.base_lr
    b1, b2 = config.beta1, config.beta2
    bc1, bc2 = 1 - b1**t, 1 - b2**t
    updates = {}
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            g = grads[name]
            m = state.exp_avg[name].mul(b1).add_(g, alpha=1 - b1)
            v = state.exp_avg_sq[name].mul(b2).addcmul_(g, g, value=1 - b2)
            new = p * (1 - lr * config.weight_decay) - lr * (m / bc1) / ((v / bc2).sqrt() + config.eps)
            if not torch.isfinite(new).all():
                raise NumericError(f"non-finite update for parameter {name} at step {t}")
            updates[name] = (new, m, v)
        for name, p in state.model.named_parameters():
            new, m, v = updates[name]
            p.copy_(new)
            state.exp_avg[name] = m
            state.exp_avg_sq[name] = v
    state.step = t
    return state


@dataclass
class Batch:
    time_patches: torch.Tensor
    wavelet_patches: torch.Tensor
    time_targets: torch.Tensor
    wavelet_targets: torch.Tensor
    time_mask: torch.Tensor
    wavelet_mask: torch.Tensor


def assemble_batch(values, mask, P: int, bank: FilterBank | None = None,
                   dtype=torch.float32) -> Batch:
    """Normalize each row over its valid positions, tokenize, and build shifted targets."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    empty = ~mask.any(axis=-1)
    # fully masked crops carry no loss; give them unit stats instead of failing
    safe_mask = mask | empty[:, None]
    z, _, _ = batch_normalize(np.where(empty[:, None], 0.0, values), safe_mask)
    tok = tokenize(z, P, mask, bank or build_filter_bank("bior2.2"))

    def t(a, dt=dtype):
        return torch.from_numpy(np.ascontiguousarray(a)).to(dt)

    return Batch(
        time_patches=t(tok.time_patches),
        wavelet_patches=t(tok.wavelet_patches),
        time_targets=t(tok.time_patches[:, 1:]),
        wavelet_targets=t(tok.wavelet_patches[:, 1:]),
        time_mask=t(tok.patch_mask[:, 1:], torch.bool),
        wavelet_mask=t(tok.wavelet_mask[:, 1:], torch.bool),
    )


def sample_batch(corpus: Corpus, config: TrainConfig, P: int, rng: np.random.Generator,
                 bank: FilterBank | None = None) -> Batch:
    idx = balanced_batch(corpus.manifest, config.batch_size, rng)
    W = corpus.manifest.window_length
    S = config.seq_len
    if S > W:
        raise ConfigError(f"seq_len {S} exceeds corpus window length {W}")
    starts = rng.integers(0, W - S + 1, size=len(idx))
    vals = np.stack([corpus.values[i, s:s + S] for i, s in zip(idx, starts)])
    masks = np.stack([corpus.masks[i, s:s + S] for i, s in zip(idx, starts)])
    return assemble_batch(vals, masks, P, bank)


def _update_running(running: dict, parts: dict, total: float, alpha: float = 0.1) -> None:
    for key, value in {"total": total, **parts}.items():
        prev = running.get(key)
        running[key] = value if prev is None else (1 - alpha) * prev + alpha * value


def train_loop(corpus: Corpus, model_config: ModelConfig, train_config: TrainConfig, *,
               out_dir=None, state: TrainState | None = None,
               loss_log=None) -> TrainState:
    """Train until ``train_config.total_steps``; resumes from ``state`` when given.

    Writes ``checkpoint_<step>.bin`` every ``checkpoint_interval`` steps plus a
    final ``model.ckpt`` and appends loss records to ``loss_log.jsonl`` when
    ``out_dir`` is set.  On numeric divergence the last good state is saved to
    ``last_good.ckpt`` and the error is re-raised.
    """
    from .checkpoint import save_checkpoint

    if corpus is None or len(corpus) == 0:
        raise EmptyCorpusError("training corpus is empty")
    P = model_config.patch_length
    check_context_alignment(train_config.seq_len, P)
    bank = build_filter_bank(model_config.wavelet)
    if state is None:
        state = TrainState.fresh(init_model(model_config), seed=train_config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(loss_log or out / "loss_log.jsonl", "a") if (loss_log or out) else None
    tick = time.perf_counter()
    try:
        while state.step < train_config.total_steps:
            batch = sample_batch(corpus, train_config, P, state.rng, bank)
            try:
                total, parts, grads = loss_and_gradients(
                    state.model, batch, delta=train_config.huber_delta)
                adamw_step(state, grads, train_config)
            except NumericError:
                if out is not None:
                    save_checkpoint(state, out / "last_good.ckpt", train_config)
                raise
            state.history.append(total)
            _update_running(state.running, parts, total)
            if log_fh and (state.step % train_config.log_interval == 0
                           or state.step == train_config.total_steps):
                now = time.perf_counter()
                rec = {"step": state.step, "lr": lr_at(state.step, train_config), "total": total,
                       "time_loss": parts["time"], "wavelet_loss": parts["wavelet"],
                       "balance_loss": parts["balance"], "wall_ms": round(1000 * (now - tick), 3)}
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
                tick = now
            if out is not None and state.step % train_config.checkpoint_interval == 0:
                save_checkpoint(state, out / f"checkpoint_{state.step:08d}.bin", train_config)
        if out is not None:
            save_checkpoint(state, out / "model.ckpt", train_config)
    finally:
        if log_fh:
            log_fh.close()
    return state
