"""Masked Huber loss and the joint two-pathway objective."""
from __future__ import annotations

import torch

from .exceptions import ContractError, NumericError

HUBER_DELTA = 1.0


def huber(pred, target, delta: float = HUBER_DELTA, mask=None) -> torch.Tensor:
    """Mean Huber loss over mask-valid entries (0 if none are valid)."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if delta <= 0:
        raise ContractError(f"huber delta must be positive, got {delta}")
    r = (pred - target).abs()
    elem = torch.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    if mask is None:
        return elem.mean()
    m = torch.as_tensor(mask, dtype=torch.bool)
    if m.shape != pred.shape:
        raise ContractError(f"mask shape {tuple(m.shape)} != prediction shape {tuple(pred.shape)}")
    count = m.sum()
    if count == 0:
        return elem.sum() * 0.0
    # where() rather than multiply so that masked NaN/Inf never leak in
    return torch.where(m, elem, torch.zeros_like(elem)).sum() / count


def joint_loss(trace, targets, config, delta: float = HUBER_DELTA):
    """``huber(time) + wavelet_weight * huber(wavelet) + balance_coeff * balance``.

    ``targets`` needs ``time_targets``, ``wavelet_targets``, ``time_mask`` and
    ``wavelet_mask`` attributes aligned with ``trace.time_predictions``.
    """
    time_l = huber(trace.time_predictions, targets.time_targets, delta, targets.time_mask)
    wav_l = huber(trace.wavelet_predictions, targets.wavelet_targets, delta, targets.wavelet_mask)
    bal = trace.balance_loss
    total = time_l
    if config.wavelet_loss_weight:
        total = total + config.wavelet_loss_weight * wav_l
    else:
        # keep wavelet-head gradients exactly zero rather than 0 * grad
        total = total + 0.0 * wav_l.detach()
    if config.load_balance_coeff:
        total = total + config.load_balance_coeff * bal
    parts = {"time": time_l.item(), "wavelet": wav_l.item(), "balance": bal.item()}
    for name, value in parts.items():
        if value != value or value in (float("inf"), float("-inf")):
            raise NumericError(f"non-finite {name} loss component: {value}")
    return total, parts
