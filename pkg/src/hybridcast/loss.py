"""Prediction loss, frequency-partition alignment loss and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError
from .spectral import ComplexTensor, irfft_axis, rfft_axis


@dataclass
class LossReport:
    l_pred: float
    l_dva: float
    l_total: float
    alpha: float
    f_low: int

    def as_dict(self) -> dict:
        return {
            "l_pred": self.l_pred,
            "l_dva": self.l_dva,
            "l_total": self.l_total,
            "alpha": self.alpha,
            "f_low": self.f_low,
        }


def check_f_low(f_low: int, horizon: int) -> None:
    bins = horizon // 2 + 1
    if not 1 <= f_low < bins:
        raise ConfigError(f"f_low={f_low} must lie in [1, {bins}) for a horizon of {horizon}", "f_low")


def split_frequency(Y_hat: torch.Tensor, f_low: int, axis: int = 1):
    """Split ``Y_hat`` into the time-domain parts below and above bin ``f_low``."""
    horizon = Y_hat.shape[axis]
    check_f_low(f_low, horizon)
    spec = rfft_axis(Y_hat, axis)
    bins = torch.arange(spec.shape[axis])
    shape = [1] * Y_hat.ndim
    shape[axis] = -1
    low_mask = (bins < f_low).reshape(shape).to(spec.re.dtype)
    high_mask = 1.0 - low_mask
    low = irfft_axis(ComplexTensor(spec.re * low_mask, spec.im * low_mask), axis, horizon)
    high = irfft_axis(ComplexTensor(spec.re * high_mask, spec.im * high_mask), axis, horizon)
    return low, high


def dva_loss(Y_hat: torch.Tensor, S_out: torch.Tensor, R_out: torch.Tensor, f_low: int) -> torch.Tensor:
    if not (Y_hat.shape == S_out.shape == R_out.shape):
        raise ShapeError("prediction and branch outputs must share a shape")
    low, high = split_frequency(Y_hat, f_low)
    return torch.mean((low - S_out) ** 2) + torch.mean((high - R_out) ** 2)


def pred_loss(Y_hat: torch.Tensor, Y_gt: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    if Y_hat.shape != Y_gt.shape:
        raise ShapeError(f"prediction {tuple(Y_hat.shape)} and target {tuple(Y_gt.shape)} differ")
    err = torch.abs(Y_hat - Y_gt)
    if reduction == "mean":
        return err.mean()
    if reduction == "sum":
        return err.sum()
    raise ConfigError(f"unknown reduction {reduction!r}", "reduction")


def total_loss(l_pred, l_dva, alpha: float):
    if alpha < 0:
        raise ConfigError(f"alpha={alpha} must be non-negative", "alpha")
    return l_pred + alpha * l_dva
