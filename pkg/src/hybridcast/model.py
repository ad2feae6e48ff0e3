"""The full forecaster: periodic branch, residual branch and their losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .config import VARIANTS
from .data import SeriesSlice, WindowBatch
from .errors import ConfigError, TrainingAborted
from .loss import LossReport, dva_loss, pred_loss, total_loss
from .periodic import (
    StaeParams,
    gather_hybrid,
    init_alternative,
    init_statistical_prior,
    period_length,
    stae_forward,
)
from .residual import ForecastOutput, StfeParams, combine, compute_residual, stfe_forward


@dataclass
class ModelSpec:
    num_nodes: int
    steps_per_day: int
    t_in: int = 12
    t_out: int = 12
    dim: int = 32
    hidden: int = 64
    alpha: float = 1.0
    f_low: int = 1
    variant: str = "full"
    float64: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}", "variant")

    @property
    def dtype(self):
        return torch.float64 if self.float64 else torch.float32

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.variant == "no_dva" else self.alpha

    def to_dict(self) -> dict:
        return asdict(self)


class HybridModel(nn.Module):
    """Parameter container. Absent components (per ablation variant) are ``None``."""

    def __init__(self, spec: ModelSpec, adj_norm: np.ndarray, seed: int = 0):
        super().__init__()
        self.spec = spec
        dtype = spec.dtype
        gen = torch.Generator().manual_seed(int(seed))
        n = spec.num_nodes
        self.register_buffer("adj_norm", torch.as_tensor(np.asarray(adj_norm), dtype=dtype))

        use_daily = spec.variant != "no_lde"
        use_weekly = spec.variant != "no_lwe"
        use_stae = spec.variant != "no_stae"
        L_D = period_length("daily", spec.steps_per_day)
        L_W = period_length("weekly", spec.steps_per_day)

        self.p_daily = nn.Parameter(torch.zeros(L_D, n, dtype=dtype)) if use_daily else None
        self.p_weekly = nn.Parameter(torch.zeros(L_W, n, dtype=dtype)) if use_weekly else None
        self.stae_daily = StaeParams(L_D, n, dtype, gen) if use_daily and use_stae else None
        self.stae_weekly = StaeParams(L_W, n, dtype, gen) if use_weekly and use_stae else None
        if spec.variant == "no_stfe":
            self.stfe = None
        else:
            mode = "mlp" if spec.variant == "re_mlp" else "spectral"
            self.stfe = StfeParams(spec.t_in, spec.t_out, spec.dim, spec.hidden, mode, dtype, gen)

    def init_embeddings(
        self,
        train: SeriesSlice,
        strategy: str = "prior",
        weekly_prior: str = "residual",
        seed: int = 0,
    ) -> dict:
        """Fill the period embeddings from a normalized training slice.

        With ``weekly_prior="residual"`` (and a daily embedding present) the
        weekly prior averages what the daily prior leaves unexplained, so the
        hybrid sum starts at the weekly slot mean instead of double counting.
        Returns the number of unobserved slots per embedding.
        """
        report = {}
        n = self.spec.num_nodes
        with torch.no_grad():
            daily = None
            if self.p_daily is not None:
                if strategy == "prior":
                    emb = init_statistical_prior(train.values, train.tod, train.dow, "daily", train.steps_per_day)
                else:
                    emb = init_alternative("daily", strategy, seed, train.steps_per_day, n)
                daily = emb.P
                self.p_daily.copy_(torch.as_tensor(daily))
                report["daily"] = emb.empty_slots
            if self.p_weekly is not None:
                if strategy == "prior":
                    values = train.values
                    if daily is not None and weekly_prior == "residual":
                        values = values - daily[train.tod]
                    emb = init_statistical_prior(values, train.tod, train.dow, "weekly", train.steps_per_day)
                else:
                    emb = init_alternative("weekly", strategy, seed + 1, train.steps_per_day, n)
                self.p_weekly.copy_(torch.as_tensor(emb.P))
                report["weekly"] = emb.empty_slots
        return report

    def refined_embeddings(self):
        daily, weekly = self.p_daily, self.p_weekly
        if daily is not None and self.stae_daily is not None:
            daily = stae_forward(daily, self.stae_daily, self.adj_norm)
        if weekly is not None and self.stae_weekly is not None:
            weekly = stae_forward(weekly, self.stae_weekly, self.adj_norm)
        return daily, weekly

    def forward(self, batch: WindowBatch) -> ForecastOutput:
        dtype = self.spec.dtype
        X = torch.as_tensor(batch.X, dtype=dtype)
        daily, weekly = self.refined_embeddings()
        pattern = gather_hybrid(
            daily, weekly, batch.tod_in, batch.dow_in, batch.tod_out, batch.dow_out, self.spec.steps_per_day
        )
        if self.stfe is None:
            R_out = torch.zeros_like(pattern.S_out)
        else:
            R_out = stfe_forward(compute_residual(X, pattern.S_in), self.stfe)
        return combine(pattern.S_out, R_out)

    def named_trainable(self) -> dict[str, nn.Parameter]:
        return {name: p for name, p in self.named_parameters() if p.requires_grad}


def loss_terms(model: HybridModel, out: ForecastOutput, batch: WindowBatch, reduction: str = "mean"):
    spec = model.spec
    Y = torch.as_tensor(batch.Y, dtype=spec.dtype)
    l_pred = pred_loss(out.Y_hat, Y, reduction)
    l_dva = dva_loss(out.Y_hat, out.S_out, out.R_out, spec.f_low)
    return l_pred, l_dva, total_loss(l_pred, l_dva, spec.effective_alpha)


def forward(model: HybridModel, batch: WindowBatch, reduction: str = "mean"):
    """Model output and loss summary for one batch, without gradients."""
    with torch.no_grad():
        out = model(batch)
        l_pred, l_dva, l_total = loss_terms(model, out, batch, reduction)
    spec = model.spec
    report = LossReport(float(l_pred), float(l_dva), float(l_total), spec.effective_alpha, spec.f_low)
    return out, report


def backward(model: HybridModel, batch: WindowBatch, scale: float = 1.0, reduction: str = "mean"):
    """Reverse-mode gradients of ``scale * l_total`` for every trainable tensor.

    Returns ``(grads, report)``; parameters the loss does not reach get zeros.
    """
    params = model.named_trainable()
    out = model(batch)
    l_pred, l_dva, l_total = loss_terms(model, out, batch, reduction)
    grads = torch.autograd.grad(scale * l_total, list(params.values()), allow_unused=True)
    result = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in parameter group {name!r}")
        result[name] = g
    spec = model.spec
    report = LossReport(
        float(l_pred.detach()), float(l_dva.detach()), float(l_total.detach()), spec.effective_alpha, spec.f_low
    )
    return result, report
