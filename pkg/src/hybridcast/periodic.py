"""Learnable daily/weekly embeddings, their attentive encoder and calendar lookup."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import DAYS_PER_WEEK
from .errors import ConfigError, DataValidationError, ShapeError

KINDS = ("daily", "weekly")
INIT_STRATEGIES = ("zero", "uniform", "normal", "xavier", "he")


@dataclass
class PeriodicEmbedding:
    P: np.ndarray  # [L, N]
    kind: str
    empty_slots: int = 0

    @property
    def length(self) -> int:
        return self.P.shape[0]


@dataclass
class HybridPattern:
    S_in: torch.Tensor  # [B, T1, N]
    S_out: torch.Tensor  # [B, T2, N]


def period_length(kind: str, steps_per_day: int) -> int:
    if kind == "daily":
        return steps_per_day
    if kind == "weekly":
        return DAYS_PER_WEEK * steps_per_day
    raise ConfigError(f"unknown embedding kind {kind!r}", "kind")


def index_daily(tod, steps_per_day: int):
    tod = np.asarray(tod)
    if np.any((tod < 0) | (tod >= steps_per_day)):
        raise DataValidationError(f"time-of-day index outside [0, {steps_per_day})")
    return tod


def index_weekly(tod, dow, steps_per_day: int):
    tod = index_daily(tod, steps_per_day)
    dow = np.asarray(dow)
    if np.any((dow < 0) | (dow >= DAYS_PER_WEEK)):
        raise DataValidationError("day-of-week index outside [0, 7)")
    return tod + dow * steps_per_day


def slot_index(kind: str, tod, dow, steps_per_day: int):
    return index_daily(tod, steps_per_day) if kind == "daily" else index_weekly(tod, dow, steps_per_day)


def init_statistical_prior(
    train_values: np.ndarray,
    tod: np.ndarray,
    dow: np.ndarray,
    kind: str,
    steps_per_day: int,
) -> PeriodicEmbedding:
    """Per-node mean of the (normalized) training series at every period slot.

    Slots never observed in training fall back to the node's overall mean.
    """
    values = np.asarray(train_values, dtype=np.float64)
    length = period_length(kind, steps_per_day)
    idx = slot_index(kind, tod, dow, steps_per_day)
    sums = np.zeros((length, values.shape[1]))
    counts = np.zeros(length)
    # unbuffered, in time order: the same additions a plain loop would make
    np.add.at(sums, idx, values)
    np.add.at(counts, idx, 1.0)
    seen = counts > 0
    P = np.empty_like(sums)
    P[seen] = sums[seen] / counts[seen, None]
    # node mean, also summed in time order
    P[~seen] = values.cumsum(axis=0)[-1] / len(values) if len(values) else 0.0
    return PeriodicEmbedding(P, kind, int((~seen).sum()))


def init_alternative(
    kind: str,
    strategy: str,
    seed: int,
    steps_per_day: int,
    num_nodes: int,
) -> PeriodicEmbedding:
    """Generic initializers used as baselines for the statistical prior."""
    length = period_length(kind, steps_per_day)
    rng = np.random.default_rng(seed)
    shape = (length, num_nodes)
    fan_in, fan_out = num_nodes, length
    if strategy == "zero":
        P = np.zeros(shape)
    elif strategy == "uniform":
        a = 1.0 / math.sqrt(fan_in)
        P = rng.uniform(-a, a, shape)
    elif strategy == "normal":
        P = rng.normal(0.0, 0.1, shape)
    elif strategy == "xavier":
        P = rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), shape)
    elif strategy == "he":
        P = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    else:
        raise ConfigError(f"unknown init strategy {strategy!r}; expected one of {INIT_STRATEGIES}", "init")
    return PeriodicEmbedding(P, kind)


def _xavier(rows, cols, dtype, generator):
    std = math.sqrt(2.0 / (rows + cols))
    return std * torch.randn(rows, cols, dtype=dtype, generator=generator)


class StaeParams(nn.Module):
    """GCN, temporal/spatial single-head attention and fusion weights.

    Initialized so the graph layer starts near the identity and the fusion
    averages the two attention branches.
    """

    def __init__(self, length: int, num_nodes: int, dtype=torch.float32, generator=None):
        super().__init__()
        n, L = num_nodes, length
        eye = torch.eye(n, dtype=dtype)
        self.w_gcn = nn.Parameter(eye + 0.01 * torch.randn(n, n, dtype=dtype, generator=generator))
        self.wq_t = nn.Parameter(_xavier(n, n, dtype, generator))
        self.wk_t = nn.Parameter(_xavier(n, n, dtype, generator))
        self.wv_t = nn.Parameter(_xavier(n, n, dtype, generator))
        self.wq_s = nn.Parameter(_xavier(L, L, dtype, generator))
        self.wk_s = nn.Parameter(_xavier(L, L, dtype, generator))
        self.wv_s = nn.Parameter(_xavier(L, L, dtype, generator))
        self.w_o = nn.Parameter(0.5 * torch.cat([eye, eye], dim=0))

    @property
    def length(self) -> int:
        return self.wq_s.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.w_gcn.shape[0]


def stae_forward(P: torch.Tensor, params: StaeParams, adj_norm: torch.Tensor, return_attention: bool = False):
    """Refine a period embedding ``P`` [L, N].

    ``H = relu(P Â W)``; temporal attention treats each period slot as a
    query (scores [L, L], scaled by sqrt(N)); spatial attention runs on
    ``H^T`` with node queries (scores [N, N], scaled by sqrt(L)). The two
    outputs are concatenated on the node axis and fused by ``W_o``.
    """
    L, n = P.shape
    if (L, n) != (params.length, params.num_nodes) or adj_norm.shape != (n, n):
        raise ShapeError(
            f"embedding {tuple(P.shape)}, adjacency {tuple(adj_norm.shape)} do not fit "
            f"encoder for L={params.length}, N={params.num_nodes}"
        )
    H = torch.relu(P @ adj_norm @ params.w_gcn)

    q, k, v = H @ params.wq_t, H @ params.wk_t, H @ params.wv_t
    attn_t = torch.softmax(q @ k.T / math.sqrt(n), dim=-1)
    H_t = attn_t @ v

    G = H.T
    qs, ks, vs = G @ params.wq_s, G @ params.wk_s, G @ params.wv_s
    attn_s = torch.softmax(qs @ ks.T / math.sqrt(L), dim=-1)
    H_s = (attn_s @ vs).T

    out = torch.cat([H_t, H_s], dim=1) @ params.w_o
    if return_attention:
        return out, attn_t, attn_s
    return out


def gather_hybrid(
    P_daily: torch.Tensor | None,
    P_weekly: torch.Tensor | None,
    tod_in,
    dow_in,
    tod_out,
    dow_out,
    steps_per_day: int,
) -> HybridPattern:
    """Look up refined embedding rows by calendar slot and sum the two scales.

    A missing (``None``) embedding contributes zero.
    """
    ref = P_daily if P_daily is not None else P_weekly
    if ref is None:
        raise ConfigError("at least one periodic embedding is required", "variant")

    def lookup(tod, dow):
        tod, dow = np.asarray(tod), np.asarray(dow)
        total = torch.zeros(tod.shape + (ref.shape[1],), dtype=ref.dtype)
        if P_daily is not None:
            total = total + P_daily[torch.as_tensor(index_daily(tod, steps_per_day))]
        if P_weekly is not None:
            total = total + P_weekly[torch.as_tensor(index_weekly(tod, dow, steps_per_day))]
        return total

    return HybridPattern(lookup(tod_in, dow_in), lookup(tod_out, dow_out))
