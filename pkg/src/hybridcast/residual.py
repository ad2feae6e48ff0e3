"""Residual branch: the spatial-temporal frequency encoder and branch combination."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .spectral import CmlpParams, cmlp_forward, irfft_axis, rfft_axis

ENCODER_MODES = ("spectral", "mlp")


@dataclass
class ForecastOutput:
    Y_hat: torch.Tensor
    S_out: torch.Tensor
    R_out: torch.Tensor


class RealMlp(nn.Module):
    """Two-layer ReLU MLP that replaces the spectral passes in the re_mlp variant."""

    def __init__(self, dim: int, hidden: int, dtype=torch.float32, generator=None, scale: float = 0.02):
        super().__init__()
        self.w1 = nn.Parameter(scale * torch.randn(dim, hidden, dtype=dtype, generator=generator))
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=dtype))
        self.w2 = nn.Parameter(scale * torch.randn(hidden, dim, dtype=dtype, generator=generator))
        self.b2 = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, x):
        return torch.relu(torch.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2)


class StfeParams(nn.Module):
    def __init__(
        self,
        t_in: int,
        t_out: int,
        dim: int = 32,
        hidden: int = 64,
        mode: str = "spectral",
        dtype=torch.float32,
        generator=None,
    ):
        super().__init__()
        if mode not in ENCODER_MODES:
            raise ConfigError(f"unknown encoder mode {mode!r}", "mode")
        self.t_in, self.t_out, self.dim, self.mode = t_in, t_out, dim, mode
        self.embed_w = nn.Parameter(torch.randn(dim, dtype=dtype, generator=generator))
        self.embed_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
        block = CmlpParams if mode == "spectral" else RealMlp
        self.spatial = block(dim, hidden, dtype=dtype, generator=generator)
        self.temporal = block(dim, hidden, dtype=dtype, generator=generator)
        fan_in = t_in * dim
        bound = 1.0 / math.sqrt(fan_in)
        self.out_w = nn.Parameter(
            (2 * torch.rand(fan_in, t_out, dtype=dtype, generator=generator) - 1) * bound
        )
        self.out_b = nn.Parameter(torch.zeros(t_out, dtype=dtype))


def compute_residual(X: torch.Tensor, S_in: torch.Tensor) -> torch.Tensor:
    if X.shape != S_in.shape:
        raise ShapeError(f"input {tuple(X.shape)} and periodic pattern {tuple(S_in.shape)} differ")
    return X - S_in


def _spectral_pass(x: torch.Tensor, block: CmlpParams, axis: int) -> torch.Tensor:
    length = x.shape[axis]
    return irfft_axis(cmlp_forward(rfft_axis(x, axis), block), axis, length)


def embed_residual(R_in: torch.Tensor, params: StfeParams) -> torch.Tensor:
    return R_in.unsqueeze(-1) * params.embed_w + params.embed_b


def project(Z: torch.Tensor, params: StfeParams) -> torch.Tensor:
    """[B, T1, N, D] -> [B, T2, N] with one dense map shared by all nodes."""
    B, T1, N, D = Z.shape
    flat = Z.permute(0, 2, 1, 3).reshape(B, N, T1 * D)
    return (flat @ params.out_w + params.out_b).transpose(1, 2)


def stfe_forward(R_in: torch.Tensor, params: StfeParams) -> torch.Tensor:
    """Residual [B, T1, N] -> forecast residual [B, T2, N].

    Embed each value into D channels, run FFT -> C-MLP -> IFFT over the node
    axis and then over the time axis, add the embedding back and project the
    flattened (time, channel) block of every node onto the horizon.
    """
    if R_in.ndim != 3 or R_in.shape[1] != params.t_in:
        raise ShapeError(f"residual must be [B, {params.t_in}, N], got {tuple(R_in.shape)}")
    emb = embed_residual(R_in, params)
    if params.mode == "spectral":
        r_s = _spectral_pass(emb, params.spatial, axis=2)
        r_t = _spectral_pass(r_s, params.temporal, axis=1)
    else:
        r_t = params.temporal(params.spatial(emb))
    return project(r_t + emb, params)


def combine(S_out: torch.Tensor, R_out: torch.Tensor) -> ForecastOutput:
    if S_out.shape != R_out.shape:
        raise ShapeError(f"periodic {tuple(S_out.shape)} and residual {tuple(R_out.shape)} outputs differ")
    return ForecastOutput(S_out + R_out, S_out, R_out)
