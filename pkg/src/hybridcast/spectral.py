"""Real-input FFT along an axis and the complex-valued two-layer MLP.

The forward transform is unscaled and the inverse carries the 1/M factor.
Both are backed by ``torch.fft`` so gradients flow through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeError


@dataclass
class ComplexTensor:
    re: torch.Tensor
    im: torch.Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(f"real part {tuple(self.re.shape)} != imaginary part {tuple(self.im.shape)}")

    @property
    def shape(self):
        return self.re.shape

    @classmethod
    def from_complex(cls, z: torch.Tensor) -> "ComplexTensor":
        return cls(z.real, z.imag)

    def to_complex(self) -> torch.Tensor:
        return torch.complex(self.re, self.im)

    def __add__(self, other: "ComplexTensor") -> "ComplexTensor":
        return ComplexTensor(self.re + other.re, self.im + other.im)


def rfft_axis(x: torch.Tensor, axis: int) -> ComplexTensor:
    """Half-spectrum DFT: ``floor(M/2) + 1`` bins along ``axis``."""
    return ComplexTensor.from_complex(torch.fft.rfft(x, dim=axis))


def irfft_axis(spec: ComplexTensor, axis: int, out_len: int) -> torch.Tensor:
    """Inverse of :func:`rfft_axis`; returns a real tensor of length ``out_len``.

    Imaginary parts of the DC bin (and of the Nyquist bin for even lengths)
    do not contribute, as for any real-output inverse transform.
    """
    bins = spec.shape[axis]
    if out_len < 1 or bins != out_len // 2 + 1:
        raise ShapeError(f"{bins} frequency bins cannot reconstruct a length-{out_len} signal")
    return torch.fft.irfft(spec.to_complex(), n=out_len, dim=axis)


class CmlpParams(nn.Module):
    """Weights of the complex MLP: real/imaginary parts kept as separate tensors."""

    def __init__(self, dim: int, hidden: int, dtype=torch.float32, generator=None, scale: float = 0.02):
        super().__init__()
        self.dim, self.hidden = dim, hidden

        def rand(*shape):
            return nn.Parameter(scale * torch.randn(*shape, dtype=dtype, generator=generator))

        def zeros(*shape):
            return nn.Parameter(torch.zeros(*shape, dtype=dtype))

        self.w1_r, self.w1_i = rand(dim, hidden), rand(dim, hidden)
        self.b1_r, self.b1_i = zeros(hidden), zeros(hidden)
        self.w2_r, self.w2_i = rand(hidden, dim), rand(hidden, dim)
        self.b2_r, self.b2_i = zeros(dim), zeros(dim)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return cmlp_forward(x, self)


def complex_linear(x: ComplexTensor, w_r, w_i, b_r=None, b_i=None) -> ComplexTensor:
    """``(re + j im) (w_r + j w_i) + (b_r + j b_i)`` over the last axis."""
    re = x.re @ w_r - x.im @ w_i
    im = x.im @ w_r + x.re @ w_i
    if b_r is not None:
        re = re + b_r
        im = im + b_i
    return ComplexTensor(re, im)


def cmlp_forward(x: ComplexTensor, params: CmlpParams) -> ComplexTensor:
    if x.shape[-1] != params.w1_r.shape[0]:
        raise ShapeError(f"C-MLP expects last axis {params.w1_r.shape[0]}, got {x.shape[-1]}")
    h = complex_linear(x, params.w1_r, params.w1_i, params.b1_r, params.b1_i)
    h = ComplexTensor(torch.relu(h.re), torch.relu(h.im))
    out = complex_linear(h, params.w2_r, params.w2_i, params.b2_r, params.b2_i)
    return ComplexTensor(torch.relu(out.re), torch.relu(out.im))
