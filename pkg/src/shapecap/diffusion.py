"""Analog-bit text diffusion: codec, cosine noise schedule, DDIM-style sampler.

Token ids are encoded as +-1 analog bits (MSB first).  The denoiser predicts
the clean bit array x0 directly; training draws t uniformly from [0, 1] and the
deterministic reverse pass walks a fixed step grid, thresholding bits at zero
after the final step.
"""

from __future__ import annotations

import math
from typing import Callable

import torch

from .errors import InputError, SamplingError

N_BITS = 6  # ceil(log2 vocab) for the 64-symbol codebook
_COSINE_S = 0.008
DEFAULT_STEPS = 50


def n_bits_for(vocab_size: int) -> int:
    if vocab_size < 2:
        raise InputError("vocab must hold at least two symbols")
    return int(math.ceil(math.log2(vocab_size)))


def encode_bits(tokens: torch.Tensor, n_bits: int = N_BITS) -> torch.Tensor:
    """(...,) int64 ids -> (..., n_bits) float analog bits in {-1, +1}, MSB first."""
    if tokens.min() < 0 or tokens.max() >= 2**n_bits:
        raise InputError(f"token ids must fit in {n_bits} bits")
    shifts = torch.arange(n_bits - 1, -1, -1, device=tokens.device)
    bits = (tokens.unsqueeze(-1) >> shifts) & 1
    return bits.float() * 2.0 - 1.0


def decode_bits(x: torch.Tensor) -> torch.Tensor:
    """(..., n_bits) analog bits -> (...,) int64 ids; thresholds at zero."""
    n_bits = x.shape[-1]
    bits = (x > 0).long()
    shifts = torch.arange(n_bits - 1, -1, -1, device=x.device)
    return (bits << shifts).sum(dim=-1)


def gamma(t: torch.Tensor | float) -> torch.Tensor:
    """Cosine signal level; gamma(0) >= 0.999, gamma(1) <= 0.001, decreasing."""
    tt = torch.as_tensor(t, dtype=torch.float64)
    if (tt < 0).any() or (tt > 1).any():
        raise InputError("t must lie in [0, 1]")
    return torch.cos((tt + _COSINE_S) / (1.0 + _COSINE_S) * math.pi / 2.0) ** 2


def q_sample(x0: torch.Tensor, t: torch.Tensor | float, eps: torch.Tensor) -> torch.Tensor:
    """Forward corruption x_t = sqrt(g) x0 + sqrt(1-g) eps; t scalar or per-batch."""
    g = gamma(t).to(x0.dtype)
    while g.dim() < x0.dim():
        g = g.unsqueeze(-1)
    return torch.sqrt(g) * x0 + torch.sqrt(1.0 - g) * eps


def bit_loss(pred: torch.Tensor, x0: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """MSE between predicted and clean bits over valid token positions.

    pred, x0: (B, L, n_bits); valid: (B, L) bool.  The mean runs over valid
    positions times bit lanes.
    """
    if not valid.any():
        raise InputError("no valid positions")
    err = (pred - x0) ** 2
    w = valid.to(pred.dtype).unsqueeze(-1)
    return (err * w).sum() / (w.sum() * pred.shape[-1])


def sample_caption(
    denoiser: Callable[[torch.Tensor, float], torch.Tensor],
    length: int,
    *,
    max_len: int,
    n_bits: int = N_BITS,
    steps: int = DEFAULT_STEPS,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic DDIM-style reverse pass.

    `denoiser(x_t, t)` maps the (1, max_len, n_bits) noisy bits at scalar time t
    to predicted x0 (the conditioning graph is closed over by the caller).
    Returns (token ids (length,), final bit array (max_len, n_bits)).
    """
    if steps < 1:
        raise InputError("steps must be >= 1")
    if not 1 <= length <= max_len:
        raise InputError(f"length must lie in [1, {max_len}]")
    x = torch.randn((1, max_len, n_bits), generator=generator, dtype=dtype)
    times = torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64)
    for i in range(steps):
        t_now, t_next = float(times[i]), float(times[i + 1])
        x0_hat = denoiser(x, t_now).clamp(-1.0, 1.0)
        if not torch.isfinite(x0_hat).all():
            raise SamplingError(i, "denoiser produced non-finite values")
        g_now = float(gamma(t_now))
        g_next = float(gamma(t_next))
        eps_hat = (x - math.sqrt(g_now) * x0_hat) / math.sqrt(1.0 - g_now)
        x = math.sqrt(g_next) * x0_hat + math.sqrt(1.0 - g_next) * eps_hat
        if not torch.isfinite(x).all():
            raise SamplingError(i, "reverse update produced non-finite state")
    tokens = decode_bits(x[0, :length])
    return tokens, x[0]
