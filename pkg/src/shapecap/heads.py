"""Output heads that turn stream features into words, bits, and masks.

The image pathway is a small four-stage convolutional encoder (each
stage halves resolution) followed by a feature-pyramid decoder that
fuses the stages top-down into one dense *pixel embedding* map at half
the input resolution.  Mask logits are plain dot products between a
projected query vector and every pixel embedding — no bias term — and
are upsampled back to full resolution.

The caption head maps denoised caption features to word logits; the bit
head maps them to analog bit estimates for the diffusion loss.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .data import VOCAB_SIZE
from .diffusion import N_BITS
from .errors import InputError

__all__ = [
    "ImageEncoder",
    "PixelDecoder",
    "CaptionHead",
    "BitHead",
    "MaskHead",
    "word_cross_entropy",
    "caption_log_prob",
    "dice_loss",
    "mask_loss",
    "pooled_mask_embedding",
]

DICE_SMOOTH = 1.0


class _ConvStage(nn.Module):
    """Stride-2 downsampling conv followed by a refining 3x3 conv."""

    def __init__(self, c_in: int, c_out: int) -> None:
        super().__init__()
        groups = 4 if c_out % 4 == 0 else 1
        # conv biases are omitted: the group norm that follows each conv
        # subtracts them right back out, leaving dead parameters
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(groups, c_out),
            nn.SiLU(),
            nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
            nn.GroupNorm(groups, c_out),
            nn.SiLU(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ImageEncoder(nn.Module):
    """Four-stage conv encoder; returns features at strides 2/4/8/16."""

    def __init__(
        self, channels: tuple[int, ...] = (16, 32, 64, 64), in_channels: int = 3
    ) -> None:
        super().__init__()
        if len(channels) != 4:
            raise InputError(f"expected 4 stage widths, got {len(channels)}")
        self.channels = tuple(channels)
        widths = (in_channels, *channels)
        self.stages = nn.ModuleList(
            _ConvStage(widths[i], widths[i + 1]) for i in range(4)
        )

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        if image.ndim != 4:
            raise InputError(f"expected (B, C, H, W) image, got {tuple(image.shape)}")
        if image.shape[-1] % 16 or image.shape[-2] % 16:
            raise InputError(f"image sides must be multiples of 16, got {tuple(image.shape[-2:])}")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class PixelDecoder(nn.Module):
    """Top-down pyramid fusion into one map at half input resolution."""

    def __init__(self, channels: tuple[int, ...], dim: int = 64) -> None:
        super().__init__()
        self.dim = dim
        self.laterals = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in channels)
        self.fuses = nn.ModuleList(
            nn.Conv2d(dim, dim, 3, padding=1) for _ in channels[:-1]
        )

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        if len(feats) != len(self.laterals):
            raise InputError(
                f"expected {len(self.laterals)} pyramid levels, got {len(feats)}"
            )
        x = self.laterals[-1](feats[-1])
        for lateral, fuse, feat in zip(
            reversed(self.laterals[:-1]), reversed(self.fuses), reversed(feats[:-1])
        ):
            x = F.interpolate(x, scale_factor=2.0, mode="nearest") + lateral(feat)
            x = fuse(x)
        return x


class CaptionHead(nn.Module):
    """Caption features -> word logits."""

    def __init__(self, dim: int = 64, vocab_size: int = VOCAB_SIZE) -> None:
        super().__init__()
        self.proj = nn.Linear(dim, vocab_size)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.proj(features)


class BitHead(nn.Module):
    """Caption features -> analog bit estimates in (-inf, inf)."""

    def __init__(self, dim: int = 64, n_bits: int = N_BITS) -> None:
        super().__init__()
        self.proj = nn.Linear(dim, n_bits)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.proj(features)


class MaskHead(nn.Module):
    """Dot-product mask logits between projected queries and pixels.

    ``forward`` maps queries (B, K, dim) and pixel embeddings
    (B, pixel_dim, h, w) to mask logits (B, K, 2h, 2w): the logit of
    query k at pixel p is the plain inner product of the projected
    query with that pixel's embedding, upsampled bilinearly.
    """

    def __init__(self, dim: int = 64, pixel_dim: int = 64) -> None:
        super().__init__()
        self.query_proj = nn.Linear(dim, pixel_dim)

    def forward(self, queries: torch.Tensor, pixel_embed: torch.Tensor) -> torch.Tensor:
        if queries.ndim != 3 or pixel_embed.ndim != 4:
            raise InputError("expected (B, K, dim) queries and (B, C, h, w) pixels")
        if queries.shape[0] != pixel_embed.shape[0]:
            raise InputError("query/pixel batch mismatch")
        q = self.query_proj(queries)
        logits = torch.einsum("bkc,bchw->bkhw", q, pixel_embed)
        return F.interpolate(
            logits, scale_factor=2.0, mode="bilinear", align_corners=False
        )


def word_cross_entropy(
    logits: torch.Tensor, tokens: torch.Tensor, valid: torch.Tensor
) -> torch.Tensor:
    """Mean cross-entropy of word logits over valid caption positions."""
    if logits.shape[:2] != tokens.shape or tokens.shape != valid.shape:
        raise InputError("logit/token/valid shape mismatch")
    if not valid.any():
        raise InputError("no valid caption positions")
    return F.cross_entropy(logits[valid], tokens[valid])


def caption_log_prob(
    logits: torch.Tensor, tokens: torch.Tensor, valid: torch.Tensor
) -> torch.Tensor:
    """Per-sample mean log-probability of ``tokens`` under the word head.

    Used to rank generated candidates; returns (B,).
    """
    if logits.shape[:2] != tokens.shape or tokens.shape != valid.shape:
        raise InputError("logit/token/valid shape mismatch")
    logp = logits.log_softmax(-1).gather(-1, tokens.unsqueeze(-1)).squeeze(-1)
    masked = logp * valid.to(logp.dtype)
    counts = valid.sum(-1).clamp(min=1).to(logp.dtype)
    return masked.sum(-1) / counts


def dice_loss(
    logits: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH
) -> torch.Tensor:
    """Per-mask soft Dice loss, (N, H, W) -> (N,)."""
    if logits.shape != target.shape:
        raise InputError("logit/target shape mismatch")
    p = torch.sigmoid(logits).flatten(1)
    g = target.to(p.dtype).flatten(1)
    overlap = (p * g).sum(1)
    return 1.0 - (2.0 * overlap + smooth) / (p.sum(1) + g.sum(1) + smooth)


def mask_loss(pred_logits: torch.Tensor, gt_masks: torch.Tensor) -> torch.Tensor:
    """Position-matched Dice+BCE over one sample's masks.

    ``pred_logits`` is (K_pred, H, W) and ``gt_masks`` (K_gt, H, W); row
    i is scored against row i.  Rows missing on either side are padded —
    a ground-truth mask with no prediction is scored against all-zero
    logits, and a surplus prediction against an empty mask — so dropping
    an entity is never free.  Returns mean(dice + bce) over rows.
    """
    if pred_logits.ndim != 3 or gt_masks.ndim != 3:
        raise InputError("expected (K, H, W) logits and masks")
    if pred_logits.shape[1:] != gt_masks.shape[1:]:
        raise InputError("prediction/ground-truth resolution mismatch")
    k = max(pred_logits.shape[0], gt_masks.shape[0])
    if k == 0:
        return pred_logits.new_zeros(())
    if pred_logits.shape[0] < k:
        pad = pred_logits.new_zeros((k - pred_logits.shape[0], *pred_logits.shape[1:]))
        pred_logits = torch.cat([pred_logits, pad])
    gt = gt_masks.to(pred_logits.dtype)
    if gt.shape[0] < k:
        pad = pred_logits.new_zeros((k - gt.shape[0], *gt.shape[1:]))
        gt = torch.cat([gt, pad])
    bce = F.binary_cross_entropy_with_logits(pred_logits, gt, reduction="none")
    return (dice_loss(pred_logits, gt) + bce.flatten(1).mean(1)).mean()


def pooled_mask_embedding(pixel_embed: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean pixel embedding inside ``mask``, (C, h, w) x (H, W) -> (C,).

    The mask is given at full resolution and reduced to the embedding
    grid by area averaging; an empty mask raises :class:`InputError`.
    """
    if pixel_embed.ndim != 3 or mask.ndim != 2:
        raise InputError("expected (C, h, w) pixels and (H, W) mask")
    h, w = pixel_embed.shape[-2:]
    weights = F.adaptive_avg_pool2d(mask[None, None].to(pixel_embed.dtype), (h, w))[0, 0]
    total = weights.sum()
    if float(total) <= 0.0:
        raise InputError("mask selects no pixels")
    return (pixel_embed * weights).sum((-1, -2)) / total
