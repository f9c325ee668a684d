"""Two-stream transformer that denoises caption bits under graph guidance.

The network carries two token sequences side by side: the noisy caption
stream (one token per caption position, built from analog bit vectors)
and the graph stream (node and edge tokens from
:class:`~shapecap.adaptor.GraphComposer`).  Each block updates both
streams; the caption stream attends into the graph stream and vice
versa, so by the final block every caption token has seen the scene
structure and every graph token has seen the caption under construction.

A block updates the caption stream as

    a = self_attention(norm(x))                 # no residual here
    u = ffn(norm(a + cross_attention(norm(a), norm(g), norm(g))))
    out = proj(u + x)

where ``g`` is the *input* of the graph stream to the same block (both
streams read each other's block input, so the update order between the
two streams does not matter).  The graph stream applies the mirrored
update.  ``proj`` is a per-stream linear output map.

Time conditioning enters once at the bottom: a sinusoidal embedding of
the diffusion time is mapped through a small MLP and added to every
caption token together with a learned position embedding.
"""

from __future__ import annotations

import torch
from torch import nn

from .attention import FeedForward, MultiHeadAttention, TimeEmbedding
from .diffusion import N_BITS
from .errors import InputError

__all__ = ["StreamBlock", "BimodalDenoiser"]


class StreamBlock(nn.Module):
    """One half of a bimodal block: updates a single stream.

    Applies masked self-attention (without residual), cross-attention
    into the other stream's block input, a feed-forward layer, and a
    linear output projection over the residual sum with the block input.
    When ``cross_attention`` is false the cross-attention sublayer is
    replaced by the identity on its query, so the other stream cannot
    influence this one.
    """

    def __init__(self, dim: int, heads: int, cross_attention: bool = True) -> None:
        super().__init__()
        self.cross_attention = cross_attention
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm_query = nn.LayerNorm(dim)
        self.norm_context = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self,
        x: torch.Tensor,
        x_valid: torch.Tensor,
        context: torch.Tensor,
        context_valid: torch.Tensor,
    ) -> torch.Tensor:
        """Update stream ``x`` reading from ``context`` (both block inputs)."""
        x_n = self.norm_self(x)
        attended = self.self_attn(
            x_n, x_n, x_n, key_valid=x_valid, query_valid=x_valid
        )
        if self.cross_attention:
            crossed = self.cross_attn(
                self.norm_query(attended),
                self.norm_context(context),
                self.norm_context(context),
                key_valid=context_valid,
                query_valid=x_valid,
            )
        else:
            crossed = attended
        u = self.ffn(self.norm_ffn(attended + crossed))
        return self.out_proj(u + x)


class BimodalDenoiser(nn.Module):
    """Stack of paired stream blocks over caption and graph tokens.

    Parameters
    ----------
    dim:
        Shared token width of both streams.
    heads:
        Attention heads in every attention sublayer.
    depth:
        Number of paired blocks.
    max_len:
        Longest caption the position table supports.
    n_bits:
        Width of the analog bit vectors fed to the caption stream.
    cross_attention:
        When false, both streams run without cross-attention (each
        stream becomes an independent transformer).
    """

    def __init__(
        self,
        dim: int = 64,
        heads: int = 4,
        depth: int = 6,
        max_len: int = 20,
        n_bits: int = N_BITS,
        cross_attention: bool = True,
    ) -> None:
        super().__init__()
        if dim % heads:
            raise InputError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.max_len = max_len
        self.n_bits = n_bits
        self.bit_embed = nn.Linear(n_bits, dim)
        self.pos_embed = nn.Embedding(max_len, dim)
        self.time_embed = TimeEmbedding(dim)
        self.caption_blocks = nn.ModuleList(
            StreamBlock(dim, heads, cross_attention) for _ in range(depth)
        )
        self.graph_blocks = nn.ModuleList(
            StreamBlock(dim, heads, cross_attention) for _ in range(depth)
        )

    def embed_caption(
        self, bits: torch.Tensor, t: torch.Tensor
    ) -> torch.Tensor:
        """Map analog bits (B, L, n_bits) to caption tokens (B, L, dim)."""
        if bits.ndim != 3 or bits.shape[-1] != self.n_bits:
            raise InputError(f"expected (B, L, {self.n_bits}) bits, got {tuple(bits.shape)}")
        if bits.shape[1] > self.max_len:
            raise InputError(
                f"caption length {bits.shape[1]} exceeds max_len {self.max_len}"
            )
        positions = torch.arange(bits.shape[1], device=bits.device)
        tokens = self.bit_embed(bits) + self.pos_embed(positions)
        return tokens + self.time_embed(t.to(tokens.dtype)).unsqueeze(1)

    def forward(
        self,
        bits: torch.Tensor,
        t: torch.Tensor,
        caption_valid: torch.Tensor,
        graph_tokens: torch.Tensor,
        graph_valid: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run both streams; returns final (caption, graph) features.

        ``bits`` is (B, L, n_bits) analog bit input, ``t`` is (B,)
        diffusion times in [0, 1], ``graph_tokens`` is (B, G, dim) from
        the composer, and the valid masks flag real positions/tokens.
        """
        if t.ndim != 1 or t.shape[0] != bits.shape[0]:
            raise InputError(f"expected ({bits.shape[0]},) times, got {tuple(t.shape)}")
        if graph_tokens.shape[1] < 1 or not bool(graph_valid.any(dim=1).all()):
            raise InputError("every sample needs at least one valid graph token")
        f_c = self.embed_caption(bits, t)
        f_g = graph_tokens
        for cap_block, graph_block in zip(self.caption_blocks, self.graph_blocks):
            new_c = cap_block(f_c, caption_valid, f_g, graph_valid)
            new_g = graph_block(f_g, graph_valid, f_c, caption_valid)
            f_c, f_g = new_c, new_g
        return f_c, f_g
