"""Prompt-centric graph adaptor: relevance scoring, ranking, and composition.

The adaptor runs self-attention over the coarse subgraph's node features and
emits per-node relevance (sigmoid of a mapping layer) plus ranking logits over
caption-order slots.  Refinement keeps nodes at or above the threshold, scales
the survivors by their relevance, orders them by a Hungarian assignment on the
ranking logits, and rebuilds the token sequence the caption stream attends to:
ordered node tokens followed by edge tokens, each tagged with a learned
node/edge type embedding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from scipy.optimize import linear_sum_assignment

from .attention import EncoderBlock
from .errors import InputError
from .graph import MAX_ENTITIES, N_NODE_LABELS, RelevanceTarget, SceneGraph

log = logging.getLogger(__name__)

_PRED_EMB_DIM = 16
_TIE_BREAK = 1e-9


@dataclass
class AdaptorOutput:
    updated: torch.Tensor  # (B, L, D) post-attention node features
    relevance: torch.Tensor  # (B, L) sigmoid scores
    relevance_logits: torch.Tensor  # (B, L)
    perm_logits: torch.Tensor  # (B, L, MAX_ENTITIES)
    valid: torch.Tensor  # (B, L) bool


class GraphEmbedder(nn.Module):
    """Node features: (shape, color) embedding ++ box coords -> D, plus a
    learned prompt flag so the ranking head can identify the centered node."""

    # Box coordinates live in [0, 1]; default-scale embedding init buries that
    # geometric signal under the label channels and the relevance/ranking heads
    # never recover it, so both embeddings start small and comparable to it.
    EMBEDDING_INIT_STD = 0.125

    def __init__(self, dim: int) -> None:
        super().__init__()
        label_dim = max(dim - 4, 8)
        self.label_emb = nn.Embedding(N_NODE_LABELS, label_dim)
        self.proj = nn.Linear(label_dim + 4, dim)
        self.prompt_emb = nn.Embedding(2, dim)
        nn.init.normal_(self.label_emb.weight, std=self.EMBEDDING_INIT_STD)
        nn.init.normal_(self.prompt_emb.weight, std=self.EMBEDDING_INIT_STD)

    def forward(self, subgraphs: list[SceneGraph], prompt_rows: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
        device = self.proj.weight.device
        dtype = self.proj.weight.dtype
        lmax = max(g.n_nodes for g in subgraphs)
        labels = torch.zeros((len(subgraphs), lmax), dtype=torch.long, device=device)
        boxes = torch.zeros((len(subgraphs), lmax, 4), dtype=dtype, device=device)
        valid = torch.zeros((len(subgraphs), lmax), dtype=torch.bool, device=device)
        flag = torch.zeros((len(subgraphs), lmax), dtype=torch.long, device=device)
        for b, (g, prow) in enumerate(zip(subgraphs, prompt_rows)):
            n = g.n_nodes
            if n == 0:
                raise InputError("subgraph has no valid nodes")
            if not 0 <= prow < n:
                raise InputError(f"prompt row {prow} out of range")
            labels[b, :n] = torch.from_numpy(g.labels[:n]).to(device)
            boxes[b, :n] = torch.from_numpy(g.boxes[:n]).to(device=device, dtype=dtype)
            valid[b, :n] = True
            flag[b, prow] = 1
        feats = self.proj(torch.cat([self.label_emb(labels), boxes], dim=-1))
        feats = feats + self.prompt_emb(flag)
        return feats * valid.unsqueeze(-1).to(dtype), valid


class PromptAdaptor(nn.Module):
    def __init__(self, dim: int, heads: int = 4, blocks: int = 2, ffn_mult: int = 4) -> None:
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads, ffn_mult) for _ in range(blocks))
        self.mapping = nn.Linear(dim, 1)
        self.perm_head = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, MAX_ENTITIES))

    def forward(self, features: torch.Tensor, valid: torch.Tensor) -> AdaptorOutput:
        if features.dim() != 3:
            raise InputError(f"expected (B, L, D) features, got {tuple(features.shape)}")
        if not valid.any(dim=1).all():
            raise InputError("a sample has no valid nodes")
        x = features
        for block in self.blocks:
            x = block(x, valid)
        logits = self.mapping(x).squeeze(-1)
        logits = logits.masked_fill(~valid, 0.0)
        return AdaptorOutput(
            updated=x,
            relevance=torch.sigmoid(logits) * valid.to(x.dtype),
            relevance_logits=logits,
            perm_logits=self.perm_head(x),
            valid=valid,
        )


def adaptor_loss(output: AdaptorOutput, scores: torch.Tensor) -> torch.Tensor:
    """BCE between predicted relevance and binary targets over valid nodes."""
    v = output.valid
    return F.binary_cross_entropy_with_logits(output.relevance_logits[v], scores[v].to(output.updated.dtype))


def ranking_loss(output: AdaptorOutput, targets: list[RelevanceTarget]) -> torch.Tensor:
    """Row-wise cross-entropy over score-1 rows, columns masked per sample."""
    losses = []
    for b, tgt in enumerate(targets):
        rows = np.nonzero(tgt.scores[: output.valid.shape[1]] == 1.0)[0]
        for row in rows:
            col = int(np.argmax(tgt.permutation[row]))
            logp = F.log_softmax(output.perm_logits[b, row, : tgt.n_entities], dim=-1)
            losses.append(-logp[col])
    if not losses:
        return output.perm_logits.sum() * 0.0
    return torch.stack(losses).mean()


def hungarian_order(perm_logits: torch.Tensor, members: list[int]) -> list[int]:
    """Order member rows by a Hungarian assignment onto caption slots.

    Cost is -log softmax over the first K' columns; a tiny index-based
    perturbation makes ties resolve toward lower node rows deterministically.
    """
    k = len(members)
    if k == 0:
        raise InputError("no members to order")
    if k > MAX_ENTITIES:
        raise InputError(f"{k} members exceed {MAX_ENTITIES} caption slots")
    if k == 1:
        return list(members)
    cost = -F.log_softmax(perm_logits[members, :k].detach().double(), dim=-1).cpu().numpy()
    cost = cost + _TIE_BREAK * (np.arange(k)[:, None] * k + np.arange(k)[None, :])
    rows, cols = linear_sum_assignment(cost)
    ordered: list[int] = [0] * k
    for r, c in zip(rows, cols):
        ordered[int(c)] = members[int(r)]
    return ordered


def propose_memberships(
    relevance: torch.Tensor,
    valid: torch.Tensor,
    prompt_row: int,
    k: int,
    theta: float,
) -> list[np.ndarray]:
    """Deterministic candidate sets: the threshold set, then single toggles of
    the lowest-margin nodes.  Every candidate contains the prompt node."""
    if k < 1:
        raise InputError("k must be >= 1")
    rel = relevance.detach().cpu().numpy()
    ok = valid.detach().cpu().numpy()
    base = (rel >= theta) & ok
    base[prompt_row] = True
    order = sorted(
        (abs(float(rel[r]) - theta), float(rel[r]), r)
        for r in np.nonzero(ok)[0]
        if r != prompt_row
    )
    candidates = [base.copy()]
    seen = {base.tobytes()}
    for _, _, row in order:
        if len(candidates) >= k:
            break
        cand = base.copy()
        cand[row] = not cand[row]
        if cand.tobytes() not in seen:
            seen.add(cand.tobytes())
            candidates.append(cand)
    return candidates


@dataclass
class ComposedGraph:
    tokens: torch.Tensor  # (B, T, D)
    valid: torch.Tensor  # (B, T) bool
    n_nodes: list[int]  # node-token count per sample (edge tokens follow)
    members: list[list[int]]  # ordered member rows per sample
    n_edges: list[int]


class GraphComposer(nn.Module):
    """Builds the refined token sequence: ordered, relevance-scaled node tokens
    followed by edge tokens among the survivors."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.order_emb = nn.Embedding(MAX_ENTITIES, dim)
        self.type_emb = nn.Embedding(2, dim)  # 0 = node, 1 = edge
        self.pred_emb = nn.Embedding(5, _PRED_EMB_DIM)
        self.edge_proj = nn.Linear(_PRED_EMB_DIM + 2 * dim, dim)

    def compose(
        self,
        updated: torch.Tensor,  # (L, D) one sample's adaptor features
        subgraph: SceneGraph,
        members: list[int],  # ordered rows
        scales: torch.Tensor,  # (K',)
    ) -> tuple[torch.Tensor, int, int]:
        device, dtype = updated.device, updated.dtype
        kk = len(members)
        pos_of = {row: i for i, row in enumerate(members)}
        idx = torch.tensor(members, dtype=torch.long, device=device)
        order = torch.arange(kk, dtype=torch.long, device=device)
        node_tok = updated[idx] * scales.unsqueeze(-1) + self.order_emb(order) + self.type_emb.weight[0]

        edges = []
        for j in range(subgraph.edges.shape[0]):
            if not subgraph.edge_valid[j]:
                continue
            s, p, t = (int(v) for v in subgraph.edges[j])
            if s in pos_of and t in pos_of:
                edges.append((pos_of[s], pos_of[t], p))
        edges.sort()
        if edges:
            s_idx = torch.tensor([e[0] for e in edges], dtype=torch.long, device=device)
            t_idx = torch.tensor([e[1] for e in edges], dtype=torch.long, device=device)
            p_idx = torch.tensor([e[2] for e in edges], dtype=torch.long, device=device)
            edge_in = torch.cat([self.pred_emb(p_idx).to(dtype), node_tok[s_idx], node_tok[t_idx]], dim=-1)
            edge_tok = self.edge_proj(edge_in) + self.type_emb.weight[1]
            tokens = torch.cat([node_tok, edge_tok], dim=0)
        else:
            tokens = node_tok
        return tokens, kk, len(edges)

    def compose_batch(
        self,
        updated: torch.Tensor,  # (B, L, D)
        subgraphs: list[SceneGraph],
        memberships: list[list[int]],
        scales: list[torch.Tensor],
    ) -> ComposedGraph:
        pieces = [
            self.compose(updated[b], subgraphs[b], memberships[b], scales[b])
            for b in range(len(subgraphs))
        ]
        tmax = max(p[0].shape[0] for p in pieces)
        b = len(pieces)
        tokens = updated.new_zeros((b, tmax, updated.shape[-1]))
        valid = torch.zeros((b, tmax), dtype=torch.bool, device=updated.device)
        for i, (tok, _, _) in enumerate(pieces):
            tokens[i, : tok.shape[0]] = tok
            valid[i, : tok.shape[0]] = True
        return ComposedGraph(
            tokens=tokens,
            valid=valid,
            n_nodes=[p[1] for p in pieces],
            members=list(memberships),
            n_edges=[p[2] for p in pieces],
        )


def refine_members(
    relevance: torch.Tensor,  # (L,)
    valid: torch.Tensor,  # (L,)
    prompt_row: int,
    theta: float,
) -> list[int]:
    """Threshold membership per the hard gate (equality survives); when every
    node is gated out, the prompt node is kept instead and the event logged."""
    rows = [r for r in range(valid.shape[0]) if bool(valid[r]) and float(relevance[r]) >= theta]
    if not rows:
        log.info("all nodes fell below theta=%.3f; keeping prompt row %d", theta, prompt_row)
        return [prompt_row]
    return rows
