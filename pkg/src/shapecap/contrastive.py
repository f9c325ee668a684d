"""Cross-modal alignment losses between mask and word embeddings.

Each training sample yields one unit-normalized embedding per predicted
mask (``m``) and per caption noun token (``s``), both projected into a
shared joint space.  Two losses pull matched pairs together:

* the *intra* loss contrasts, inside one sample, every mask against all
  noun tokens and every noun token against all masks, with matched
  pairs as positives and a learnable temperature;
* the *inter* loss first collapses each (masks, words) pair to a scalar
  global match score — a mask-softmax-weighted average of dot products
  — then applies a symmetric InfoNCE over the batch matrix of scores
  with the diagonal as positives.

By default every denominator includes the positive term, which keeps
both losses non-negative and defined even when a sample has a single
entity.  ``strict=True`` switches to negatives-only denominators and
raises :class:`InputError` when a row has no negative to contrast with.
"""

from __future__ import annotations

import logging

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputError

__all__ = [
    "MECLHead",
    "intra_loss",
    "global_match",
    "inter_loss",
    "mecl_batch",
]

log = logging.getLogger(__name__)

D_JOINT = 128
TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 1.0


class MECLHead(nn.Module):
    """Projections into the joint space plus the shared temperature.

    ``embed_masks`` accepts either pooled pixel embeddings or entity
    query features (both live in the model width); ``embed_words``
    takes caption-stream features at noun positions.  Outputs are
    L2-normalized rows in a ``d_joint``-dimensional space.
    """

    def __init__(self, dim: int = 64, d_joint: int = D_JOINT) -> None:
        super().__init__()
        self.proj_m = nn.Linear(dim, d_joint)
        self.proj_s = nn.Linear(dim, d_joint)
        self.tau = nn.Parameter(torch.tensor(TAU_INIT))

    @property
    def tau_clamped(self) -> torch.Tensor:
        return self.tau.clamp(TAU_MIN, TAU_MAX)

    def embed_masks(self, features: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.proj_m(features), dim=-1)

    def embed_words(self, features: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.proj_s(features), dim=-1)


def _side_loss(
    sims: torch.Tensor, positives: torch.Tensor, strict: bool, what: str
) -> torch.Tensor:
    """Sum over rows of the mean positive InfoNCE term.

    ``sims`` is (R, C) similarity/temperature, ``positives`` a (R, C)
    boolean map.  Rows without positives are skipped with a log message.
    """
    total = sims.new_zeros(())
    for r in range(sims.shape[0]):
        pos = positives[r]
        if not bool(pos.any()):
            log.info("%s %d has no positive pair; skipped", what, r)
            continue
        if strict:
            if bool(pos.all()):
                raise InputError(f"{what} {r} has no negative to contrast with")
            denom = torch.logsumexp(sims[r][~pos], dim=0)
        else:
            denom = torch.logsumexp(sims[r], dim=0)
        total = total + (denom - sims[r][pos]).mean()
    return total


def intra_loss(
    mask_emb: torch.Tensor,
    word_emb: torch.Tensor,
    positives: torch.Tensor,
    tau: torch.Tensor,
    strict: bool = False,
) -> torch.Tensor:
    """Within-sample symmetric contrastive loss.

    ``mask_emb`` is (N, d), ``word_emb`` (L_w, d), and ``positives`` a
    boolean (N, L_w) map marking matched pairs.  Both directions sum
    over rows, averaging over each row's positive set.
    """
    if mask_emb.ndim != 2 or word_emb.ndim != 2:
        raise InputError("expected (N, d) mask and (L_w, d) word embeddings")
    if mask_emb.shape[0] < 1 or word_emb.shape[0] < 1:
        raise InputError("need at least one mask and one word")
    if positives.shape != (mask_emb.shape[0], word_emb.shape[0]):
        raise InputError("positive map shape mismatch")
    sims = mask_emb @ word_emb.T / tau
    loss_m = _side_loss(sims, positives, strict, "mask")
    loss_s = _side_loss(sims.T, positives.T, strict, "word")
    return loss_m + loss_s


def global_match(mask_emb: torch.Tensor, word_emb: torch.Tensor) -> torch.Tensor:
    """Scalar match score between one sample's masks and words.

    For every word, dot products against all masks are softmax-weighted
    (over masks, no temperature) and averaged; the score is the mean
    over words.
    """
    if mask_emb.ndim != 2 or word_emb.ndim != 2:
        raise InputError("expected (N, d) mask and (L_w, d) word embeddings")
    if mask_emb.shape[0] < 1 or word_emb.shape[0] < 1:
        raise InputError("need at least one mask and one word")
    sims = mask_emb @ word_emb.T  # (N, L_w)
    rho = sims.softmax(dim=0)
    return (rho * sims).sum(0).mean()


def inter_loss(
    scores: torch.Tensor, tau: torch.Tensor, strict: bool = False
) -> torch.Tensor:
    """Symmetric InfoNCE over a (B, B) global-match matrix.

    ``scores[a, b]`` pairs sample ``a``'s masks with sample ``b``'s
    words; diagonal entries are the positives.  A batch of fewer than
    two pairs carries no contrast and scores zero.
    """
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise InputError(f"expected square score matrix, got {tuple(scores.shape)}")
    b = scores.shape[0]
    if b < 2:
        log.info("inter loss skipped: batch of %d has no negatives", b)
        return scores.new_zeros(())
    s = scores / tau
    diag = s.diagonal()
    if strict:
        off = ~torch.eye(b, dtype=torch.bool, device=s.device)
        row = torch.stack([torch.logsumexp(s[i][off[i]], 0) for i in range(b)])
        col = torch.stack([torch.logsumexp(s[:, i][off[:, i]], 0) for i in range(b)])
    else:
        row = torch.logsumexp(s, dim=1)
        col = torch.logsumexp(s, dim=0)
    return (row - diag).mean() + (col - diag).mean()


def mecl_batch(
    mask_embs: list[torch.Tensor],
    word_embs: list[torch.Tensor],
    positive_maps: list[torch.Tensor],
    tau: torch.Tensor,
    strict: bool = False,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Full alignment loss over a batch of per-sample embeddings.

    Returns the scalar ``intra + inter`` (intra averaged over samples)
    together with the two component values for logging.
    """
    if not (len(mask_embs) == len(word_embs) == len(positive_maps)):
        raise InputError("batch lists must have equal length")
    if not mask_embs:
        raise InputError("empty batch")
    intra = torch.stack(
        [
            intra_loss(m, s, p, tau, strict)
            for m, s, p in zip(mask_embs, word_embs, positive_maps)
        ]
    ).mean()
    b = len(mask_embs)
    scores = torch.stack(
        [
            torch.stack([global_match(mask_embs[a], word_embs[c]) for c in range(b)])
            for a in range(b)
        ]
    )
    inter = inter_loss(scores, tau, strict)
    total = intra + inter
    return total, {"intra": float(intra.detach()), "inter": float(inter.detach())}
