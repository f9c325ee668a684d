"""Full network assembly: training forward pass and box-prompted inference.

``ShapeCapModel`` wires the pieces end to end.  Training runs teacher
forced: the composed graph uses the ground-truth member set and caption
order, while the node-token scales stay live predictions so the
relevance head keeps receiving gradient from the generation losses.
Inference recovers the scene from pixels, proposes up to ``k`` member
sets around the prompted object, and denoises one caption per proposal,
reading each entity's mask off the final graph-stream features.

The caption template covers at most ``MAX_RELATIONS_MENTIONED``
relations, so member sets are capped at that many neighbours plus the
prompted node; larger proposals are truncated (by descending relevance
when relevance is in play, by ascending row otherwise).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .adaptor import (
    AdaptorOutput,
    GraphComposer,
    GraphEmbedder,
    PromptAdaptor,
    adaptor_loss,
    hungarian_order,
    propose_memberships,
    ranking_loss,
)
from .bimodal import BimodalDenoiser
from .contrastive import MECLHead, mecl_batch
from .data import (
    MAX_CAPTION_LEN,
    MAX_RELATIONS_MENTIONED,
    VOCAB_SIZE,
    Sample,
    caption_length,
    detokenize,
    noun_positions,
    recover_objects,
    render_scene,
    scene_from_image,
)
from .diffusion import DEFAULT_STEPS, N_BITS, bit_loss, encode_bits, q_sample, sample_caption
from .errors import InputError
from .graph import MAX_ENTITIES, RelevanceTarget, SceneGraph, box_iou, coarse_subgraph, graph_from_scene, relevance_target
from .heads import (
    BitHead,
    CaptionHead,
    ImageEncoder,
    MaskHead,
    PixelDecoder,
    caption_log_prob,
    mask_loss,
    pooled_mask_embedding,
    word_cross_entropy,
)

log = logging.getLogger(__name__)

IOU_MATCH_THRESHOLD = 0.5
RELEVANCE_THETA = 0.5
MAX_MEMBERS = MAX_RELATIONS_MENTIONED + 1  # prompted node + mentioned neighbours

__all__ = [
    "PreparedSample",
    "Batch",
    "Candidate",
    "ShapeCapModel",
    "prepare_sample",
    "collate",
]


@dataclass(eq=False)
class PreparedSample:
    """One dataset sample converted to model-ready tensors and targets."""

    image: torch.Tensor  # (3, H, W) float32 in [0, 1]
    subgraph: SceneGraph  # prompt-centered coarse subgraph (with masks)
    prompt_row: int
    target: RelevanceTarget
    tokens: torch.Tensor  # (L,) long
    noun_pos: list[int]  # caption position of each noun, caption order
    noun_rows: list[int]  # subgraph row of each noun's entity, caption order
    gt_masks: torch.Tensor  # (K, H, W) float32, caption entity order


@dataclass(eq=False)
class Batch:
    images: torch.Tensor  # (B, 3, H, W)
    graphs: list[SceneGraph]
    prompt_rows: list[int]
    targets: list[RelevanceTarget]
    tokens: torch.Tensor  # (B, Lmax) long, zero padded
    token_valid: torch.Tensor  # (B, Lmax) bool
    noun_pos: list[list[int]]
    noun_rows: list[list[int]]
    gt_masks: list[torch.Tensor]


@dataclass(eq=False)
class Candidate:
    """One aligned caption/mask proposal for a prompt."""

    tokens: list[int]
    caption: str
    masks: np.ndarray  # (K, H, W) bool, one per mentioned entity
    mask_word_positions: list[int]  # caption position each mask aligns to
    mask_confidences: list[float]
    score: float  # mean per-token log-probability
    members: list[int] = field(default_factory=list)  # subgraph rows, slot order


def prepare_sample(sample: Sample, iou_threshold: float = IOU_MATCH_THRESHOLD) -> PreparedSample:
    """Render, build the prompt subgraph, and freeze the training targets."""
    scene = sample.scene
    image = torch.from_numpy(render_scene(scene).copy()).permute(2, 0, 1).float() / 255.0
    full = graph_from_scene(scene, include_masks=True)
    center_row = full.row_of(sample.caption.center_object)
    sub = coarse_subgraph(full, center_row)
    prompt_row = sub.row_of(sample.caption.center_object)
    target = relevance_target(sub, sample.caption, iou_threshold)
    positions = sorted(sample.caption.entity_links)
    rows = [sub.row_of(sample.caption.entity_links[p]) for p in positions]
    masks = torch.from_numpy(np.stack([sub.masks[r] for r in rows])).float()
    return PreparedSample(
        image=image,
        subgraph=sub,
        prompt_row=prompt_row,
        target=target,
        tokens=torch.tensor(sample.caption.tokens, dtype=torch.long),
        noun_pos=positions,
        noun_rows=rows,
        gt_masks=masks,
    )


def collate(prepared: list[PreparedSample]) -> Batch:
    if not prepared:
        raise InputError("empty batch")
    lmax = max(p.tokens.shape[0] for p in prepared)
    b = len(prepared)
    tokens = torch.zeros((b, lmax), dtype=torch.long)
    valid = torch.zeros((b, lmax), dtype=torch.bool)
    for i, p in enumerate(prepared):
        tokens[i, : p.tokens.shape[0]] = p.tokens
        valid[i, : p.tokens.shape[0]] = True
    return Batch(
        images=torch.stack([p.image for p in prepared]),
        graphs=[p.subgraph for p in prepared],
        prompt_rows=[p.prompt_row for p in prepared],
        targets=[p.target for p in prepared],
        tokens=tokens,
        token_valid=valid,
        noun_pos=[p.noun_pos for p in prepared],
        noun_rows=[p.noun_rows for p in prepared],
        gt_masks=[p.gt_masks for p in prepared],
    )


class ShapeCapModel(nn.Module):
    """Prompted joint caption/mask generator over shape-world scenes.

    Flags:

    * ``filtering`` — scale node tokens by live predicted relevance and
      propose member sets by thresholding at inference.  Off: unit
      scales, and inference keeps the whole subgraph (one candidate).
    * ``ranking`` — order member slots by the permutation head (taught
      with the caption-order loss).  Off: slots follow row order and the
      ordering loss is dropped.
    * ``cross_attention`` — stream interaction in the denoiser.
    """

    def __init__(
        self,
        dim: int = 64,
        heads: int = 4,
        depth: int = 6,
        max_len: int = MAX_CAPTION_LEN,
        vocab_size: int = VOCAB_SIZE,
        enc_channels: tuple[int, ...] = (16, 32, 64, 64),
        d_joint: int = 128,
        steps: int = DEFAULT_STEPS,
        theta: float = RELEVANCE_THETA,
        filtering: bool = True,
        ranking: bool = True,
        cross_attention: bool = True,
    ) -> None:
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        self.steps = steps
        self.theta = theta
        self.filtering = filtering
        self.ranking = ranking
        self.embedder = GraphEmbedder(dim)
        self.adaptor = PromptAdaptor(dim)
        self.composer = GraphComposer(dim)
        self.denoiser = BimodalDenoiser(
            dim, heads, depth, max_len=max_len, n_bits=N_BITS, cross_attention=cross_attention
        )
        self.image_encoder = ImageEncoder(enc_channels)
        self.pixel_decoder = PixelDecoder(self.image_encoder.channels, dim)
        self.caption_head = CaptionHead(dim, vocab_size)
        self.bit_head = BitHead(dim, N_BITS)
        self.mask_head = MaskHead(dim, dim)
        self.mecl = MECLHead(dim, d_joint)

    # ----------------------------------------------------------- training

    def _teacher_slots(self, target: RelevanceTarget, lmax: int) -> tuple[list[int], list[int]]:
        """Ground-truth member rows in slot order plus each slot's noun index."""
        rows = np.nonzero(target.scores[:lmax] == 1.0)[0]
        by_col = {int(np.argmax(target.permutation[r])): int(r) for r in rows}
        if len(by_col) != len(rows):
            raise InputError("permutation target is not one-to-one")
        if self.ranking:
            ordered = [by_col[c] for c in sorted(by_col)]
            nouns = sorted(by_col)
        else:
            ordered = sorted(by_col.values())
            nouns = [int(np.argmax(target.permutation[r])) for r in ordered]
        return ordered, nouns

    def forward_train(
        self,
        batch: Batch,
        *,
        joint: bool,
        gt_mask_warmup: bool = False,
        strict_infonce: bool = False,
        generator: torch.Generator | None = None,
    ) -> dict[str, torch.Tensor]:
        """Teacher-forced losses for one batch.

        Returns per-component scalars: ``bit``, ``ce``, ``caption``,
        ``adaptor``, ``ranking``, ``sg`` and, when ``joint``, ``mask``,
        ``intra``, ``inter``, ``mec``.  The caller weights them.
        """
        feats, valid = self.embedder(batch.graphs, batch.prompt_rows)
        out = self.adaptor(feats, valid)
        lmax = valid.shape[1]
        scores = torch.stack(
            [torch.from_numpy(t.scores[:lmax]) for t in batch.targets]
        ).to(feats.dtype)
        l_adaptor = adaptor_loss(out, scores)
        if self.ranking:
            l_rank = ranking_loss(out, batch.targets)
        else:
            l_rank = out.perm_logits.sum() * 0.0
        losses: dict[str, torch.Tensor] = {
            "adaptor": l_adaptor,
            "ranking": l_rank,
            "sg": l_adaptor + l_rank,
        }

        memberships: list[list[int]] = []
        slot_nouns: list[list[int]] = []
        scales: list[torch.Tensor] = []
        for b_i, target in enumerate(batch.targets):
            rows, nouns = self._teacher_slots(target, lmax)
            memberships.append(rows)
            slot_nouns.append(nouns)
            if self.filtering:
                scales.append(out.relevance[b_i, rows])
            else:
                scales.append(feats.new_ones(len(rows)))
        composed = self.composer.compose_batch(out.updated, batch.graphs, memberships, scales)

        x0 = encode_bits(batch.tokens).to(feats.dtype)
        bsz = batch.tokens.shape[0]
        # drawn in float64 so the same generator state yields the same noise
        # regardless of the parameter precision, then cast to the model dtype
        t = torch.rand(bsz, generator=generator, dtype=torch.float64).to(feats.dtype)
        eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64).to(feats.dtype)
        x_t = q_sample(x0, t, eps).to(feats.dtype)
        h_c, h_g = self.denoiser(x_t, t, batch.token_valid, composed.tokens, composed.valid)

        losses["bit"] = bit_loss(self.bit_head(h_c), x0, batch.token_valid)
        losses["ce"] = word_cross_entropy(
            self.caption_head(h_c), batch.tokens, batch.token_valid
        )
        losses["caption"] = losses["bit"] + losses["ce"]

        if joint:
            pixel = self.pixel_decoder(self.image_encoder(batch.images.to(feats.dtype)))
            mask_terms = []
            mask_feats: list[torch.Tensor] = []
            word_feats: list[torch.Tensor] = []
            positive_maps: list[torch.Tensor] = []
            for b_i in range(bsz):
                rows = memberships[b_i]
                k = len(rows)
                queries = h_g[b_i, :k]
                logits = self.mask_head(queries.unsqueeze(0), pixel[b_i : b_i + 1])[0]
                slot_gt = torch.stack(
                    [
                        batch.gt_masks[b_i][batch.noun_rows[b_i].index(r)]
                        for r in rows
                    ]
                ).to(feats.dtype)
                mask_terms.append(mask_loss(logits, slot_gt))
                if gt_mask_warmup:
                    pooled = torch.stack(
                        [pooled_mask_embedding(pixel[b_i], m) for m in slot_gt]
                    )
                    mask_feats.append(self.mecl.embed_masks(pooled))
                else:
                    mask_feats.append(self.mecl.embed_masks(queries))
                word_feats.append(
                    self.mecl.embed_words(
                        h_c[b_i, torch.tensor(batch.noun_pos[b_i], dtype=torch.long)]
                    )
                )
                pos = torch.zeros((k, len(batch.noun_pos[b_i])), dtype=torch.bool)
                for slot, noun in enumerate(slot_nouns[b_i]):
                    pos[slot, noun] = True
                positive_maps.append(pos)
            losses["mask"] = torch.stack(mask_terms).mean()
            mec, parts = mecl_batch(
                mask_feats, word_feats, positive_maps, self.mecl.tau_clamped, strict_infonce
            )
            losses["mec"] = mec
            losses["intra"] = torch.as_tensor(parts["intra"])
            losses["inter"] = torch.as_tensor(parts["inter"])
        return losses

    # ---------------------------------------------------------- inference

    def _candidate_members(self, out: AdaptorOutput, prompt_row: int, k: int) -> list[list[int]]:
        """Member-row proposals for one sample, capped to the template size."""
        relevance = out.relevance[0]
        valid = out.valid[0]
        if not self.filtering:
            rows = [r for r in range(valid.shape[0]) if bool(valid[r])]
            return [_cap_rows(rows, relevance, prompt_row, use_relevance=False)]
        proposals = propose_memberships(relevance, valid, prompt_row, k, self.theta)
        seen: set[tuple[int, ...]] = set()
        capped: list[list[int]] = []
        for mask in proposals:
            rows = _cap_rows(
                [int(r) for r in np.nonzero(mask)[0]], relevance, prompt_row, use_relevance=True
            )
            key = tuple(rows)
            if key not in seen:
                seen.add(key)
                capped.append(rows)
        return capped

    @torch.no_grad()
    def infer(
        self,
        image: np.ndarray,
        box_px: tuple[int, int, int, int],
        k: int = 5,
        *,
        steps: int | None = None,
        generator: torch.Generator | None = None,
    ) -> list[Candidate]:
        """Generate up to ``k`` aligned caption/mask candidates for a box.

        ``image`` is an (H, W, 3) uint8 canvas rendered by this world;
        the scene is recovered analytically from pixels and the prompt
        box is resolved to the object it overlaps most.
        """
        if k < 1:
            raise InputError("k must be >= 1")
        center = _resolve_prompt_object(image, box_px)
        scene = scene_from_image(image, center)
        full = graph_from_scene(scene, include_masks=False)
        sub = coarse_subgraph(full, full.row_of(center))
        prompt_row = sub.row_of(center)

        feats, valid = self.embedder([sub], [prompt_row])
        out = self.adaptor(feats, valid)
        image_t = torch.from_numpy(image.copy()).permute(2, 0, 1).float().unsqueeze(0) / 255.0
        pixel = self.pixel_decoder(self.image_encoder(image_t))

        candidates = []
        for rows in self._candidate_members(out, prompt_row, k):
            if self.ranking and len(rows) > 1:
                ordered = hungarian_order(out.perm_logits[0], rows)
            else:
                ordered = sorted(rows)
            if self.filtering:
                scale = out.relevance[0, ordered]
            else:
                scale = feats.new_ones(len(ordered))
            tokens_g, n_nodes, _ = self.composer.compose(out.updated[0], sub, ordered, scale)
            g_tokens = tokens_g.unsqueeze(0)
            g_valid = torch.ones((1, tokens_g.shape[0]), dtype=torch.bool)
            n_rel = len(ordered) - 1
            length = caption_length(n_rel)
            cap_valid = torch.zeros((1, self.max_len), dtype=torch.bool)
            cap_valid[0, :length] = True
            last: dict[str, torch.Tensor] = {}

            def denoise(x: torch.Tensor, t_now: float) -> torch.Tensor:
                t_vec = torch.full((1,), float(t_now), dtype=x.dtype)
                h_c, h_g = self.denoiser(x, t_vec, cap_valid, g_tokens, g_valid)
                last["h_c"], last["h_g"] = h_c, h_g
                return self.bit_head(h_c)

            sampled, _ = sample_caption(
                denoise,
                length,
                max_len=self.max_len,
                steps=steps or self.steps,
                generator=generator,
            )
            token_list = [int(v) for v in sampled]
            padded = torch.zeros((1, self.max_len), dtype=torch.long)
            padded[0, :length] = sampled
            score = float(
                caption_log_prob(self.caption_head(last["h_c"]), padded, cap_valid)[0]
            )
            logits = self.mask_head(last["h_g"][:, :n_nodes], pixel)[0]
            masks = (logits > 0).numpy()
            confidences = [
                float(torch.sigmoid(logits[i])[masks[i]].mean()) if masks[i].any() else 0.0
                for i in range(n_nodes)
            ]
            candidates.append(
                Candidate(
                    tokens=token_list,
                    caption=detokenize(token_list),
                    masks=masks,
                    mask_word_positions=noun_positions(n_rel),
                    mask_confidences=confidences,
                    score=score,
                    members=list(ordered),
                )
            )
        candidates.sort(key=lambda c: -c.score)
        return candidates[:k]


def _cap_rows(
    rows: list[int], relevance: torch.Tensor, prompt_row: int, *, use_relevance: bool
) -> list[int]:
    """Trim a member set to the caption template's capacity."""
    if prompt_row not in rows:
        rows = [prompt_row, *rows]
    if len(rows) <= MAX_MEMBERS:
        return sorted(rows)
    others = [r for r in rows if r != prompt_row]
    if use_relevance:
        others.sort(key=lambda r: (-float(relevance[r]), r))
    kept = others[: MAX_MEMBERS - 1]
    log.info("member set of %d truncated to %d", len(rows), MAX_MEMBERS)
    return sorted([prompt_row, *kept])


def _resolve_prompt_object(image: np.ndarray, box_px: tuple[int, int, int, int]) -> int:
    """Index of the recovered object the prompt box refers to."""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = box_px
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise InputError(f"box {box_px} outside image bounds ({w}x{h})")
    objects = recover_objects(image)
    if not objects:
        raise InputError("no objects recovered from image")
    prompt = (x0 / w, y0 / h, x1 / w, y1 / h)
    best, best_key = 0, (-1.0, 0.0)
    for i, obj in enumerate(objects):
        iou = box_iou(np.asarray(prompt), np.asarray(obj.box))
        cx = (obj.box[0] + obj.box[2]) / 2 - (prompt[0] + prompt[2]) / 2
        cy = (obj.box[1] + obj.box[3]) / 2 - (prompt[1] + prompt[3]) / 2
        key = (iou, -float(np.hypot(cx, cy)))
        if key > best_key:
            best, best_key = i, key
    return best
