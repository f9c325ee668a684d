"""Evaluation: caption scores, mask quality, candidate selection, reports.

Caption quality uses BLEU-4 (modified n-gram precision with brevity
penalty, no smoothing) and CIDEr (tf-idf cosine over n-grams of order
1..4, idf taken over the evaluation corpus, scaled by 10).  Mask quality
uses position-matched mean IoU and mean average precision of mask
classification at IoU >= 0.5, where a predicted mask's class is the
shape noun it is linked to in the generated caption and its score is
the mean sigmoid inside the thresholded region.  Predictions whose
linked word is not a shape noun carry no class and are excluded from
the precision-recall sweep; the caption metrics already account for
them.  AP sorts predictions by descending confidence (ties resolved by
sample order, so scores do not depend on listing order).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .data import (
    SHAPE_NAMES,
    Sample,
    box_to_px,
    detokenize,
    render_scene,
    word_id,
)
from .errors import InputError
from .model import Candidate, ShapeCapModel

MAP_IOU_THRESHOLD = 0.5
CIDER_MAX_N = 4
CIDER_SCALE = 10.0

_SHAPE_BY_TOKEN = {word_id(name): name for name in SHAPE_NAMES}

__all__ = [
    "EvalReport",
    "MaskPrediction",
    "MaskTruth",
    "bleu4",
    "cider_scores",
    "evaluate_model",
    "mask_iou",
    "mask_map",
    "sample_miou",
    "select_top",
    "summary_table",
    "token_category",
    "write_report",
]


def _as_token_list(tokens) -> list:
    if torch.is_tensor(tokens):
        return [int(t) for t in tokens.tolist()]
    if isinstance(tokens, np.ndarray):
        return [int(t) for t in tokens.tolist()]
    return list(tokens)


def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ------------------------------------------------------------------- captions


def bleu4(candidate: Sequence, references: Sequence[Sequence]) -> float:
    """BLEU-4 of one candidate against its references, in [0, 1].

    Any n-gram order with zero clipped matches zeroes the whole score
    (no smoothing), and an empty candidate scores 0.
    """
    if not references:
        raise InputError("bleu4 needs at least one reference")
    cand = _as_token_list(candidate)
    refs = [_as_token_list(r) for r in references]
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        counts = _ngram_counts(cand, n)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        clipped = 0
        max_ref: Counter = Counter()
        for ref in refs:
            for gram, cnt in _ngram_counts(ref, n).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        for gram, cnt in counts.items():
            clipped += min(cnt, max_ref[gram])
        if clipped == 0:
            return 0.0
        log_sum += 0.25 * math.log(clipped / total)
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_sum)


def cider_scores(
    candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]]
) -> list[float]:
    """Per-candidate CIDEr over a corpus, each in [0, 10].

    ``references[i]`` is the reference list for ``candidates[i]``; the
    idf statistics come from the reference sides of this corpus.  An
    n-gram never seen in the corpus receives the maximal idf.
    """
    if len(candidates) != len(references):
        raise InputError("candidates and references must align")
    if not candidates:
        raise InputError("cider needs a non-empty corpus")
    n_images = len(references)
    doc_freq: list[Counter] = [Counter() for _ in range(CIDER_MAX_N)]
    for refs in references:
        seen: set = set()
        for ref in refs:
            ref_tokens = _as_token_list(ref)
            for n in range(1, CIDER_MAX_N + 1):
                seen.update(_ngram_counts(ref_tokens, n))
        for gram in seen:
            doc_freq[len(gram) - 1][gram] += 1
    log_images = math.log(n_images)

    def tfidf(tokens: list, n: int) -> dict:
        vec = {}
        for gram, cnt in _ngram_counts(tokens, n).items():
            idf = log_images - math.log(max(1.0, doc_freq[n - 1][gram]))
            vec[gram] = cnt * idf
        return vec

    def cosine(a: dict, b: dict) -> float:
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        dot = sum(v * b[g] for g, v in a.items() if g in b)
        return dot / (na * nb)

    scores = []
    for cand, refs in zip(candidates, references):
        cand_tokens = _as_token_list(cand)
        if not cand_tokens or not refs:
            scores.append(0.0)
            continue
        total = 0.0
        for n in range(1, CIDER_MAX_N + 1):
            cand_vec = tfidf(cand_tokens, n)
            sim = 0.0
            for ref in refs:
                sim += cosine(cand_vec, tfidf(_as_token_list(ref), n))
            total += sim / len(refs)
        scores.append(CIDER_SCALE * total / CIDER_MAX_N)
    return scores


# ---------------------------------------------------------------------- masks


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise InputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def sample_miou(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> float:
    """Position-matched mean IoU; surplus or missing slots score 0."""
    slots = max(len(pred_masks), len(gt_masks))
    if slots == 0:
        return 0.0
    total = 0.0
    for i in range(min(len(pred_masks), len(gt_masks))):
        total += mask_iou(pred_masks[i], gt_masks[i])
    return total / slots


@dataclass
class MaskPrediction:
    mask: np.ndarray
    category: str | None
    confidence: float
    sample_index: int
    slot: int


@dataclass
class MaskTruth:
    mask: np.ndarray
    category: str
    sample_index: int


def _average_precision(labels: list[bool], n_gt: int) -> float:
    """Area under the monotone precision envelope over all ranks."""
    if n_gt == 0:
        return 0.0
    precisions = []
    recalls = []
    tp = 0
    for i, hit in enumerate(labels, start=1):
        tp += int(hit)
        precisions.append(tp / i)
        recalls.append(tp / n_gt)
    ap = 0.0
    prev_recall = 0.0
    for i in range(len(labels)):
        if not labels[i]:
            continue
        envelope = max(precisions[i:])
        ap += (recalls[i] - prev_recall) * envelope
        prev_recall = recalls[i]
    return ap


def mask_map(
    predictions: Sequence[MaskPrediction],
    truths: Sequence[MaskTruth],
    iou_threshold: float = MAP_IOU_THRESHOLD,
) -> float:
    """Mean AP over ground-truth categories at the given IoU threshold."""
    if not truths:
        raise InputError("mask_map needs at least one ground-truth mask")
    categories = sorted({t.category for t in truths})
    aps = []
    for category in categories:
        cat_preds = sorted(
            (p for p in predictions if p.category == category),
            key=lambda p: (-p.confidence, p.sample_index, p.slot),
        )
        cat_truths = [t for t in truths if t.category == category]
        matched = [False] * len(cat_truths)
        labels: list[bool] = []
        for pred in cat_preds:
            best_iou = 0.0
            best_j = -1
            for j, truth in enumerate(cat_truths):
                if matched[j] or truth.sample_index != pred.sample_index:
                    continue
                iou = mask_iou(pred.mask, truth.mask)
                if iou > best_iou:
                    best_iou = iou
                    best_j = j
            if best_j >= 0 and best_iou >= iou_threshold:
                matched[best_j] = True
                labels.append(True)
            else:
                labels.append(False)
        aps.append(_average_precision(labels, len(cat_truths)))
    return float(np.mean(aps))


def token_category(token: int) -> str | None:
    """Shape category named by a caption token, or None."""
    return _SHAPE_BY_TOKEN.get(int(token))


# ------------------------------------------------------------------ selection


def select_top(
    candidates: Sequence[Candidate],
    references: Sequence[Sequence] | None = None,
    metric: Callable[[Sequence, Sequence[Sequence]], float] = bleu4,
) -> int:
    """Index of the best candidate.

    With references, picks the candidate maximizing the caption metric
    (evaluation mode); without, picks the highest mean per-token
    log-probability score (inference mode).  Ties go to the earlier
    candidate, and candidates arrive sorted by score, so a metric tie
    resolves to the higher-scoring caption.
    """
    if len(candidates) == 0:
        raise InputError("select_top needs at least one candidate")
    if references is None:
        values = [float(c.score) for c in candidates]
    else:
        values = [metric(_as_token_list(c.tokens), references) for c in candidates]
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


# ----------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    bleu4: float
    cider: float
    miou: float
    map: float
    exact_match: float
    n_samples: int
    per_sample: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "bleu4": self.bleu4,
            "cider": self.cider,
            "miou": self.miou,
            "map": self.map,
            "exact_match": self.exact_match,
            "n_samples": self.n_samples,
        }


def _gt_pairs(sample: Sample) -> tuple[list[int], list[np.ndarray], list[str]]:
    tokens = _as_token_list(sample.caption.tokens)
    masks = []
    categories = []
    for pos in sorted(sample.caption.entity_links):
        obj = sample.scene.objects[sample.caption.entity_links[pos]]
        masks.append(obj.mask.astype(bool))
        categories.append(obj.shape)
    return tokens, masks, categories


def evaluate_model(
    model: ShapeCapModel,
    samples: Sequence[Sample],
    k: int = 5,
    steps: int | None = None,
    seed: int = 0,
) -> EvalReport:
    """Score a model over held-out samples with deterministic sampling.

    Per sample: run box-prompted inference, select the candidate with
    the best BLEU-4 against the true caption, then score captions and
    masks of the selected candidates; CIDEr and mAP aggregate over the
    whole split afterwards.
    """
    if not samples:
        raise InputError("evaluate_model needs at least one sample")
    per_sample: list[dict] = []
    selected_tokens: list[list[int]] = []
    reference_sets: list[list[list[int]]] = []
    predictions: list[MaskPrediction] = []
    truths: list[MaskTruth] = []
    bleu_total = 0.0
    miou_total = 0.0
    exact_total = 0

    for index, sample in enumerate(samples):
        image = render_scene(sample.scene)
        center = sample.scene.objects[sample.caption.center_object]
        box = box_to_px(center.box, image.shape[:2])
        generator = torch.Generator().manual_seed(seed * 1_000_003 + index)
        candidates = model.infer(image, box, k=k, steps=steps, generator=generator)
        gt_tokens, gt_masks, gt_categories = _gt_pairs(sample)
        chosen = select_top(candidates, [gt_tokens])
        cand = candidates[chosen]
        cand_tokens = _as_token_list(cand.tokens)

        score_bleu = bleu4(cand_tokens, [gt_tokens])
        exact = cand_tokens == gt_tokens
        miou = sample_miou([m for m in cand.masks], gt_masks)
        for slot, (mask, pos, conf) in enumerate(
            zip(cand.masks, cand.mask_word_positions, cand.mask_confidences)
        ):
            category = (
                token_category(cand_tokens[pos]) if pos < len(cand_tokens) else None
            )
            predictions.append(
                MaskPrediction(
                    mask=mask.astype(bool),
                    category=category,
                    confidence=float(conf),
                    sample_index=index,
                    slot=slot,
                )
            )
        for mask, category in zip(gt_masks, gt_categories):
            truths.append(MaskTruth(mask=mask, category=category, sample_index=index))

        bleu_total += score_bleu
        miou_total += miou
        exact_total += int(exact)
        selected_tokens.append(cand_tokens)
        reference_sets.append([gt_tokens])
        per_sample.append(
            {
                "sample": index,
                "selected": chosen,
                "n_candidates": len(candidates),
                "bleu4": score_bleu,
                "miou": miou,
                "exact": exact,
                "caption": detokenize(cand_tokens),
                "gt_caption": detokenize(gt_tokens),
            }
        )

    ciders = cider_scores(selected_tokens, reference_sets)
    for record, value in zip(per_sample, ciders):
        record["cider"] = value
    n = len(samples)
    return EvalReport(
        bleu4=bleu_total / n,
        cider=float(np.mean(ciders)),
        miou=miou_total / n,
        map=mask_map(predictions, truths),
        exact_match=exact_total / n,
        n_samples=n,
        per_sample=per_sample,
    )


def write_report(report: EvalReport, path: str) -> None:
    """One JSON line per sample, then one summary line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in report.per_sample:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.write(json.dumps({"summary": report.summary()}, sort_keys=True) + "\n")


def summary_table(report: EvalReport) -> str:
    rows = [
        ("BLEU-4", report.bleu4),
        ("CIDEr", report.cider),
        ("mIoU", report.miou),
        ("mAP@0.5", report.map),
        ("exact match", report.exact_match),
    ]
    width = max(len(name) for name, _ in rows)
    lines = [f"{'metric':<{width}}  value", f"{'-' * width}  -----"]
    for name, value in rows:
        lines.append(f"{name:<{width}}  {value:.4f}")
    lines.append(f"({report.n_samples} samples)")
    return "\n".join(lines)
