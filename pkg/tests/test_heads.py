"""Tests for the output heads and their losses."""

import math

import pytest
import torch
import torch.nn.functional as F

import shapecap.heads as hd
from shapecap.errors import InputError
from tests.helpers import finite_difference_errors


def test_encoder_and_decoder_shapes():
    enc = hd.ImageEncoder(channels=(16, 32, 64, 64))
    dec = hd.PixelDecoder(enc.channels, dim=64)
    img = torch.rand(2, 3, 64, 64)
    feats = enc(img)
    assert [tuple(f.shape) for f in feats] == [
        (2, 16, 32, 32),
        (2, 32, 16, 16),
        (2, 64, 8, 8),
        (2, 64, 4, 4),
    ]
    pix = dec(feats)
    assert tuple(pix.shape) == (2, 64, 32, 32)
    head = hd.MaskHead(dim=64, pixel_dim=64)
    logits = head(torch.randn(2, 3, 64), pix)
    assert tuple(logits.shape) == (2, 3, 64, 64)


def test_encoder_rejects_bad_sizes():
    enc = hd.ImageEncoder()
    with pytest.raises(InputError):
        enc(torch.rand(1, 3, 60, 64))
    with pytest.raises(InputError):
        enc(torch.rand(3, 64, 64))
    with pytest.raises(InputError):
        hd.ImageEncoder(channels=(8, 8))


def test_uniform_word_logits_give_log_vocab():
    logits = torch.zeros(2, 5, 64)
    tokens = torch.randint(0, 64, (2, 5))
    valid = torch.ones(2, 5, dtype=torch.bool)
    ce = hd.word_cross_entropy(logits, tokens, valid)
    assert abs(float(ce) - math.log(64)) < 1e-6


def test_word_cross_entropy_loop_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 7, generator=g, dtype=torch.float64)
    tokens = torch.randint(0, 7, (2, 4), generator=g)
    valid = torch.tensor([[True, True, False, True], [False, True, True, True]])
    got = float(hd.word_cross_entropy(logits, tokens, valid))
    terms = []
    for b in range(2):
        for i in range(4):
            if valid[b, i]:
                row = logits[b, i]
                terms.append(float(-row[tokens[b, i]] + torch.logsumexp(row, 0)))
    assert abs(got - sum(terms) / len(terms)) < 1e-9
    with pytest.raises(InputError):
        hd.word_cross_entropy(logits, tokens, torch.zeros(2, 4, dtype=torch.bool))


def test_caption_log_prob_oracle():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 3, 5, generator=g, dtype=torch.float64)
    tokens = torch.randint(0, 5, (2, 3), generator=g)
    valid = torch.tensor([[True, True, True], [True, False, False]])
    got = hd.caption_log_prob(logits, tokens, valid)
    for b in range(2):
        terms = [
            float(F.log_softmax(logits[b, i], 0)[tokens[b, i]])
            for i in range(3)
            if valid[b, i]
        ]
        assert abs(float(got[b]) - sum(terms) / len(terms)) < 1e-9


def test_zero_logits_full_mask_frozen_values():
    """Zero logits against an all-ones 8x8 mask: dice = 1 - 65/97, bce = ln 2."""
    logits = torch.zeros(1, 8, 8)
    target = torch.ones(1, 8, 8)
    d = float(hd.dice_loss(logits, target))
    assert abs(d - (1.0 - 65.0 / 97.0)) < 1e-6
    total = float(hd.mask_loss(logits, target))
    assert abs(total - ((1.0 - 65.0 / 97.0) + math.log(2))) < 1e-6
    # without smoothing the same case is exactly 1 - (2*0.5*64)/(0.5*64 + 64) = 1/3
    unsmoothed = float(hd.dice_loss(logits, target, smooth=0.0))
    assert abs(unsmoothed - 1.0 / 3.0) < 1e-6


def test_dice_loss_loop_oracle():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    target = (torch.rand(3, 4, 4, generator=g) > 0.5).double()
    got = hd.dice_loss(logits, target)
    for i in range(3):
        p = torch.sigmoid(logits[i]).flatten()
        t = target[i].flatten()
        expect = 1.0 - (2.0 * float((p * t).sum()) + 1.0) / (
            float(p.sum()) + float(t.sum()) + 1.0
        )
        assert abs(float(got[i]) - expect) < 1e-9


def test_mask_loss_pads_missing_rows():
    g = torch.Generator().manual_seed(3)
    logits = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
    gt = (torch.rand(3, 4, 4, generator=g) > 0.5).double()
    got = float(hd.mask_loss(logits, gt))
    padded = torch.cat([logits, torch.zeros(1, 4, 4, dtype=torch.float64)])
    rows = []
    for i in range(3):
        d = float(hd.dice_loss(padded[i : i + 1], gt[i : i + 1]))
        b = float(
            F.binary_cross_entropy_with_logits(padded[i], gt[i], reduction="mean")
        )
        rows.append(d + b)
    assert abs(got - sum(rows) / 3) < 1e-9
    # surplus prediction is scored against an empty mask
    got_extra = float(hd.mask_loss(logits, gt[:1]))
    rows = []
    for i in range(2):
        t = gt[i] if i == 0 else torch.zeros(4, 4, dtype=torch.float64)
        d = float(hd.dice_loss(logits[i : i + 1], t[None]))
        b = float(F.binary_cross_entropy_with_logits(logits[i], t, reduction="mean"))
        rows.append(d + b)
    assert abs(got_extra - sum(rows) / 2) < 1e-9
    assert float(hd.mask_loss(torch.zeros(0, 4, 4), torch.zeros(0, 4, 4))) == 0.0


def test_orthogonal_query_gives_zero_logits():
    head = hd.MaskHead(dim=8, pixel_dim=8)
    with torch.no_grad():
        head.query_proj.weight.copy_(torch.eye(8))
        head.query_proj.bias.zero_()
    pixel = torch.zeros(1, 8, 4, 4)
    pixel[:, :4] = torch.randn(1, 4, 4, 4)  # pixels live in the first half
    query = torch.zeros(1, 2, 8)
    query[:, :, 4:] = torch.randn(1, 2, 4)  # queries live in the second half
    logits = head(query, pixel)
    assert logits.abs().max() == 0.0


def test_mask_logits_match_dot_product():
    torch.manual_seed(4)
    head = hd.MaskHead(dim=8, pixel_dim=8).double()
    queries = torch.randn(1, 2, 8, dtype=torch.float64)
    pixel = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    logits = head(queries, pixel)
    q = head.query_proj(queries)
    raw = torch.einsum("bkc,bchw->bkhw", q, pixel)
    want = F.interpolate(raw, scale_factor=2.0, mode="bilinear", align_corners=False)
    assert torch.allclose(logits, want, atol=1e-12)


def test_pooled_mask_embedding_oracle():
    g = torch.Generator().manual_seed(5)
    pixel = torch.randn(6, 4, 4, generator=g, dtype=torch.float64)
    mask = torch.zeros(8, 8)
    mask[0:2, 0:2] = 1.0  # exactly pixel (0, 0) on the 4x4 grid
    got = hd.pooled_mask_embedding(pixel, mask)
    assert torch.allclose(got, pixel[:, 0, 0], atol=1e-9)
    # uniform mask pools to the global mean
    got_all = hd.pooled_mask_embedding(pixel, torch.ones(8, 8))
    assert torch.allclose(got_all, pixel.mean((-1, -2)), atol=1e-9)
    with pytest.raises(InputError):
        hd.pooled_mask_embedding(pixel, torch.zeros(8, 8))


def test_image_to_mask_gradients_double_precision():
    torch.manual_seed(6)
    enc = hd.ImageEncoder(channels=(4, 8, 8, 8)).double()
    dec = hd.PixelDecoder(enc.channels, dim=8).double()
    head = hd.MaskHead(dim=8, pixel_dim=8).double()
    stack = torch.nn.ModuleDict({"enc": enc, "dec": dec, "head": head})
    img = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    queries = torch.randn(1, 2, 8, dtype=torch.float64)
    gt = (torch.rand(2, 16, 16) > 0.5).double()

    def loss_fn():
        pix = dec(enc(img))
        logits = head(queries, pix)[0]
        return hd.mask_loss(logits, gt)

    errors = finite_difference_errors(
        loss_fn, stack, h_scale=1e-6, coords_per_tensor=3, seed=7
    )
    worst = max(errors.values())
    assert worst < 1e-4, f"worst relative gradient error {worst:.3e}"
