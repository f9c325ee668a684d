import numpy as np
import pytest
import torch

from shapecap import diffusion
from shapecap.errors import InputError, SamplingError


def test_encode_example():
    bits = diffusion.encode_bits(torch.tensor(5))
    assert bits.tolist() == [-1.0, -1.0, -1.0, 1.0, -1.0, 1.0]


def test_codec_identity_full_vocab():
    ids = torch.arange(64)
    assert torch.equal(diffusion.decode_bits(diffusion.encode_bits(ids)), ids)
    with pytest.raises(InputError):
        diffusion.encode_bits(torch.tensor(64))


def test_schedule_endpoints_and_monotonicity():
    assert float(diffusion.gamma(0.0)) >= 0.999
    assert float(diffusion.gamma(1.0)) <= 0.001
    grid = diffusion.gamma(torch.linspace(0, 1, 257))
    assert (grid[1:] < grid[:-1]).all()


def test_q_sample_moments():
    # Monte-Carlo oracle over 1e4 draws
    rng = torch.Generator().manual_seed(0)
    x0 = diffusion.encode_bits(torch.randint(0, 64, (10_000,), generator=rng))
    eps = torch.randn(x0.shape, generator=rng)
    xt = diffusion.q_sample(x0, 1.0, eps)
    assert abs(float(xt.mean())) < 0.05
    assert abs(float(xt.var()) - 1.0) < 0.05
    x0_again = diffusion.q_sample(x0, 0.0, eps)
    assert float(((x0_again - x0) ** 2).mean()) < 0.05
    with pytest.raises(InputError):
        diffusion.q_sample(x0, 1.5, eps)


def test_bit_loss_values():
    x0 = diffusion.encode_bits(torch.randint(0, 64, (2, 7), generator=torch.Generator().manual_seed(1)))
    valid = torch.ones(2, 7, dtype=torch.bool)
    assert float(diffusion.bit_loss(x0 + 1.0, x0, valid)) == pytest.approx(1.0)
    assert float(diffusion.bit_loss(x0, x0, valid)) == 0.0
    # loop oracle with a padding mask
    valid[0, 4:] = False
    valid[1, 2:] = False
    pred = x0 + torch.randn(x0.shape, generator=torch.Generator().manual_seed(2))
    total, count = 0.0, 0
    for b in range(2):
        for l in range(7):
            if not valid[b, l]:
                continue
            for k in range(6):
                total += float((pred[b, l, k] - x0[b, l, k]) ** 2)
                count += 1
    assert float(diffusion.bit_loss(pred, x0, valid)) == pytest.approx(total / count, rel=1e-6)
    with pytest.raises(InputError):
        diffusion.bit_loss(pred, x0, torch.zeros(2, 7, dtype=torch.bool))


def test_perfect_denoiser_recovers_tokens():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        length = int(rng.integers(1, 21))
        tokens = torch.from_numpy(rng.integers(0, 64, 20))
        x0 = diffusion.encode_bits(tokens).unsqueeze(0)

        out, _ = diffusion.sample_caption(
            lambda x, t: x0.to(x.dtype),
            length,
            max_len=20,
            generator=torch.Generator().manual_seed(seed),
        )
        hits += bool(torch.equal(out, tokens[:length]))
    assert hits == 100


def test_sampler_determinism_and_errors():
    x0 = diffusion.encode_bits(torch.randint(0, 64, (1, 20), generator=torch.Generator().manual_seed(3)))

    def denoiser(x, t):
        return x0.to(x.dtype)

    a, _ = diffusion.sample_caption(denoiser, 20, max_len=20, generator=torch.Generator().manual_seed(7))
    b, _ = diffusion.sample_caption(denoiser, 20, max_len=20, generator=torch.Generator().manual_seed(7))
    assert torch.equal(a, b)

    def broken(x, t):
        return torch.full_like(x, float("nan"))

    with pytest.raises(SamplingError) as err:
        diffusion.sample_caption(broken, 5, max_len=20, generator=torch.Generator().manual_seed(0))
    assert err.value.step == 0
    with pytest.raises(InputError):
        diffusion.sample_caption(denoiser, 0, max_len=20)
    with pytest.raises(InputError):
        diffusion.sample_caption(denoiser, 5, max_len=20, steps=0)
