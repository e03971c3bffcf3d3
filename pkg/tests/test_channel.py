import math

import pytest
import torch

from ntscc.channel import (
    ChannelState,
    make_channel_state,
    noise_power,
    normalize_power,
    sample_fading,
    transmit,
)
from ntscc.config import ChannelConfig


def test_noise_power_definition():
    assert noise_power(10.0) == pytest.approx(0.1)
    assert noise_power(0.0) == pytest.approx(1.0)


def test_normalize_sign_stream_unchanged_up_to_scale():
    s = torch.tensor([1.0, -1.0, 1.0, 1.0, -1.0, -1.0])
    normed, scale = normalize_power(s)
    assert torch.allclose(normed * scale, s)
    # +/-1 reals already have per-complex-symbol power 2 -> scale sqrt(2)
    assert float(scale) == pytest.approx(math.sqrt(2.0))


def test_normalize_unit_power():
    gen = torch.Generator().manual_seed(0)
    s = (torch.randn(10000, generator=gen) * 3.7 + 0.5).double()
    normed, _ = normalize_power(s)
    power = 2.0 * float((normed ** 2).mean())
    assert power == pytest.approx(1.0, abs=1e-9)


def test_normalize_rejects_zero_and_empty():
    with pytest.raises(ValueError):
        normalize_power(torch.zeros(8))
    with pytest.raises(ValueError):
        normalize_power(torch.zeros(0))


def test_normalize_gradient_matches_finite_differences():
    s = torch.randn(8, dtype=torch.float64, requires_grad=True)
    out, _ = normalize_power(s)
    loss = (out * torch.arange(1.0, 9.0, dtype=torch.float64)).sum()
    loss.backward()
    eps = 1e-6
    for i in range(8):
        d = torch.zeros(8, dtype=torch.float64)
        d[i] = eps
        f = lambda v: float((normalize_power(v)[0]
                             * torch.arange(1.0, 9.0, dtype=torch.float64)).sum())
        fd = (f((s + d).detach()) - f((s - d).detach())) / (2 * eps)
        assert fd == pytest.approx(float(s.grad[i]), rel=1e-4, abs=1e-10)


def test_infinite_snr_is_identity():
    s = torch.randn(64)
    state = ChannelState(h=None, sigma_n2=0.0, nu_db=None)
    assert torch.equal(transmit(s, state), s)
    state_inf = ChannelState(h=None, sigma_n2=0.0, nu_db=math.inf)
    assert torch.equal(transmit(s, state_inf), s)


def test_sigma_at_10db_unit_power():
    cfg = ChannelConfig(kind="awgn")
    state = make_channel_state(cfg, 10.0, 100)
    assert state.sigma_n2 == pytest.approx(0.1)


@pytest.mark.parametrize("snr_db", [0.0, 10.0])
def test_empirical_snr_calibration(snr_db):
    n_sym = 1_000_000
    gen = torch.Generator().manual_seed(123)
    s = torch.randn(2 * n_sym, generator=gen)
    s, _ = normalize_power(s)
    state = make_channel_state(ChannelConfig(kind="awgn"), snr_db, n_sym, gen)
    received = transmit(s, state, gen)
    noise = received - s
    snr = 10.0 * math.log10(float((s ** 2).mean()) / float((noise ** 2).mean()))
    assert abs(snr - snr_db) < 0.05


def test_seeded_noise_reproducible_bitwise():
    s = torch.randn(128)
    cfg = ChannelConfig(kind="awgn")
    outs = []
    for _ in range(2):
        gen = torch.Generator().manual_seed(77)
        state = make_channel_state(cfg, 5.0, 64, gen)
        outs.append(transmit(s, state, gen))
    assert torch.equal(outs[0], outs[1])


def test_channel_gradient_matches_finite_differences():
    """Additive noise with fixed draw: gradient is identity through the channel."""
    s = torch.randn(16, dtype=torch.float64, requires_grad=True)
    cfg = ChannelConfig(kind="awgn")

    def run(vec):
        gen = torch.Generator().manual_seed(5)
        state = make_channel_state(cfg, 3.0, 8, gen)
        out = transmit(vec, state, gen)
        return (out ** 2).sum()

    loss = run(s)
    loss.backward()
    eps = 1e-6
    for i in range(0, 16, 3):
        d = torch.zeros(16, dtype=torch.float64)
        d[i] = eps
        fd = (float(run((s + d).detach())) - float(run((s - d).detach()))) / (2 * eps)
        assert fd == pytest.approx(float(s.grad[i]), rel=1e-4)


class TestFading:
    def test_mean_square_gain_is_one(self):
        gen = torch.Generator().manual_seed(9)
        h = sample_fading(200000, gen)
        assert float((h.abs() ** 2).mean()) == pytest.approx(1.0, abs=0.02)

    def test_seed_determinism(self):
        h1 = sample_fading(64, torch.Generator().manual_seed(4))
        h2 = sample_fading(64, torch.Generator().manual_seed(4))
        assert torch.equal(h1, h2)

    def test_block_constancy_and_state(self):
        cfg = ChannelConfig(kind="rayleigh_block", block_length=8)
        gen = torch.Generator().manual_seed(2)
        state = make_channel_state(cfg, 10.0, 33, gen)
        assert state.h.numel() == 5  # ceil(33 / 8)
        assert state.block_length == 8

    def test_zero_forcing_recovers_noiseless(self):
        cfg = ChannelConfig(kind="rayleigh_block", block_length=4)
        gen = torch.Generator().manual_seed(6)
        s = torch.randn(64, generator=gen)
        s, _ = normalize_power(s)
        state = make_channel_state(cfg, None, 32, gen)
        out = transmit(s, state, gen)
        assert torch.allclose(out, s, atol=1e-6)

    def test_fading_empirical_snr(self):
        cfg = ChannelConfig(kind="rayleigh_block", block_length=64)
        gen = torch.Generator().manual_seed(11)
        n_sym = 200_000
        s = torch.randn(2 * n_sym, generator=gen)
        s, _ = normalize_power(s)
        state = make_channel_state(cfg, 10.0, n_sym, gen)
        received = transmit(s, state, gen)
        # pre-equalization SNR: E|h s|^2 / sigma_n^2 with E|h|^2 = 1
        sym = torch.complex(s[0::2].contiguous(), s[1::2].contiguous())
        idx = torch.arange(n_sym) // 64
        sig_power = float((state.h[idx].abs() ** 2 * sym.abs() ** 2).mean())
        snr = 10.0 * math.log10(sig_power / state.sigma_n2)
        assert abs(snr - 10.0) < 0.6  # block fading: few hundred gain draws
        assert bool(torch.isfinite(received).all())
