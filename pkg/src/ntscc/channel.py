"""Simulated wireless channel: power normalization, AWGN, block Rayleigh fading.

Symbols are complex channel uses stored as interleaved real pairs, so a
stream of k complex symbols is a real tensor of length 2k. The SNR nu is
defined on a complex-symbol basis: unit average signal power against
noise power sigma_n^2 = 10^(-nu/10), i.e. sigma_n^2 / 2 per real
dimension. Noise is drawn from a caller-owned generator; the channel is
differentiable with respect to the input (noise and gains are constants
during backprop).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .config import ChannelConfig


@dataclass
class ChannelState:
    h: torch.Tensor | None    # complex gain per fading block; None for AWGN
    sigma_n2: float           # noise power per complex symbol
    nu_db: float | None       # average SNR in dB; None means noiseless
    block_length: int = 1

    @property
    def noiseless(self) -> bool:
        return self.nu_db is None or math.isinf(self.nu_db)


def noise_power(snr_db: float) -> float:
    return 10.0 ** (-snr_db / 10.0)


def sample_fading(n_blocks: int, generator: torch.Generator | None = None,
                  dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """I.i.d. CN(0, 1) block gains, E|h|^2 = 1."""
    re = torch.randn(n_blocks, generator=generator, dtype=dtype) * math.sqrt(0.5)
    im = torch.randn(n_blocks, generator=generator, dtype=dtype) * math.sqrt(0.5)
    return torch.complex(re, im)


def make_channel_state(config: ChannelConfig, snr_db: float | None, n_symbols: int,
                       generator: torch.Generator | None = None,
                       dtype: torch.dtype = torch.float32) -> ChannelState:
    sigma_n2 = 0.0 if snr_db is None or math.isinf(snr_db) else noise_power(snr_db)
    h = None
    block_length = 1
    if config.kind == "rayleigh_block":
        block_length = config.block_length
        n_blocks = max(1, -(-n_symbols // block_length))
        h = sample_fading(n_blocks, generator, dtype)
    return ChannelState(h=h, sigma_n2=sigma_n2, nu_db=snr_db, block_length=block_length)


def normalize_power(stream: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Scale a real-pair stream to unit average power per complex symbol.

    Returns the normalized stream and the scale that restores the
    original amplitude. Raises on an all-zero (or empty) stream.
    """
    if stream.numel() == 0:
        raise ValueError("cannot normalize an empty stream")
    power = 2.0 * torch.mean(stream ** 2)
    if float(power.detach()) == 0.0:
        raise ValueError("cannot normalize an all-zero stream")
    scale = torch.sqrt(power)
    return stream / scale, scale


def transmit(stream: torch.Tensor, state: ChannelState,
             generator: torch.Generator | None = None) -> torch.Tensor:
    """Pass a unit-power real-pair stream through the channel.

    AWGN: y = s + n. Block fading with perfect receiver CSI: the received
    h*s + n is zero-forcing equalized back to s + n/h.
    """
    if stream.numel() % 2 != 0:
        raise ValueError("stream length must be even (real pairs)")
    if state.noiseless and state.h is None:
        return stream
    sigma_real = math.sqrt(state.sigma_n2 / 2.0)
    noise = torch.randn(stream.shape, generator=generator,
                        dtype=stream.dtype, device=stream.device) * sigma_real
    if state.h is None:
        return stream + noise
    n_sym = stream.numel() // 2
    sym = torch.complex(stream[0::2].contiguous(), stream[1::2].contiguous())
    noise_c = torch.complex(noise[0::2].contiguous(), noise[1::2].contiguous())
    idx = torch.arange(n_sym, device=stream.device) // state.block_length
    h = state.h[idx]
    received = (h * sym + noise_c) / h
    out = torch.empty_like(stream)
    out[0::2] = received.real
    out[1::2] = received.imag
    return out
