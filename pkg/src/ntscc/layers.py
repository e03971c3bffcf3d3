"""Building blocks: windowed attention, ViT / residual transformer blocks.

All blocks operate on NCHW feature maps and pad internally to a multiple
of the window size, so any spatial extent >= 1 is accepted.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv(in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2)


def deconv(in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(
        in_ch, out_ch, kernel_size, stride=stride,
        padding=kernel_size // 2, output_padding=stride - 1,
    )


def _window_partition(x: torch.Tensor, ws: int):
    """(B, H, W, C) -> (B*nW, ws*ws, C) with zero padding to a window multiple."""
    b, h, w, c = x.shape
    pad_h = (ws - h % ws) % ws
    pad_w = (ws - w % ws) % ws
    if pad_h or pad_w:
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
    hp, wp = h + pad_h, w + pad_w
    x = x.view(b, hp // ws, ws, wp // ws, ws, c)
    windows = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)
    return windows, (hp, wp)


def _window_reverse(windows: torch.Tensor, ws: int, hp: int, wp: int, h: int, w: int, b: int):
    c = windows.shape[-1]
    x = windows.view(b, hp // ws, wp // ws, ws, ws, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, c)
    return x[:, :h, :w, :]


class WindowAttention(nn.Module):
    """Multi-head self- or cross-attention within non-overlapping windows."""

    def __init__(self, dim: int, window_size: int, head_channels: int = 16):
        super().__init__()
        self.dim = dim
        self.ws = window_size
        heads = max(1, dim // head_channels)
        while dim % heads != 0:
            heads -= 1
        self.num_heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        b, c, h, w = x.shape
        xq = x.permute(0, 2, 3, 1)
        src = xq if context is None else context.permute(0, 2, 3, 1)
        qw, (hp, wp) = _window_partition(xq, self.ws)
        kw, _ = _window_partition(src, self.ws)

        nw, n, _ = qw.shape
        nh = self.num_heads
        hd = c // nh
        q = self.q(qw).view(nw, n, nh, hd).transpose(1, 2)
        k, v = self.kv(kw).view(nw, n, 2, nh, hd).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(nw, n, c)
        out = self.proj(out)
        out = _window_reverse(out, self.ws, hp, wp, h, w, b)
        return out.permute(0, 3, 1, 2)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 2.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 2, 3, 1)
        x = self.fc2(F.gelu(self.fc1(x)))
        return x.permute(0, 3, 1, 2)


class _ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW map."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ViTBlock(nn.Module):
    """Pre-norm windowed MHSA followed by an MLP, both with residuals."""

    def __init__(self, dim: int, window_size: int, mlp_ratio: float = 2.0, head_channels: int = 16):
        super().__init__()
        self.norm1 = _ChannelLayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, head_channels)
        self.norm2 = _ChannelLayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ContextualViTBlock(nn.Module):
    """Self-attention alternated with cross-attention against a context map.

    Keys and values of the cross-attention step come exclusively from the
    context tensor, so the block output at any position never mixes in
    main-stream values through the cross path.
    """

    def __init__(self, dim: int, window_size: int, mlp_ratio: float = 2.0, head_channels: int = 16):
        super().__init__()
        self.norm1 = _ChannelLayerNorm(dim)
        self.self_attn = WindowAttention(dim, window_size, head_channels)
        self.norm2 = _ChannelLayerNorm(dim)
        self.norm_ctx = _ChannelLayerNorm(dim)
        self.cross_attn = WindowAttention(dim, window_size, head_channels)
        self.norm3 = _ChannelLayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), context=self.norm_ctx(context))
        x = x + self.mlp(self.norm3(x))
        return x


class ResTB(nn.Module):
    """Residual transformer block: ViT blocks plus a conv with an outer skip."""

    def __init__(self, dim: int, depth: int, window_size: int,
                 mlp_ratio: float = 2.0, head_channels: int = 16):
        super().__init__()
        self.blocks = nn.ModuleList(
            ViTBlock(dim, window_size, mlp_ratio, head_channels) for _ in range(depth)
        )
        self.conv = conv(dim, dim, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = x
        for blk in self.blocks:
            x = blk(x)
        return self.conv(x) + residual
