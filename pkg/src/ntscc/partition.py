"""Checkerboard partition of a latent grid into anchor / non-anchor positions."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class CheckerboardPartition:
    """Boolean anchor mask over an (h, w) grid.

    Anchors are the positions whose (row + col) parity equals ``parity``;
    the complement set holds the non-anchors. The two sets are disjoint
    and cover the grid.
    """

    anchor_mask: torch.Tensor  # bool, shape (h, w)
    parity: int

    @property
    def nonanchor_mask(self) -> torch.Tensor:
        return ~self.anchor_mask

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.anchor_mask.shape)

    def mask4d(self, anchors: bool = True) -> torch.Tensor:
        """Mask broadcastable against an NCHW latent tensor."""
        m = self.anchor_mask if anchors else self.nonanchor_mask
        return m.unsqueeze(0).unsqueeze(0)

    def select(self, grid: torch.Tensor, anchors: bool = True) -> torch.Tensor:
        """Zero out the opposite branch of an NCHW tensor."""
        return grid * self.mask4d(anchors).to(grid.dtype)

    def merge(self, anchor_part: torch.Tensor, nonanchor_part: torch.Tensor) -> torch.Tensor:
        mask = self.mask4d(True).to(anchor_part.dtype)
        return anchor_part * mask + nonanchor_part * (1.0 - mask)


def build_partition(h: int, w: int, parity: int = 0) -> CheckerboardPartition:
    if h < 1 or w < 1:
        raise ValueError(f"grid dims must be >= 1, got ({h}, {w})")
    if parity not in (0, 1):
        raise ValueError(f"parity must be 0 or 1, got {parity}")
    rows = torch.arange(h).unsqueeze(1)
    cols = torch.arange(w).unsqueeze(0)
    mask = (rows + cols) % 2 == parity
    return CheckerboardPartition(anchor_mask=mask, parity=parity)
