"""Cross-level filtering of the finest student feature.

A chain of stride-2 conv blocks lifts the level-1 compensation signal to the
shape of every deeper level, so the deeper compensation signals can be
regressed against it.  The chain exists only to shape gradients during
training; inference never instantiates it, and removing its weights from a
checkpoint must not change any anomaly score.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from fico.errors import ConfigError, LevelCountMismatch, ShapeMismatch
from fico.losses import cosine_flat


class DiIFiChain(nn.Module):
    """K-1 downsampling blocks: level-1 shape -> shapes of levels 2..K.

    Block k is a stride-2 3x3 convolution doubling channels, batch norm and
    ReLU.  Feeding a (C, H, W) base yields outputs (2**(k-1) * C, H / 2**(k-1),
    W / 2**(k-1)) for k = 2..K.
    """

    def __init__(self, channels: int, k_levels: int):
        super().__init__()
        if k_levels < 2:
            raise ConfigError("the chain needs k_levels >= 2")
        self.channels = channels
        self.k_levels = k_levels
        ch = channels
        # Registered as direct attributes so checkpoint names read k{k}.*.
        for k in range(2, k_levels + 1):
            block = nn.Sequential(
                nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(2 * ch),
                nn.ReLU(inplace=False),
            )
            setattr(self, f"k{k}", block)
            ch *= 2

    def forward(self, base: Tensor) -> list[Tensor]:
        squeeze = base.dim() == 3
        x = base.unsqueeze(0) if squeeze else base
        if x.dim() != 4:
            raise ShapeMismatch(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(base.shape)}")
        if x.shape[1] != self.channels:
            raise ShapeMismatch(f"base carries {x.shape[1]} channels, chain expects {self.channels}")
        grid = 2 ** (self.k_levels - 1)
        h, w = x.shape[-2:]
        if h % grid or w % grid:
            raise ShapeMismatch(f"base {h}x{w} must be divisible by {grid} for K={self.k_levels}")
        outputs = []
        for k in range(2, self.k_levels + 1):
            x = getattr(self, f"k{k}")(x)
            outputs.append(x.squeeze(0) if squeeze else x)
        return outputs


def transform_chain(chain: DiIFiChain, base: Tensor) -> list[Tensor]:
    """Apply the chain to a level-1 compensation signal."""
    return chain(base)


def _check_pair_lists(a: Sequence[Tensor], b: Sequence[Tensor], what: str) -> None:
    if len(a) != len(b):
        raise LevelCountMismatch(f"{what}: {len(a)} vs {len(b)} levels")
    for x, y in zip(a, b):
        if x.shape != y.shape:
            raise ShapeMismatch(f"{what}: shapes {tuple(x.shape)} vs {tuple(y.shape)} differ")


def loss_mse(
    comp_deep: Sequence[Tensor],
    chain_out: Sequence[Tensor],
    comp_deep_views: Sequence[Sequence[Tensor]] = (),
    chain_out_views: Sequence[Sequence[Tensor]] = (),
) -> Tensor:
    """Cross-level regression: mean squared error per level, summed over levels and views.

    Args:
        comp_deep: compensation signals C_k(f^(D_k)) for k = 2..K.
        chain_out: chain outputs at the same shapes.
        comp_deep_views / chain_out_views: the same pair per augmented view.
    """
    if not comp_deep:
        raise LevelCountMismatch("loss_mse needs at least one deep level")
    _check_pair_lists(comp_deep, chain_out, "original signals")
    if len(comp_deep_views) != len(chain_out_views):
        raise ConfigError(
            f"view counts differ: {len(comp_deep_views)} vs {len(chain_out_views)}"
        )
    value = sum(torch.mean((a - b) ** 2) for a, b in zip(comp_deep, chain_out))
    for cv, tv in zip(comp_deep_views, chain_out_views):
        _check_pair_lists(cv, tv, "view signals")
        value = value + sum(torch.mean((a - b) ** 2) for a, b in zip(cv, tv))
    return value


def loss_nor(base: Tensor, base_views: Sequence[Tensor]) -> Tensor:
    """Consistency of the level-1 compensation signal across augmented views.

    Sum over views of whole-tensor cosine distance to the original signal.
    """
    if not base_views:
        raise ConfigError("loss_nor requires at least one augmented view")
    return sum(cosine_flat(base, v) for v in base_views)


def loss_fi(l_lowf, l_mse, l_nor, beta: float, gamma: float):
    """Filtering objective: l_lowf + beta * l_mse + gamma * l_nor."""
    return l_lowf + beta * l_mse + gamma * l_nor
