"""Distribution-shift compensation on the student pyramid.

One compensation module per pyramid level learns a correction C_k; the
compensated feature is the residual sum C_k(f) + f, so a zeroed module is an
exact identity.  Each module stacks M blocks of dynamic convolution,
instance normalization and LeakyReLU.  A dynamic convolution holds P parallel
kernels and blends them per sample with attention weights derived from the
globally pooled input, which lets the correction depend on the input's
overall statistics, the part a distribution shift moves most.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from fico.errors import ConfigError, LevelCountMismatch, ShapeMismatch
from fico.losses import cosine_per_location
from fico.model import level_channels

KERNEL_COUNT = 4        # parallel kernels per dynamic convolution
ATTENTION_REDUCTION = 4  # bottleneck ratio of the attention head
LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


class DynamicConv2d(nn.Module):
    """3x3 convolution whose kernel is an attention-weighted blend of P kernels.

    The attention head pools the input globally, passes it through a two-layer
    bottleneck and a softmax (temperature 1), and the resulting probability
    vector mixes the kernel bank per sample.  Channel count and spatial size
    are preserved.
    """

    def __init__(self, channels: int, kernel_count: int = KERNEL_COUNT):
        super().__init__()
        self.channels = channels
        self.kernel_count = kernel_count
        self.weight_bank = nn.Parameter(torch.empty(kernel_count, channels, channels, 3, 3))
        self.bias_bank = nn.Parameter(torch.empty(kernel_count, channels))
        hidden = max(1, channels // ATTENTION_REDUCTION)
        self.attend = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=False),
            nn.Linear(hidden, kernel_count),
        )
        self.reset_parameters()

    def reset_parameters(self) -> None:
        fan_in = self.channels * 9
        bound = 1.0 / math.sqrt(fan_in)
        for p in range(self.kernel_count):
            nn.init.kaiming_uniform_(self.weight_bank.data[p], a=math.sqrt(5))
        nn.init.uniform_(self.bias_bank, -bound, bound)

    def zero_(self) -> None:
        """Zero the kernel bank so the convolution outputs zero for any input."""
        with torch.no_grad():
            self.weight_bank.zero_()
            self.bias_bank.zero_()

    def attention(self, x: Tensor) -> Tensor:
        """Per-sample mixing weights, shape (B, P); non-negative, rows sum to 1."""
        if x.dim() != 4:
            raise ShapeMismatch(f"expected (B,C,H,W), got shape {tuple(x.shape)}")
        logits = self.attend(x.mean(dim=(2, 3)))
        return F.softmax(logits, dim=1)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if c != self.channels:
            raise ShapeMismatch(f"input carries {c} channels, kernels expect {self.channels}")
        att = self.attention(x)
        mixed_w = (att @ self.weight_bank.reshape(self.kernel_count, -1)).reshape(
            b * self.channels, self.channels, 3, 3
        )
        mixed_b = (att @ self.bias_bank).reshape(b * self.channels)
        # One grouped conv applies each sample's blended kernel in a single call.
        out = F.conv2d(x.reshape(1, b * c, h, w), mixed_w, bias=mixed_b, padding=1, groups=b)
        return out.reshape(b, self.channels, h, w)


class InstanceNorm(nn.Module):
    """Per-sample per-channel normalization, no affine terms.

    Matches the standard instance norm ((x - mean) / sqrt(var + eps), biased
    variance) but also accepts 1x1 maps, where the output is zero.
    """

    def __init__(self, eps: float = NORM_EPS):
        super().__init__()
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps)


class CompBlock(nn.Module):
    """dynamic conv -> instance norm (no affine) -> LeakyReLU."""

    def __init__(self, channels: int, kernel_count: int = KERNEL_COUNT):
        super().__init__()
        self.conv = DynamicConv2d(channels, kernel_count)
        self.norm = InstanceNorm(NORM_EPS)
        self.act = nn.LeakyReLU(LEAKY_SLOPE, inplace=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.norm(self.conv(x)))


class DiSCoModule(nn.Module):
    """M-block compensation tower for one pyramid level.

    The final block's convolution starts zeroed, so a fresh module emits a
    zero correction and the residual shortcut is an exact identity at
    initialization.
    """

    def __init__(self, channels: int, m_blocks: int = 4, kernel_count: int = KERNEL_COUNT):
        super().__init__()
        if m_blocks < 1:
            raise ConfigError("m_blocks must be >= 1")
        self.m_blocks = m_blocks
        # Registered as direct attributes so checkpoint names read block{m}.*.
        for m in range(1, m_blocks + 1):
            setattr(self, f"block{m}", CompBlock(channels, kernel_count))
        getattr(self, f"block{m_blocks}").conv.zero_()

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for m in range(1, self.m_blocks + 1):
            h = getattr(self, f"block{m}")(h)
        return h


class DiSCoStack(nn.Module):
    """One compensation module per pyramid level (keys k1..kK)."""

    def __init__(self, base_channels: int, k_levels: int, m_blocks: int = 4):
        super().__init__()
        self.k_levels = k_levels
        # Registered as direct attributes so checkpoint names read k{k}.block{m}.*.
        for k in range(1, k_levels + 1):
            setattr(self, f"k{k}", DiSCoModule(level_channels(base_channels, k), m_blocks))

    def _tower(self, level: int) -> DiSCoModule:
        if not 1 <= level <= self.k_levels:
            raise LevelCountMismatch(f"no compensation module for level {level} (K={self.k_levels})")
        return getattr(self, f"k{level}")

    def signal(self, feat: Tensor, level: int) -> Tensor:
        """Raw correction C_k(feat), without the shortcut."""
        squeeze = feat.dim() == 3
        x = feat.unsqueeze(0) if squeeze else feat
        out = self._tower(level)(x)
        return out.squeeze(0) if squeeze else out

    def compensate(self, feat: Tensor, level: int) -> Tensor:
        """Residual shortcut C_k(feat) + feat."""
        return self.signal(feat, level) + feat

    def signals(self, levels: Sequence[Tensor]) -> list[Tensor]:
        self._check_count(levels)
        return [self.signal(f, k) for k, f in enumerate(levels, start=1)]

    def compensate_pyramid(self, levels: Sequence[Tensor]) -> list[Tensor]:
        self._check_count(levels)
        return [self.compensate(f, k) for k, f in enumerate(levels, start=1)]

    def _check_count(self, levels: Sequence[Tensor]) -> None:
        if len(levels) != self.k_levels:
            raise LevelCountMismatch(f"expected {self.k_levels} levels, got {len(levels)}")


def loss_co(
    teacher_levels: Sequence[Tensor],
    comp_levels: Sequence[Tensor],
    teacher_views: Sequence[Sequence[Tensor]],
    comp_views: Sequence[Sequence[Tensor]],
    alpha: float,
) -> Tensor:
    """Compensated alignment objective.

    Sum over levels of per-location cosine distance between teacher features
    and compensated student features, plus alpha times the same sum for every
    augmented view.  Scalar in [0, (1 + alpha * N) * 2K].
    """
    if len(teacher_levels) != len(comp_levels):
        raise LevelCountMismatch(
            f"pyramids carry {len(teacher_levels)} vs {len(comp_levels)} levels"
        )
    if len(teacher_views) != len(comp_views):
        raise ConfigError(
            f"teacher and student view counts differ: {len(teacher_views)} vs {len(comp_views)}"
        )
    value = sum(cosine_per_location(t, c) for t, c in zip(teacher_levels, comp_levels))
    for t_view, c_view in zip(teacher_views, comp_views):
        if len(t_view) != len(teacher_levels) or len(c_view) != len(teacher_levels):
            raise LevelCountMismatch("augmented view pyramids must match the original level count")
        value = value + alpha * sum(
            cosine_per_location(t, c) for t, c in zip(t_view, c_view)
        )
    return value
