"""Teacher encoder, one-class bottleneck and student decoder.

The teacher is a small K-stage residual encoder pretrained on a 4-way
synthetic texture classification task, then frozen.  The bottleneck fuses the
teacher pyramid into a single deep embedding; the student decodes that
embedding back into a pyramid with the teacher's shapes.  Level k carries
base_channels * 2**(k-1) channels at 1 / 2**(k+1) of the input resolution.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from fico.errors import ConfigError, LevelCountMismatch, ShapeMismatch, TrainingDiverged


def level_channels(base_channels: int, level: int) -> int:
    """Channel count of pyramid level `level` (1-based)."""
    return base_channels * (2 ** (level - 1))


def pyramid_shapes(
    base_channels: int, k_levels: int, height: int, width: int
) -> list[tuple[int, int, int]]:
    """Expected (C, H, W) per level for an input of the given size."""
    shapes = []
    for k in range(1, k_levels + 1):
        factor = 2 ** (k + 1)
        shapes.append((level_channels(base_channels, k), height // factor, width // factor))
    return shapes


def validate_pyramid(levels: Sequence[Tensor], base_channels: int, k_levels: int) -> None:
    """Check level count, channel doubling and spatial halving between levels."""
    if len(levels) != k_levels:
        raise LevelCountMismatch(f"expected {k_levels} levels, got {len(levels)}")
    for k, feat in enumerate(levels, start=1):
        if feat.dim() not in (3, 4):
            raise ShapeMismatch(f"level {k} must be (C,H,W) or (B,C,H,W), got {tuple(feat.shape)}")
        c, h, w = feat.shape[-3:]
        if c != level_channels(base_channels, k):
            raise ShapeMismatch(
                f"level {k} carries {c} channels, expected {level_channels(base_channels, k)}"
            )
        if k > 1:
            ph, pw = levels[k - 2].shape[-2:]
            if (ph, pw) != (2 * h, 2 * w):
                raise ShapeMismatch(
                    f"level {k} spatial {h}x{w} does not halve level {k - 1} ({ph}x{pw})"
                )


class ResidualBlock(nn.Module):
    """conv-bn-relu-conv-bn with a projection skip when shape changes."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=False)
        if stride != 1 or in_channels != out_channels:
            self.skip: nn.Module = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.skip(x))


class TeacherNet(nn.Module):
    """Frozen multi-scale feature extractor.

    A stride-2 stem conv plus a stride-2 pool bring the input to 1/4
    resolution, then K residual stages emit the pyramid.  Once frozen the
    module stays in eval mode and its parameters stop receiving gradients.
    """

    def __init__(self, base_channels: int = 16, k_levels: int = 3, in_channels: int = 3):
        super().__init__()
        if k_levels < 1:
            raise ConfigError("k_levels must be >= 1")
        self.base_channels = base_channels
        self.k_levels = k_levels
        self.frozen = False
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(base_channels),
            nn.ReLU(inplace=False),
            nn.MaxPool2d(kernel_size=2, stride=2),
        )
        stages = [ResidualBlock(base_channels, base_channels, stride=1)]
        for k in range(2, k_levels + 1):
            stages.append(
                ResidualBlock(level_channels(base_channels, k - 1), level_channels(base_channels, k), stride=2)
            )
        self.stages = nn.ModuleList(stages)

    def _check_input(self, x: Tensor) -> None:
        if x.dim() != 4:
            raise ShapeMismatch(f"expected (B,C,H,W) input, got shape {tuple(x.shape)}")
        grid = 2 ** (self.k_levels + 1)
        h, w = x.shape[-2:]
        if h % grid or w % grid:
            raise ShapeMismatch(f"input {h}x{w} must be divisible by {grid} for {self.k_levels} levels")

    def forward(self, x: Tensor) -> list[Tensor]:
        self._check_input(x)
        h = self.stem(x)
        levels = []
        for stage in self.stages:
            h = stage(h)
            levels.append(h)
        return levels

    def forward_from_level1(self, f1: Tensor) -> list[Tensor]:
        """Recompute levels 2..K from a (possibly modified) level-1 map."""
        levels = []
        h = f1
        for stage in self.stages[1:]:
            h = stage(h)
            levels.append(h)
        return levels

    def freeze(self) -> "TeacherNet":
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True) -> "TeacherNet":
        # A frozen teacher never re-enters train mode (batch-norm statistics stay fixed).
        return super().train(mode and not self.frozen)


class BottleneckOCBE(nn.Module):
    """One-class bottleneck: fuse the pyramid into a single deep embedding.

    Levels 1..K-1 are brought to level-K resolution by stride-2 conv blocks
    that double channels at each step, concatenated with level K, and
    projected by one residual block down to level-K channels.
    """

    def __init__(self, base_channels: int = 16, k_levels: int = 3):
        super().__init__()
        self.base_channels = base_channels
        self.k_levels = k_levels
        deep = level_channels(base_channels, k_levels)
        chains = []
        for k in range(1, k_levels):
            steps = []
            ch = level_channels(base_channels, k)
            for _ in range(k_levels - k):
                steps.append(nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1, bias=False))
                steps.append(nn.BatchNorm2d(2 * ch))
                steps.append(nn.ReLU(inplace=False))
                ch *= 2
            chains.append(nn.Sequential(*steps))
        self.down = nn.ModuleList(chains)
        self.project = ResidualBlock(k_levels * deep, deep)

    def forward(self, levels: Sequence[Tensor]) -> Tensor:
        validate_pyramid(levels, self.base_channels, self.k_levels)
        parts = [chain(feat) for chain, feat in zip(self.down, levels[:-1])]
        parts.append(levels[-1])
        return self.project(torch.cat(parts, dim=1))


class StudentNet(nn.Module):
    """Decode the bottleneck embedding back into a teacher-shaped pyramid.

    The deepest stage keeps resolution; each following stage is a nearest
    x2 upsample plus a channel-halving residual block.  Levels are returned
    finest-first to mirror the teacher's output order.
    """

    def __init__(self, base_channels: int = 16, k_levels: int = 3):
        super().__init__()
        self.base_channels = base_channels
        self.k_levels = k_levels
        deep = level_channels(base_channels, k_levels)
        self.deep_stage = ResidualBlock(deep, deep)
        ups = []
        ch = deep
        for _ in range(k_levels - 1):
            ups.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    ResidualBlock(ch, ch // 2),
                )
            )
            ch //= 2
        self.up_stages = nn.ModuleList(ups)

    def forward(self, embedding: Tensor) -> list[Tensor]:
        deep = level_channels(self.base_channels, self.k_levels)
        if embedding.shape[-3] != deep:
            raise ShapeMismatch(f"embedding carries {embedding.shape[-3]} channels, expected {deep}")
        levels = [self.deep_stage(embedding)]
        h = levels[0]
        for stage in self.up_stages:
            h = stage(h)
            levels.append(h)
        return levels[::-1]


class TextureClassifier(nn.Module):
    """Teacher backbone plus a pooled linear head for the auxiliary task."""

    def __init__(self, teacher: TeacherNet, num_classes: int):
        super().__init__()
        self.teacher = teacher
        self.head = nn.Linear(level_channels(teacher.base_channels, teacher.k_levels), num_classes)

    def forward(self, x: Tensor) -> Tensor:
        deep = self.teacher(x)[-1]
        return self.head(deep.mean(dim=(2, 3)))


def make_teacher(
    aux_root: str | Path,
    seed: int,
    base_channels: int = 16,
    k_levels: int = 3,
    min_accuracy: float = 0.90,
    max_epochs: int = 40,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
) -> tuple[TeacherNet, dict]:
    """Train the teacher on the auxiliary texture-classification set and freeze it.

    Args:
        aux_root: directory with one subdirectory of PNGs per texture class.
        seed: controls init and batch order; same seed gives identical weights.
        min_accuracy: stop once accuracy on the auxiliary set reaches this.

    Returns:
        (frozen teacher, metrics dict with accuracy / epochs / classes).

    Raises:
        TrainingDiverged: accuracy still below min_accuracy after max_epochs.
    """
    from fico.data import list_class_folders, load_image

    classes, files, labels = list_class_folders(aux_root)
    if len(classes) < 2:
        raise ConfigError(f"auxiliary set at {aux_root} needs >= 2 classes, found {len(classes)}")

    torch.manual_seed(seed)
    teacher = TeacherNet(base_channels=base_channels, k_levels=k_levels)
    clf = TextureClassifier(teacher, num_classes=len(classes))
    images = torch.from_numpy(np.stack([load_image(f) for f in files]))
    targets = torch.tensor(labels, dtype=torch.long)

    opt = torch.optim.Adam(clf.parameters(), lr=learning_rate)
    ce = nn.CrossEntropyLoss()
    rng = np.random.default_rng(seed)
    accuracy = 0.0
    epochs_run = 0
    for epoch in range(max_epochs):
        clf.train()
        order = rng.permutation(len(files))
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            opt.zero_grad()
            loss = ce(clf(images[idx]), targets[idx])
            loss.backward()
            opt.step()
        clf.eval()
        with torch.no_grad():
            pred = clf(images).argmax(dim=1)
        accuracy = float((pred == targets).float().mean())
        epochs_run = epoch + 1
        if accuracy >= min_accuracy:
            break
    if accuracy < min_accuracy:
        raise TrainingDiverged(
            f"teacher accuracy {accuracy:.3f} below {min_accuracy} after {max_epochs} epochs"
        )
    teacher.freeze()
    metrics = {"accuracy": accuracy, "epochs": epochs_run, "classes": classes}
    return teacher, metrics
