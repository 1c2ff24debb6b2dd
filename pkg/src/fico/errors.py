"""Exception types shared across the package."""

from __future__ import annotations


class ShapeMismatch(ValueError):
    """Two tensors that must agree in shape do not."""


class LevelCountMismatch(ValueError):
    """Two feature pyramids carry a different number of levels."""


class ConfigError(ValueError):
    """A run configuration is malformed or internally inconsistent."""


class DatasetLayoutError(ValueError):
    """A dataset directory does not follow the expected layout."""


class UndefinedMetric(ValueError):
    """A metric is undefined for the given inputs (e.g. one-class AUROC)."""


class TrainingDiverged(RuntimeError):
    """A loss component became non-finite during training."""
