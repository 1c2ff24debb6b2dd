"""Reverse-distillation anomaly detection with feature filtering and compensation.

The package trains a student decoder to reconstruct the multi-scale features
of a frozen teacher encoder on defect-free images.  At test time the
reconstruction gap per spatial location becomes an anomaly map.  Two additions
make the detector robust to photometric and blur shifts between training and
test distributions: a per-level compensation module on the student side
(dynamic convolutions with a residual shortcut) and test-time matching of the
teacher's early feature statistics against a bank built from the training set.
"""

from fico.errors import (
    ConfigError,
    DatasetLayoutError,
    LevelCountMismatch,
    ShapeMismatch,
    TrainingDiverged,
    UndefinedMetric,
)

__all__ = [
    "ConfigError",
    "DatasetLayoutError",
    "LevelCountMismatch",
    "ShapeMismatch",
    "TrainingDiverged",
    "UndefinedMetric",
]

__version__ = "0.1.0"
