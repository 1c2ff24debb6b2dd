"""Cosine-distance training objectives and the gradient self-check.

Two cosine granularities appear on purpose and must not be merged:

* per-location: channel vectors are compared at every spatial position and
  the distances averaged over positions.  Used when teacher and student maps
  are aligned pixel for pixel (reconstruction and compensation terms).
* flat: the whole tensor is compared as one vector per sample.  Used when
  only the global direction matters (embedding and low-level consistency
  terms between an image and its augmented views).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
from torch import Tensor

from fico.errors import ConfigError, LevelCountMismatch, ShapeMismatch

# Keeps zero vectors at distance 1 instead of NaN.
COSINE_EPS = 1e-8

MODES = ("RD", "GNL", "DISCO", "DISCO+DIIFI", "FICO")


@dataclass(frozen=True, slots=True)
class LossWeights:
    """Scalar weights for the composite objectives."""

    alpha: float = 0.05
    beta: float = 0.02
    gamma: float = 1.0


def _as_batched(t: Tensor) -> Tensor:
    if t.dim() == 3:
        return t.unsqueeze(0)
    if t.dim() == 4:
        return t
    raise ShapeMismatch(f"expected a (C,H,W) or (B,C,H,W) tensor, got shape {tuple(t.shape)}")


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def cosine_per_location(a: Tensor, b: Tensor) -> Tensor:
    """Mean over spatial locations of 1 - cos between channel vectors.

    Args:
        a, b: matching (C,H,W) or (B,C,H,W) tensors.

    Returns:
        Scalar tensor in [0, 2].
    """
    a4 = _as_batched(a)
    b4 = _as_batched(b)
    _check_same_shape(a4, b4)
    num = (a4 * b4).sum(dim=1)
    den = torch.linalg.vector_norm(a4, dim=1) * torch.linalg.vector_norm(b4, dim=1) + COSINE_EPS
    return (1.0 - num / den).mean()


def cosine_flat(a: Tensor, b: Tensor) -> Tensor:
    """1 - cos between whole tensors flattened per sample, averaged over the batch.

    Args:
        a, b: matching (C,H,W) or (B,C,H,W) tensors.

    Returns:
        Scalar tensor in [0, 2].
    """
    a4 = _as_batched(a)
    b4 = _as_batched(b)
    _check_same_shape(a4, b4)
    av = a4.flatten(start_dim=1)
    bv = b4.flatten(start_dim=1)
    num = (av * bv).sum(dim=1)
    den = torch.linalg.vector_norm(av, dim=1) * torch.linalg.vector_norm(bv, dim=1) + COSINE_EPS
    return (1.0 - num / den).mean()


def _check_levels(a: Sequence[Tensor], b: Sequence[Tensor]) -> None:
    if len(a) != len(b):
        raise LevelCountMismatch(f"pyramids carry {len(a)} vs {len(b)} levels")


def loss_rd(teacher_levels: Sequence[Tensor], student_levels: Sequence[Tensor]) -> Tensor:
    """Reconstruction objective: sum over levels of per-location cosine distance."""
    _check_levels(teacher_levels, student_levels)
    if not teacher_levels:
        raise LevelCountMismatch("pyramids must carry at least one level")
    return sum(cosine_per_location(t, s) for t, s in zip(teacher_levels, student_levels))


def loss_abs(phi: Tensor, phi_views: Sequence[Tensor]) -> Tensor:
    """Embedding consistency: sum over views of flat cosine distance to the original."""
    if not phi_views:
        raise ConfigError("loss_abs requires at least one augmented view")
    return sum(cosine_flat(phi, pv) for pv in phi_views)


def loss_lowf(d1: Tensor, d1_views: Sequence[Tensor]) -> Tensor:
    """Low-level consistency: sum over views of flat cosine distance on the finest student map."""
    if not d1_views:
        raise ConfigError("loss_lowf requires at least one augmented view")
    return sum(cosine_flat(d1, dv) for dv in d1_views)


@dataclass(slots=True)
class LossBreakdown:
    """Per-component values of one training step; unused components stay None."""

    l_rd: Tensor | float | None = None
    l_abs: Tensor | float | None = None
    l_lowf: Tensor | float | None = None
    l_co: Tensor | float | None = None
    l_mse: Tensor | float | None = None
    l_nor: Tensor | float | None = None

    def present(self) -> dict[str, float]:
        out = {}
        for name in ("l_rd", "l_abs", "l_lowf", "l_co", "l_mse", "l_nor"):
            value = getattr(self, name)
            if value is not None:
                out[name] = float(value.detach()) if isinstance(value, Tensor) else float(value)
        return out


# Components each mode consumes; total() rejects breakdowns missing any of them.
_MODE_COMPONENTS = {
    "RD": ("l_rd",),
    "GNL": ("l_rd", "l_abs", "l_lowf"),
    "DISCO": ("l_co", "l_abs", "l_lowf"),
    "DISCO+DIIFI": ("l_co", "l_abs", "l_lowf", "l_mse"),
    "FICO": ("l_co", "l_abs", "l_lowf", "l_mse", "l_nor"),
}


def total(mode: str, parts: LossBreakdown, weights: LossWeights):
    """Combine components into the training objective for `mode`.

    RD reconstructs only.  GNL adds the two view-consistency terms.  DISCO
    swaps the reconstruction term for the compensated one, DISCO+DIIFI adds
    the weighted cross-level regression term, and FICO adds the weighted
    compensation-signal consistency term on top.
    """
    if mode not in _MODE_COMPONENTS:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    for name in _MODE_COMPONENTS[mode]:
        if getattr(parts, name) is None:
            raise ConfigError(f"mode {mode} requires component {name}")
    if mode == "RD":
        return parts.l_rd
    if mode == "GNL":
        return parts.l_rd + parts.l_abs + parts.l_lowf
    if mode == "DISCO":
        return parts.l_co + parts.l_abs + parts.l_lowf
    if mode == "DISCO+DIIFI":
        return parts.l_co + parts.l_abs + parts.l_lowf + weights.beta * parts.l_mse
    l_fi = parts.l_lowf + weights.beta * parts.l_mse + weights.gamma * parts.l_nor
    return l_fi + parts.l_abs + parts.l_co


@dataclass(slots=True)
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    finite: bool
    grad_abs_max: float = 0.0

    @property
    def passed(self) -> bool:
        return self.finite and math.isfinite(self.max_rel_err)


@dataclass(slots=True)
class GradCheckReport:
    tolerance: float
    step: float
    entries: list[GradCheckEntry] = field(default_factory=list)
    runtime_s: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def degenerate(self) -> bool:
        """True when the loss had zero gradient for every checked entry.

        Agreement between two all-zero gradients verifies nothing, so a
        degenerate report never counts as a pass.
        """
        return all(e.grad_abs_max == 0.0 for e in self.entries)

    @property
    def passed(self) -> bool:
        return (
            all(e.finite for e in self.entries)
            and self.max_rel_err < self.tolerance
            and not self.degenerate
        )

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "degenerate": self.degenerate,
            "tolerance": self.tolerance,
            "step": self.step,
            "max_rel_err": self.max_rel_err,
            "runtime_s": self.runtime_s,
            "params": {
                e.name: {
                    "max_rel_err": e.max_rel_err,
                    "worst_index": e.worst_index,
                    "analytic": e.analytic,
                    "numeric": e.numeric,
                    "finite": e.finite,
                    "grad_abs_max": e.grad_abs_max,
                }
                for e in self.entries
            },
        }


# Below this scale the comparison degrades to an absolute one; keeps dead
# units (true gradient 0) from failing on rounding noise.
_REL_FLOOR = 1e-6


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients of loss_fn against central finite differences.

    Args:
        loss_fn: zero-argument closure recomputing the scalar loss from the
            current values of `params`.  Must be deterministic.
        params: name -> float64 leaf tensor with requires_grad, each reachable
            from loss_fn's output.
        tolerance: relative-error threshold for the pass verdict.
        step: central-difference step h.

    Returns:
        Report with per-parameter worst relative error and a pass flag.
    """
    if not params:
        raise ConfigError("gradcheck requires at least one parameter")
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ConfigError(f"gradcheck runs in float64; parameter {name} has dtype {p.dtype}")
        if not p.requires_grad:
            raise ConfigError(f"parameter {name} does not require grad")

    started = time.perf_counter()
    loss = loss_fn()
    ordered = list(params.items())
    grads = torch.autograd.grad(loss, [p for _, p in ordered], allow_unused=True)

    report = GradCheckReport(tolerance=tolerance, step=step)
    for (name, p), g in zip(ordered, grads):
        analytic = torch.zeros_like(p) if g is None else g.detach().clone()
        flat = p.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        grad_abs_max = float(analytic.abs().max()) if analytic.numel() else 0.0
        worst = GradCheckEntry(name, 0.0, -1, 0.0, 0.0, finite=True, grad_abs_max=grad_abs_max)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = float(loss_fn())
                flat[i] = orig - step
                f_minus = float(loss_fn())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(a_flat[i])
                if not (math.isfinite(a) and math.isfinite(numeric)):
                    worst = GradCheckEntry(
                        name, math.inf, i, a, numeric, finite=False, grad_abs_max=grad_abs_max
                    )
                    break
                rel = abs(a - numeric) / max(abs(a), abs(numeric), _REL_FLOOR)
                if rel > worst.max_rel_err:
                    worst = GradCheckEntry(
                        name, rel, i, a, numeric, finite=True, grad_abs_max=grad_abs_max
                    )
        report.entries.append(worst)
    report.runtime_s = time.perf_counter() - started
    return report
