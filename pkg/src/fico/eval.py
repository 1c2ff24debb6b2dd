"""Anomaly maps, image scores, AUROC and report rendering.

The anomaly map compares teacher and (compensated) student pyramids location
by location, upsamples each level's distance map to input resolution and sums
them, so values live in [0, 2K].  Reports land on disk as delimited tables,
JSON score data and rendered PNGs (heatmaps, histogram figures).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from fico.checkpoint import atomic_write_bytes, atomic_write_text
from fico.errors import ConfigError, LevelCountMismatch, ShapeMismatch, UndefinedMetric
from fico.losses import COSINE_EPS

# Above this sample count AUROC falls back to float arithmetic.
EXACT_AUROC_LIMIT = 10_000


def location_distance_map(teacher_feat: torch.Tensor, student_feat: torch.Tensor) -> np.ndarray:
    """Per-location cosine distance between two (C, H, W) feature maps."""
    if teacher_feat.shape != student_feat.shape:
        raise ShapeMismatch(
            f"feature shapes differ: {tuple(teacher_feat.shape)} vs {tuple(student_feat.shape)}"
        )
    if teacher_feat.dim() != 3:
        raise ShapeMismatch(f"expected (C,H,W) features, got {tuple(teacher_feat.shape)}")
    with torch.no_grad():
        num = (teacher_feat * student_feat).sum(dim=0)
        den = (
            torch.linalg.vector_norm(teacher_feat, dim=0)
            * torch.linalg.vector_norm(student_feat, dim=0)
            + COSINE_EPS
        )
        return (1.0 - num / den).cpu().numpy().astype(np.float32)


def anomaly_map(
    teacher_levels: Sequence[torch.Tensor],
    student_levels: Sequence[torch.Tensor],
    out_size: tuple[int, int],
    smooth_sigma: float = 4.0,
) -> np.ndarray:
    """Summed multi-level distance map at input resolution.

    Args:
        teacher_levels / student_levels: matching (C, H, W) pyramids.
        out_size: (H, W) of the input image.
        smooth_sigma: Gaussian smoothing in pixels; 0 disables it.

    Returns:
        float32 (H, W) array with values in [0, 2 * K].
    """
    if len(teacher_levels) != len(student_levels):
        raise LevelCountMismatch(
            f"pyramids carry {len(teacher_levels)} vs {len(student_levels)} levels"
        )
    if not teacher_levels:
        raise LevelCountMismatch("anomaly_map needs at least one level")
    total = np.zeros(out_size, dtype=np.float64)
    for t, s in zip(teacher_levels, student_levels):
        dist = location_distance_map(t, s)
        if dist.shape != out_size:
            up = F.interpolate(
                torch.from_numpy(dist)[None, None].to(torch.float32),
                size=out_size,
                mode="bilinear",
                align_corners=False,
            )
            dist = up[0, 0].numpy()
        total += dist
    if smooth_sigma > 0:
        total = ndimage.gaussian_filter(total, sigma=smooth_sigma, mode="reflect")
    return total.astype(np.float32)


def image_score(amap: np.ndarray, rule: str = "max", topk_fraction: float = 0.01) -> float:
    """Reduce an anomaly map to one scalar score."""
    if amap.size == 0:
        raise ConfigError("anomaly map is empty")
    if rule == "max":
        return float(amap.max())
    if rule == "topk_mean":
        if not 0.0 < topk_fraction <= 1.0:
            raise ConfigError(f"topk_fraction must be in (0, 1], got {topk_fraction}")
        k = max(1, int(round(topk_fraction * amap.size)))
        flat = np.sort(amap.ravel())
        return float(flat[-k:].mean())
    raise ConfigError(f"unknown score rule {rule!r}; expected 'max' or 'topk_mean'")


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve; ties between classes count half.

    Uses exact rational arithmetic via tied ranks for up to 10^4 samples,
    beyond that a float path with the same formula.

    Raises:
        UndefinedMetric: when only one class is present.
    """
    if len(scores) != len(labels):
        raise ShapeMismatch(f"{len(scores)} scores vs {len(labels)} labels")
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric(f"AUROC undefined with {n_pos} positives and {n_neg} negatives")
    if not np.isfinite(s).all():
        raise ConfigError("scores must be finite")
    order = np.argsort(s, kind="stable")
    sorted_scores = s[order]
    exact = len(s) <= EXACT_AUROC_LIMIT
    # Tied ranks: every member of a tie group takes the group's average rank.
    ranks: list = [0] * len(s)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if exact:
            avg = Fraction((i + 1) + (j + 1), 2)
        else:
            avg = ((i + 1) + (j + 1)) / 2.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    rank_sum = sum(r for r, label in zip(ranks, y) if label == 1)
    if exact:
        u = rank_sum - Fraction(n_pos * (n_pos + 1), 2)
        return float(u / (n_pos * n_neg))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(slots=True)
class ScoredSample:
    sample_id: str
    score: float
    label: int

    def as_dict(self) -> dict:
        return {"sample_id": self.sample_id, "score": self.score, "label": self.label}


def scenario_auroc(samples: Sequence[ScoredSample]) -> float:
    return auroc([s.score for s in samples], [s.label for s in samples])


def save_heatmap_png(amap: np.ndarray, path: str | Path, k_levels: int) -> None:
    """Export an anomaly map as 8-bit grayscale, normalized by the 2K ceiling."""
    norm = np.clip(amap / (2.0 * k_levels), 0.0, 1.0)
    img = Image.fromarray((norm * 255.0 + 0.5).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out, buf.getvalue())


def _histogram(samples: Sequence[ScoredSample], bins: int) -> dict:
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples])
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    normal, _ = np.histogram(scores[labels == 0], bins=edges)
    anomalous, _ = np.histogram(scores[labels == 1], bins=edges)
    return {
        "bin_edges": [float(e) for e in edges],
        "normal": [int(c) for c in normal],
        "anomalous": [int(c) for c in anomalous],
    }


def _render_histogram_figure(scenario: str, hist: dict, path: Path) -> None:
    edges = np.array(hist["bin_edges"])
    centers = (edges[:-1] + edges[1:]) / 2
    width = (edges[1] - edges[0]) * 0.9
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=120)
    ax.bar(centers, hist["normal"], width=width, alpha=0.6, label="normal", color="tab:blue")
    ax.bar(centers, hist["anomalous"], width=width, alpha=0.6, label="anomalous", color="tab:red")
    ax.set_xlabel("image score")
    ax.set_ylabel("count")
    ax.set_title(f"score distribution: {scenario}")
    ax.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def _render_summary_figure(
    table: Mapping[str, Mapping[str, float | None]], scenario_order: Sequence[str], path: Path
) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2), dpi=120)
    averages = [
        np.mean([v[s] for v in table.values() if v.get(s) is not None]) if any(
            v.get(s) is not None for v in table.values()
        ) else np.nan
        for s in scenario_order
    ]
    ax.bar(range(len(scenario_order)), averages, color="tab:green", alpha=0.8)
    ax.set_xticks(range(len(scenario_order)))
    ax.set_xticklabels(scenario_order, rotation=20, ha="right")
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("mean AUROC")
    ax.set_title("AUROC by scenario")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def build_report(
    results: Mapping[str, Mapping[str, Sequence[ScoredSample]]],
    out_dir: str | Path,
    scenario_order: Sequence[str] | None = None,
    bins: int = 32,
) -> dict:
    """Render results.json, results.csv, per-scenario histograms and figures.

    Args:
        results: category -> scenario -> scored samples.  A scenario missing
            for a category is reported as null, never dropped.
        out_dir: report root; files land under it.
        scenario_order: column order; defaults to first-seen order.

    Returns:
        The table dict mirrored into results.json.
    """
    if not results:
        raise ConfigError("report needs at least one category")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if scenario_order is None:
        seen: list[str] = []
        for per_cat in results.values():
            for name in per_cat:
                if name not in seen:
                    seen.append(name)
        scenario_order = seen

    table: dict[str, dict[str, float | None]] = {}
    for category in sorted(results):
        row: dict[str, float | None] = {}
        for scenario in scenario_order:
            samples = results[category].get(scenario)
            row[scenario] = None if not samples else scenario_auroc(samples)
        table[category] = row
    average: dict[str, float | None] = {}
    for scenario in scenario_order:
        values = [row[scenario] for row in table.values() if row[scenario] is not None]
        average[scenario] = float(np.mean(values)) if values else None
    report = {"categories": table, "average": average}
    atomic_write_text(out / "results.json", json.dumps(report, indent=1))

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["category", *scenario_order, "avg"])
    def _row_avg(row: Mapping[str, float | None]) -> str:
        values = [v for v in row.values() if v is not None]
        return f"{np.mean(values):.6f}" if values else ""
    for category, row in table.items():
        cells = [f"{row[s]:.6f}" if row[s] is not None else "" for s in scenario_order]
        writer.writerow([category, *cells, _row_avg(row)])
    writer.writerow(
        ["average", *[f"{average[s]:.6f}" if average[s] is not None else "" for s in scenario_order], _row_avg(average)]
    )
    atomic_write_text(out / "results.csv", buf.getvalue())

    for scenario in scenario_order:
        pooled = [
            s
            for per_cat in results.values()
            if per_cat.get(scenario)
            for s in per_cat[scenario]
        ]
        if not pooled:
            continue
        hist = {"scenario": scenario, **_histogram(pooled, bins)}
        atomic_write_text(out / "hist" / f"{scenario}.json", json.dumps(hist, indent=1))
        _render_histogram_figure(scenario, hist, out / "figures" / f"scores_{scenario}.png")
    _render_summary_figure(table, scenario_order, out / "figures" / "auroc_summary.png")
    return report
