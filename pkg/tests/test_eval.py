"""Tests for anomaly maps, image scoring, AUROC, and report rendering."""

import json
from fractions import Fraction

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from PIL import Image

from fico.errors import ConfigError, LevelCountMismatch, ShapeMismatch, UndefinedMetric
from fico.eval import (
    ScoredSample,
    anomaly_map,
    auroc,
    build_report,
    image_score,
    location_distance_map,
    save_heatmap_png,
    scenario_auroc,
)


def pairwise_auroc(scores, labels):
    """Brute-force pairwise AUROC with tie credit 1/2, as an exact rational."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    greater = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return Fraction(2 * greater + ties, 2 * len(pos) * len(neg))


# ---------------------------------------------------------------------------
# Per-location distance maps


def test_distance_map_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        c = int(rng.integers(1, 6))
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        t = rng.normal(size=(c, h, w))
        s = rng.normal(size=(c, h, w))
        got = location_distance_map(
            torch.from_numpy(t.astype(np.float32)), torch.from_numpy(s.astype(np.float32))
        )
        for i in range(h):
            for j in range(w):
                tv, sv = t[:, i, j], s[:, i, j]
                want = 1.0 - tv @ sv / (np.linalg.norm(tv) * np.linalg.norm(sv) + 1e-8)
                assert abs(float(got[i, j]) - want) < 1e-5


def test_distance_map_identical_and_orthogonal():
    t = torch.zeros(2, 3, 3)
    t[0] = 1.0
    same = location_distance_map(t, t.clone())
    assert np.allclose(same, 0.0, atol=1e-6)
    s = torch.zeros(2, 3, 3)
    s[1] = 1.0
    ortho = location_distance_map(t, s)
    assert np.allclose(ortho, 1.0, atol=1e-6)
    assert ortho.dtype == np.float32


def test_distance_map_rejections():
    with pytest.raises(ShapeMismatch):
        location_distance_map(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))
    with pytest.raises(ShapeMismatch):
        location_distance_map(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 3))


# ---------------------------------------------------------------------------
# Anomaly maps


def test_anomaly_map_single_level_no_smoothing_is_the_distance_map():
    rng = np.random.default_rng(1)
    t = torch.from_numpy(rng.normal(size=(4, 6, 6)).astype(np.float32))
    s = torch.from_numpy(rng.normal(size=(4, 6, 6)).astype(np.float32))
    amap = anomaly_map([t], [s], out_size=(6, 6), smooth_sigma=0.0)
    assert np.array_equal(amap, location_distance_map(t, s))


def test_anomaly_map_upsamples_and_sums_levels():
    rng = np.random.default_rng(2)
    t1 = torch.from_numpy(rng.normal(size=(2, 4, 4)).astype(np.float32))
    s1 = torch.from_numpy(rng.normal(size=(2, 4, 4)).astype(np.float32))
    t2 = torch.from_numpy(rng.normal(size=(4, 2, 2)).astype(np.float32))
    s2 = torch.from_numpy(rng.normal(size=(4, 2, 2)).astype(np.float32))
    amap = anomaly_map([t1, t2], [s1, s2], out_size=(4, 4), smooth_sigma=0.0)
    assert amap.shape == (4, 4)
    assert amap.dtype == np.float32
    up2 = F.interpolate(
        torch.from_numpy(location_distance_map(t2, s2))[None, None],
        size=(4, 4),
        mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    want = location_distance_map(t1, s1).astype(np.float64) + up2
    assert np.allclose(amap, want, atol=1e-6)
    assert amap.min() >= 0.0 and amap.max() <= 4.0 + 1e-6


def test_anomaly_map_flags_the_odd_location():
    t = torch.zeros(2, 5, 5)
    t[0] = 1.0
    s = t.clone()
    s[:, 2, 3] = torch.tensor([0.0, 1.0])  # orthogonal at one location
    amap = anomaly_map([t], [s], out_size=(5, 5), smooth_sigma=0.0)
    assert abs(float(amap[2, 3]) - 1.0) < 1e-5
    rest = amap.copy()
    rest[2, 3] = 0.0
    assert np.allclose(rest, 0.0, atol=1e-5)
    assert float(np.argmax(amap)) == 2 * 5 + 3


def test_smoothing_never_raises_the_peak():
    rng = np.random.default_rng(3)
    t = torch.from_numpy(rng.normal(size=(3, 8, 8)).astype(np.float32))
    s = torch.from_numpy(rng.normal(size=(3, 8, 8)).astype(np.float32))
    sharp = anomaly_map([t], [s], out_size=(8, 8), smooth_sigma=0.0)
    smooth = anomaly_map([t], [s], out_size=(8, 8), smooth_sigma=4.0)
    assert smooth.max() <= sharp.max() + 1e-6
    assert not np.array_equal(smooth, sharp)


def test_anomaly_map_rejections():
    t = torch.zeros(2, 4, 4)
    with pytest.raises(LevelCountMismatch):
        anomaly_map([t, t], [t], out_size=(4, 4))
    with pytest.raises(LevelCountMismatch):
        anomaly_map([], [], out_size=(4, 4))


# ---------------------------------------------------------------------------
# Image scores


def test_image_score_rules():
    amap = np.zeros((4, 4), dtype=np.float32)
    assert image_score(amap) == 0.0
    amap[1, 2] = 0.7
    assert image_score(amap, rule="max") == pytest.approx(0.7)
    flat = np.array([0.0, 1.0, 2.0, 3.0], dtype=np.float32)
    assert image_score(flat, rule="topk_mean", topk_fraction=0.5) == pytest.approx(2.5)
    assert image_score(flat, rule="topk_mean", topk_fraction=1.0) == pytest.approx(flat.mean())
    # a fraction below one element still uses the single largest value
    assert image_score(flat, rule="topk_mean", topk_fraction=0.01) == pytest.approx(3.0)


def test_image_score_is_permutation_invariant():
    rng = np.random.default_rng(4)
    amap = rng.uniform(size=(6, 6)).astype(np.float32)
    shuffled = rng.permutation(amap.ravel()).reshape(6, 6)
    for rule in ("max", "topk_mean"):
        assert image_score(amap, rule=rule) == pytest.approx(image_score(shuffled, rule=rule))


def test_image_score_rejections():
    with pytest.raises(ConfigError):
        image_score(np.zeros((0,), dtype=np.float32))
    with pytest.raises(ConfigError):
        image_score(np.zeros((2, 2)), rule="median")
    with pytest.raises(ConfigError):
        image_score(np.zeros((2, 2)), rule="topk_mean", topk_fraction=0.0)
    with pytest.raises(ConfigError):
        image_score(np.zeros((2, 2)), rule="topk_mean", topk_fraction=1.5)


# ---------------------------------------------------------------------------
# AUROC


def test_auroc_frozen_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auroc([0.8, 0.9, 0.1, 0.2], [0, 0, 1, 1]) == 0.0
    assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    # one of two pairs tied: (1*1 + 0.5*1) / 2
    assert auroc([0.3, 0.5, 0.5], [0, 0, 1]) == 0.75


def test_auroc_equals_pairwise_count_on_random_instances():
    rng = np.random.default_rng(5)
    for trial in range(500):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[0] = 1
        if labels.sum() == n:
            labels[0] = 0
        if trial % 2 == 0:
            scores = rng.integers(0, 8, size=n).astype(np.float64)  # heavy ties
        else:
            scores = rng.normal(size=n)
        assert auroc(scores, labels) == float(pairwise_auroc(scores, labels))


def test_auroc_is_invariant_under_monotone_transforms():
    rng = np.random.default_rng(6)
    scores = rng.normal(size=60)
    labels = rng.integers(0, 2, size=60)
    labels[0], labels[1] = 0, 1
    base = auroc(scores, labels)
    assert auroc(3.0 * scores + 7.0, labels) == base
    assert auroc(np.tanh(scores), labels) == base


def test_auroc_rejections():
    with pytest.raises(UndefinedMetric):
        auroc([0.1, 0.2], [0, 0])
    with pytest.raises(UndefinedMetric):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ShapeMismatch):
        auroc([0.1, 0.2], [0, 1, 1])
    with pytest.raises(ConfigError):
        auroc([0.1, float("nan")], [0, 1])


def test_scenario_auroc_unpacks_samples():
    samples = [
        ScoredSample("good_000", 0.1, 0),
        ScoredSample("good_001", 0.2, 0),
        ScoredSample("scratch_000", 0.9, 1),
    ]
    assert scenario_auroc(samples) == 1.0
    assert samples[0].as_dict() == {"sample_id": "good_000", "score": 0.1, "label": 0}


# ---------------------------------------------------------------------------
# Rendering


def test_heatmap_png_encodes_the_normalized_map(tmp_path):
    amap = np.array([[0.0, 1.0], [2.0, 6.0]], dtype=np.float32)
    path = tmp_path / "maps" / "sample.png"
    save_heatmap_png(amap, path, k_levels=2)
    with Image.open(path) as img:
        assert img.mode == "L"
        arr = np.asarray(img)
    want = (np.clip(amap / 4.0, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    assert np.array_equal(arr, want)


def make_samples(rng, n_good, n_bad, shift):
    out = [ScoredSample(f"good_{i}", float(rng.normal(0.2, 0.05)), 0) for i in range(n_good)]
    out += [ScoredSample(f"bad_{i}", float(rng.normal(0.2 + shift, 0.05)), 1) for i in range(n_bad)]
    return out


def test_build_report_layout_and_contents(tmp_path):
    rng = np.random.default_rng(7)
    results = {
        "stripes": {"clean": make_samples(rng, 8, 4, 0.5), "noisy": make_samples(rng, 8, 4, 0.2)},
        "checker": {"clean": make_samples(rng, 8, 4, 0.6)},
    }
    report = build_report(results, tmp_path, scenario_order=["clean", "noisy", "absent"])
    on_disk = json.loads((tmp_path / "results.json").read_text())
    assert on_disk == json.loads(json.dumps(report))
    assert sorted(report["categories"]) == ["checker", "stripes"]
    # a scenario a category never ran shows up as null, not as a dropped key
    assert report["categories"]["checker"]["noisy"] is None
    assert report["categories"]["checker"]["absent"] is None
    assert report["average"]["absent"] is None
    assert report["average"]["noisy"] == report["categories"]["stripes"]["noisy"]
    clean = [report["categories"][c]["clean"] for c in ("checker", "stripes")]
    assert report["average"]["clean"] == pytest.approx(float(np.mean(clean)))
    for value in clean:
        assert 0.0 <= value <= 1.0

    csv_lines = (tmp_path / "results.csv").read_text().strip().splitlines()
    assert csv_lines[0] == "category,clean,noisy,absent,avg"
    assert len(csv_lines) == 4  # header, two categories, average row
    assert csv_lines[-1].startswith("average,")

    assert (tmp_path / "hist" / "clean.json").is_file()
    assert (tmp_path / "hist" / "noisy.json").is_file()
    assert not (tmp_path / "hist" / "absent.json").exists()
    assert (tmp_path / "figures" / "scores_clean.png").is_file()
    assert (tmp_path / "figures" / "scores_noisy.png").is_file()
    assert not (tmp_path / "figures" / "scores_absent.png").exists()
    assert (tmp_path / "figures" / "auroc_summary.png").is_file()
    hist = json.loads((tmp_path / "hist" / "clean.json").read_text())
    assert sum(hist["normal"]) == 16
    assert sum(hist["anomalous"]) == 8
    assert len(hist["bin_edges"]) == 33


def test_build_report_rejects_empty_results(tmp_path):
    with pytest.raises(ConfigError):
        build_report({}, tmp_path)
