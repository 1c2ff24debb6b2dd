"""Encoder, bottleneck and decoder contracts: shapes, determinism, freezing."""

import numpy as np
import pytest
import torch

from fico.checkpoint import (
    CheckpointReader,
    load_module,
    module_arrays,
    module_digest,
    save_checkpoint,
)
from fico.errors import ConfigError, LevelCountMismatch, ShapeMismatch, TrainingDiverged
from fico.model import (
    BottleneckOCBE,
    StudentNet,
    TeacherNet,
    level_channels,
    make_teacher,
    pyramid_shapes,
    validate_pyramid,
)


def test_level_channels_doubling():
    assert [level_channels(16, k) for k in (1, 2, 3)] == [16, 32, 64]
    assert level_channels(2, 4) == 16


def test_pyramid_shapes_frozen_example():
    assert pyramid_shapes(16, 3, 64, 64) == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]


def test_pyramid_shapes_random_sizes():
    for trial in range(40):
        g = torch.Generator().manual_seed(700 + trial)
        c0 = int(torch.randint(1, 9, (1,), generator=g))
        k = int(torch.randint(1, 5, (1,), generator=g))
        grid = 2 ** (k + 1)
        h = grid * int(torch.randint(1, 5, (1,), generator=g))
        w = grid * int(torch.randint(1, 5, (1,), generator=g))
        shapes = pyramid_shapes(c0, k, h, w)
        assert len(shapes) == k
        for i, (c, sh, sw) in enumerate(shapes, start=1):
            assert c == c0 * 2 ** (i - 1)
            assert sh == h // 2 ** (i + 1)
            assert sw == w // 2 ** (i + 1)


def test_validate_pyramid_accepts_teacher_output():
    teacher = TeacherNet(base_channels=4, k_levels=3)
    levels = teacher(torch.rand((2, 3, 32, 32)))
    validate_pyramid(levels, 4, 3)


def test_validate_pyramid_rejections():
    good = [torch.zeros((1, 4, 8, 8)), torch.zeros((1, 8, 4, 4))]
    validate_pyramid(good, 4, 2)
    with pytest.raises(LevelCountMismatch):
        validate_pyramid(good[:1], 4, 2)
    bad_channels = [torch.zeros((1, 4, 8, 8)), torch.zeros((1, 6, 4, 4))]
    with pytest.raises(ShapeMismatch):
        validate_pyramid(bad_channels, 4, 2)
    bad_spatial = [torch.zeros((1, 4, 8, 8)), torch.zeros((1, 8, 3, 3))]
    with pytest.raises(ShapeMismatch):
        validate_pyramid(bad_spatial, 4, 2)


def test_encode_shape_law_and_finiteness():
    torch.manual_seed(0)
    teacher = TeacherNet(base_channels=16, k_levels=3)
    levels = teacher(torch.zeros((1, 3, 64, 64)))
    assert [tuple(t.shape[1:]) for t in levels] == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]
    assert all(torch.isfinite(t).all() for t in levels)


def test_encode_rejects_indivisible_input():
    teacher = TeacherNet(base_channels=4, k_levels=3)
    with pytest.raises(ShapeMismatch):
        teacher(torch.zeros((1, 3, 60, 64)))
    with pytest.raises(ShapeMismatch):
        teacher(torch.zeros((3, 64, 64)))


def test_frozen_teacher_is_deterministic_and_stays_eval():
    torch.manual_seed(1)
    teacher = TeacherNet(base_channels=4, k_levels=2).freeze()
    assert teacher.frozen
    assert not teacher.training
    teacher.train()
    assert not teacher.training
    assert all(not p.requires_grad for p in teacher.parameters())
    x = torch.rand((2, 3, 32, 32), generator=torch.Generator().manual_seed(2))
    a = teacher(x)
    b = teacher(x)
    for ta, tb in zip(a, b):
        assert torch.equal(ta, tb)


def test_forward_from_level1_matches_full_forward():
    torch.manual_seed(3)
    teacher = TeacherNet(base_channels=4, k_levels=3).freeze()
    x = torch.rand((1, 3, 64, 64), generator=torch.Generator().manual_seed(4))
    levels = teacher(x)
    rebuilt = teacher.forward_from_level1(levels[0])
    assert len(rebuilt) == 2
    for got, want in zip(rebuilt, levels[1:]):
        assert torch.equal(got, want)


def test_bottleneck_output_shape_and_determinism():
    torch.manual_seed(5)
    teacher = TeacherNet(base_channels=16, k_levels=3).freeze()
    bottleneck = BottleneckOCBE(base_channels=16, k_levels=3).eval()
    levels = teacher(torch.rand((2, 3, 64, 64), generator=torch.Generator().manual_seed(6)))
    phi = bottleneck(levels)
    assert tuple(phi.shape) == (2, 64, 4, 4)
    assert torch.isfinite(phi).all()
    assert torch.equal(phi, bottleneck(levels))
    zero_levels = [torch.zeros_like(t) for t in levels]
    assert torch.isfinite(bottleneck(zero_levels)).all()


def test_bottleneck_rejects_level_mismatch():
    bottleneck = BottleneckOCBE(base_channels=4, k_levels=3)
    with pytest.raises(LevelCountMismatch):
        bottleneck([torch.zeros((1, 4, 8, 8))])


def test_decode_mirrors_teacher_shapes():
    torch.manual_seed(7)
    student = StudentNet(base_channels=16, k_levels=3).eval()
    out = student(torch.rand((2, 64, 4, 4), generator=torch.Generator().manual_seed(8)))
    assert [tuple(t.shape[1:]) for t in out] == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]
    assert all(torch.isfinite(t).all() for t in out)


def test_decode_rejects_wrong_channels():
    student = StudentNet(base_channels=4, k_levels=2)
    with pytest.raises(ShapeMismatch):
        student(torch.zeros((1, 6, 4, 4)))


def test_decode_gradient_matches_finite_differences():
    # d(output entry)/d(embedding) against central differences at 64-bit.
    torch.manual_seed(9)
    student = StudentNet(base_channels=2, k_levels=2).double().eval()
    g = torch.Generator().manual_seed(10)
    emb = torch.randn((1, 4, 2, 2), generator=g, dtype=torch.float64, requires_grad=True)
    levels = student(emb)
    picks = [(0, (0, 0, 1, 1)), (0, (0, 1, 3, 2)), (1, (0, 2, 0, 1)), (1, (0, 3, 1, 0))]
    h = 1e-5
    for level_idx, pos in picks:
        out = student(emb)[level_idx][pos]
        (grad,) = torch.autograd.grad(out, emb, retain_graph=False)
        flat = emb.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                f_plus = float(student(emb)[level_idx][pos])
                flat[i] = orig - h
                f_minus = float(student(emb)[level_idx][pos])
                flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = float(gflat[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            assert rel < 1e-4, f"level {level_idx} pos {pos} entry {i}: rel {rel}"


def test_make_teacher_reaches_accuracy_and_freezes(small_teacher):
    teacher, metrics = small_teacher
    assert metrics["accuracy"] >= 0.90
    assert metrics["epochs"] >= 1
    assert sorted(metrics["classes"]) == metrics["classes"]
    assert teacher.frozen
    assert all(not p.requires_grad for p in teacher.parameters())


def test_make_teacher_checkpoint_roundtrip(small_teacher, tmp_path):
    teacher, _ = small_teacher
    arrays = module_arrays(teacher, "teacher")
    save_checkpoint(tmp_path / "ckpt", arrays)
    clone = TeacherNet(base_channels=8, k_levels=3)
    load_module(CheckpointReader(tmp_path / "ckpt"), clone, "teacher")
    clone.freeze()
    assert module_digest(clone) == module_digest(teacher)


def test_make_teacher_same_seed_same_digest(data_root):
    a, _ = make_teacher(data_root / "aux", seed=3, base_channels=4, k_levels=2, min_accuracy=0.0, max_epochs=1)
    b, _ = make_teacher(data_root / "aux", seed=3, base_channels=4, k_levels=2, min_accuracy=0.0, max_epochs=1)
    assert module_digest(a) == module_digest(b)


def test_make_teacher_unreachable_accuracy_raises(data_root):
    with pytest.raises(TrainingDiverged):
        make_teacher(data_root / "aux", seed=0, base_channels=2, k_levels=2, min_accuracy=1.01, max_epochs=1)


def test_make_teacher_needs_two_classes(tmp_path):
    only = tmp_path / "aux" / "solo"
    only.mkdir(parents=True)
    from fico.data import save_image

    save_image(only / "a.png", np.zeros((3, 16, 16), dtype=np.float32))
    with pytest.raises(ConfigError):
        make_teacher(tmp_path / "aux", seed=0)


def test_teacher_config_validation():
    with pytest.raises(ConfigError):
        TeacherNet(base_channels=4, k_levels=0)
