"""Shared fixtures: a small synthetic dataset, a frozen teacher, one tiny run.

All are expensive enough to build once per session; tests must treat them
as read-only.
"""

import pytest

from fico.harness import RunConfig, save_teacher, train
from fico.model import make_teacher
from fico.shift import DatasetSpec, synth_dataset

SMALL_SPEC = DatasetSpec(
    categories=("stripes", "checker"),
    image_size=64,
    train_count=12,
    test_good_count=6,
    test_defect_count=3,
    aux_count=24,
)


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    return synth_dataset(out / "synthetic", SMALL_SPEC, seed=11)


@pytest.fixture(scope="session")
def small_teacher(data_root):
    teacher, metrics = make_teacher(data_root / "aux", seed=0, base_channels=8, k_levels=3)
    return teacher, metrics


@pytest.fixture(scope="session")
def teacher_ckpt(tmp_path_factory, small_teacher):
    teacher, metrics = small_teacher
    return save_teacher(tmp_path_factory.mktemp("teacher") / "teacher", teacher, metrics)


@pytest.fixture(scope="session")
def tiny_config(data_root, teacher_ckpt):
    return RunConfig(
        mode="FICO",
        seed=0,
        epochs=2,
        batch_size=8,
        base_channels=8,
        k_levels=3,
        m_blocks=2,
        n_views=2,
        dataset_root=str(data_root),
        category="stripes",
        teacher_path=str(teacher_ckpt),
        scenarios={"clean": str(data_root)},
    )


@pytest.fixture(scope="session")
def tiny_run(tiny_config, tmp_path_factory):
    return train(tiny_config, tmp_path_factory.mktemp("run"))
