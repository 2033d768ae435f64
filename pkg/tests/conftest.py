import logging

import pytest
import torch

from dfquant.config import from_dict
from dfquant.data import write_synthetic
from dfquant.models import ArchitectureSpec, build, freeze, pretrain, save_teacher


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture
def toy_teacher():
    """Random tiny_cnn whose BN statistics were moved off their defaults."""
    model = build(ArchitectureSpec("tiny_cnn"), seed=3)
    model.train()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(3):
            model(torch.randn(32, 3, 32, 32, generator=g) * 0.8 + 0.1)
    return freeze(model)


@pytest.fixture(scope="session")
def shapes_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    write_synthetic(root, n_train=6000, n_test=2000, seed=0)
    return root


@pytest.fixture(scope="session")
def small_shapes_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_shapes")
    write_synthetic(root, n_train=400, n_test=200, seed=5)
    return root


@pytest.fixture(scope="session")
def trained_teacher(shapes_dir, tmp_path_factory):
    """tiny_cnn pretrained 20 epochs on the synthetic shapes set (checkpoint path, metrics)."""
    spec = ArchitectureSpec("tiny_cnn")
    model, metrics = pretrain(build(spec, seed=0), shapes_dir / "train.pt",
                              shapes_dir / "test.pt", epochs=20, seed=0)
    path = save_teacher(tmp_path_factory.mktemp("teacher") / "teacher.pt", model, spec, metrics)
    return path, metrics


@pytest.fixture
def toy_teacher_ckpt(toy_teacher, tmp_path):
    return save_teacher(tmp_path / "toy_teacher.pt", toy_teacher, ArchitectureSpec("tiny_cnn"),
                        {"test_acc": None})


def tiny_run_config(tmp_path, teacher_path, test_path, **over):
    """A seconds-scale fine-tuning config."""
    base = {
        "teacher": str(teacher_path),
        "output_dir": str(tmp_path / "run"),
        "data": {"train_path": str(tmp_path / "absent_train"), "test_path": str(test_path)},
        "generator": {"width": 8, "latent_dim": 16, "image_size": 32},
        "causal": {"critic_dim": 16},
        "schedule": {"epochs": 3, "warmup_epochs": 1, "iterations_per_epoch": 2, "batch_size": 8,
                     "decay_every": 1, "lr_q": 1e-3},
    }
    for key, value in over.items():
        if isinstance(value, dict):
            base.setdefault(key, {}).update(value)
        else:
            base[key] = value
    return from_dict(base)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
