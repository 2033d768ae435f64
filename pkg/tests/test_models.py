import pytest
import torch
from torch import nn

from dfquant.errors import DatasetNotFound, UnknownArchitecture
from dfquant.models import (
    ArchitectureSpec,
    build,
    load_teacher,
    param_checksum,
    pretrain,
    save_teacher,
)


def _resnet20_param_count(num_classes=10):
    """Closed form: 3x3 convs without bias, BN (2 per channel), linear head."""
    conv = lambda cin, cout: 9 * cin * cout  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731
    total = conv(3, 16) + bn(16)
    c_in = 16
    for c_out in (16, 32, 64):
        for b in range(3):
            cin = c_in if b == 0 else c_out
            total += conv(cin, c_out) + bn(c_out) + conv(c_out, c_out) + bn(c_out)
        c_in = c_out
    return total + 64 * num_classes + num_classes


@pytest.mark.parametrize("num_classes", [10, 100])
def test_resnet20_parameter_count(num_classes):
    model = build(ArchitectureSpec("resnet20", num_classes))
    n = sum(p.numel() for p in model.parameters())
    assert n == _resnet20_param_count(num_classes)
    if num_classes == 10:
        assert n == 269_722


@pytest.mark.parametrize("arch", ["tiny_cnn", "resnet20"])
def test_forward_features_contract(arch):
    model = build(ArchitectureSpec(arch)).eval()
    x = torch.randn(3, 3, 32, 32)
    feat, logits = model.forward_features(x)
    assert feat.shape == (3, 64) and logits.shape == (3, 10)
    assert torch.equal(model(x), logits)


def test_build_is_seeded_and_isolated():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = build(ArchitectureSpec("tiny_cnn"), seed=4)
    after = torch.rand(1)
    b = build(ArchitectureSpec("tiny_cnn"), seed=4)
    assert torch.equal(before, after)  # global RNG untouched
    assert param_checksum(a) == param_checksum(b)
    assert param_checksum(a) != param_checksum(build(ArchitectureSpec("tiny_cnn"), seed=5))


def test_unknown_architecture():
    with pytest.raises(UnknownArchitecture):
        ArchitectureSpec("vgg")


def test_resnet_relus_are_distinct_modules():
    model = build(ArchitectureSpec("resnet20"))
    relus = [m for m in model.modules() if isinstance(m, nn.ReLU)]
    assert len(relus) == len({id(m) for m in relus}) == 19


def test_teacher_checkpoint_roundtrip(toy_teacher, tmp_path):
    path = save_teacher(tmp_path / "t.pt", toy_teacher, ArchitectureSpec("tiny_cnn"), {"test_acc": 0.5})
    model, spec, metrics = load_teacher(path)
    assert spec.name == "tiny_cnn" and metrics["test_acc"] == 0.5
    assert param_checksum(model) == param_checksum(toy_teacher)
    assert not model.training and not any(p.requires_grad for p in model.parameters())
    blob = torch.load(path, weights_only=False)
    assert torch.equal(blob["bn_stats"]["bn2"]["var"], toy_teacher.bn2.running_var)
    with pytest.raises(FileNotFoundError):
        load_teacher(tmp_path / "missing.pt")


def test_pretrain_short_run(small_shapes_dir):
    model, metrics = pretrain(build(ArchitectureSpec("tiny_cnn")), small_shapes_dir / "train.pt",
                              small_shapes_dir / "test.pt", epochs=2, seed=0)
    assert len(metrics["history"]) == 2 and 0.0 <= metrics["test_acc"] <= 1.0
    assert not model.training
    with pytest.raises(DatasetNotFound):
        pretrain(build(ArchitectureSpec("tiny_cnn")), small_shapes_dir / "nope.pt",
                 small_shapes_dir / "test.pt", epochs=1)


@pytest.mark.slow
def test_trained_teacher_accuracy(trained_teacher):
    _, metrics = trained_teacher
    assert metrics["test_acc"] >= 0.90
