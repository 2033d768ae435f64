import pytest
import torch
from torch import nn

from dfquant.data import (
    SHAPES,
    ImageSet,
    data_free,
    load_dataset,
    make_shapes,
    reads_forbidden,
    save_packed,
    save_tree,
)
from dfquant.errors import DataBoundaryViolation, DatasetNotFound, EmptyEvalSet
from dfquant.evaluation import evaluate


def test_make_shapes_deterministic_and_balanced():
    a, b = make_shapes(50, seed=3), make_shapes(50, seed=3)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert a.images.dtype == torch.uint8 and a.images.shape == (50, 3, 32, 32)
    assert torch.bincount(a.labels, minlength=10).tolist() == [5] * 10
    assert not torch.equal(a.images, make_shapes(50, seed=4).images)
    assert len(SHAPES) == 10
    with pytest.raises(ValueError):
        make_shapes(5, num_classes=11)


def test_packed_and_tree_roundtrip(tmp_path):
    ds = make_shapes(12, size=8, num_classes=3, seed=1)
    save_packed(ds, tmp_path / "d.pt")
    back = load_dataset(tmp_path / "d.pt")
    assert torch.equal(back.images, ds.images) and torch.equal(back.labels, ds.labels)
    save_tree(ds, tmp_path / "tree")
    tree = load_dataset(tmp_path / "tree")
    assert len(tree) == 12 and tree.num_classes == 3
    # tree order is by class folder, so compare per-class image multisets
    for c in range(3):
        got = sorted(map(bytes, tree.images[tree.labels == c].numpy()))
        want = sorted(map(bytes, ds.images[ds.labels == c].numpy()))
        assert got == want


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetNotFound):
        load_dataset(tmp_path / "nothing")


def test_data_free_guard(tmp_path):
    save_packed(make_shapes(4, size=8, num_classes=2), tmp_path / "d.pt")
    assert not reads_forbidden()
    with data_free():
        with data_free():
            assert reads_forbidden()
        assert reads_forbidden()
        with pytest.raises(DataBoundaryViolation):
            load_dataset(tmp_path / "d.pt")
    assert not reads_forbidden()
    load_dataset(tmp_path / "d.pt")


class _Constant(nn.Module):
    def __init__(self, cls, n=10):
        super().__init__()
        self.cls, self.n = cls, n

    def forward(self, x):
        out = torch.zeros(x.shape[0], self.n)
        out[:, self.cls] = 1.0
        return out


def test_evaluate_against_stub_oracle():
    labels = torch.tensor([0, 1, 1, 2, 1, 0, 1])
    ds = ImageSet(torch.zeros(7, 3, 4, 4, dtype=torch.uint8), labels)
    model = _Constant(1).train()
    # a constant predictor scores the frequency of its class
    assert evaluate(model, ds, batch_size=3) == pytest.approx(4 / 7)
    assert model.training
    assert evaluate(_Constant(2), (torch.zeros(7, 3, 4, 4), labels)) == pytest.approx(1 / 7)
    with pytest.raises(EmptyEvalSet):
        evaluate(model, (torch.zeros(0, 3, 4, 4), torch.zeros(0, dtype=torch.long)))


def test_normalization():
    ds = ImageSet(torch.full((1, 3, 1, 1), 255, dtype=torch.uint8), torch.tensor([0]))
    x = ds.normalized((0.5, 0.5, 0.5), (0.25, 0.5, 1.0))
    assert x.flatten().tolist() == [2.0, 1.0, 0.5]
