import copy
import csv
import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfquant.analysis import CkaMatrix, cka_heatmap, lambda_sweep, linear_cka, probe_layers, summarize
from dfquant.errors import DegenerateActivations
from dfquant.models import ArchitectureSpec, build, load_teacher
from dfquant.plotting import plot_cka_heatmap
from dfquant.quantization import wrap_model
from dfquant.training import run

from conftest import tiny_run_config


def _hsic_cka_exact(x, y):
    """Kernel-form CKA, tr(KHLH) / sqrt(tr(KHKH) tr(LHLH)), in exact rationals."""
    n = len(x)
    xf = [[Fraction(v) for v in row] for row in x]
    yf = [[Fraction(v) for v in row] for row in y]
    gram = lambda a: [[sum(p * q for p, q in zip(a[i], a[j])) for j in range(n)] for i in range(n)]  # noqa: E731
    h = [[Fraction(int(i == j)) - Fraction(1, n) for j in range(n)] for i in range(n)]
    mul = lambda a, b: [[sum(a[i][k] * b[k][j] for k in range(n)) for j in range(n)] for i in range(n)]  # noqa: E731
    tr = lambda a: sum(a[i][i] for i in range(n))  # noqa: E731
    kc, lc = mul(mul(h, gram(xf)), h), mul(mul(h, gram(yf)), h)
    return float(tr(mul(kc, lc))) / math.sqrt(float(tr(mul(kc, kc))) * float(tr(mul(lc, lc))))


HAND_X = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.0], [-2.0, 4.0]]
HAND_Y = [[0.0, 1.0], [2.0, 2.0], [-1.0, 0.5], [3.0, -3.0]]


def test_hand_instance_matches_exact_oracle():
    assert linear_cka(np.array(HAND_X), np.array(HAND_Y)) == pytest.approx(
        _hsic_cka_exact(HAND_X, HAND_Y), abs=1e-8)


def test_degenerate_inputs():
    with pytest.raises(DegenerateActivations):
        linear_cka(np.ones((5, 3)), np.random.rand(5, 2))
    with pytest.raises(ValueError):
        linear_cka(np.random.rand(4, 2), np.random.rand(5, 2))
    with pytest.raises(ValueError):
        linear_cka(np.random.rand(1, 2), np.random.rand(1, 2))


_mat = arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(1, 6)),
              elements=st.floats(-10, 10, allow_nan=False, allow_subnormal=False))


def _non_degenerate(x):
    return np.abs(x - x.mean(axis=0)).max() > 1e-3


@settings(max_examples=80, deadline=None)
@given(_mat, st.integers(0, 10_000), st.floats(0.01, 100), st.booleans())
def test_cka_invariances(x, seed, c, negate):
    if not _non_degenerate(x):
        return
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(x.shape[0], 3))
    q, _ = np.linalg.qr(rng.normal(size=(x.shape[1], x.shape[1])))
    c = -c if negate else c
    base = linear_cka(x, y)
    assert 0.0 <= base <= 1.0
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-6)
    assert linear_cka(x @ q, x) == pytest.approx(1.0, abs=1e-6)
    assert linear_cka(x @ q, y) == pytest.approx(base, abs=1e-6)
    assert linear_cka(c * x, y) == pytest.approx(base, abs=1e-6)
    assert linear_cka(y, x) == pytest.approx(base, abs=1e-8)


def test_cka_matrix_container(tmp_path):
    m = CkaMatrix(np.array([[1.0, 0.2]]), ["a"], ["b", "c"], "probe")
    assert m.diagonal.tolist() == [1.0]
    path = m.to_csv(tmp_path / "m.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["teacher\\student", "b", "c"] and float(rows[1][2]) == 0.2
    with pytest.raises(ValueError):
        CkaMatrix(np.zeros((2, 2)), ["a"], ["b", "c"])
    with pytest.raises(ValueError):
        CkaMatrix(np.array([[np.nan]]), ["a"], ["b"])
    assert plot_cka_heatmap(m, tmp_path / "m.png").stat().st_size > 0


def test_teacher_copy_diagonal_is_one(toy_teacher):
    probe = torch.randn(64, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    m = cka_heatmap(toy_teacher, copy.deepcopy(toy_teacher), probe)
    assert m.values.shape == (len(probe_layers(toy_teacher)),) * 2
    assert np.all(np.abs(m.diagonal - 1.0) <= 1e-5)
    assert np.all((m.values >= -1e-6) & (m.values <= 1 + 1e-6))


def test_heatmap_dims_for_quantized_resnet():
    teacher = build(ArchitectureSpec("resnet20"), seed=0).eval()
    student = wrap_model(teacher, 8, 8)
    probe = torch.randn(64, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    student.calibrate(probe)
    m = cka_heatmap(teacher, student, probe)
    assert m.values.shape == (20, 20)
    assert m.teacher_layers == m.student_layers


@pytest.mark.slow
def test_trained_student_more_similar_than_random(trained_teacher):
    teacher, _, _ = load_teacher(trained_teacher[0])
    student = wrap_model(teacher, 8, 8)
    random_student = wrap_model(build(ArchitectureSpec("tiny_cnn"), seed=11).eval(), 8, 8)
    for seed in range(3):
        probe = torch.rand(64, 3, 32, 32, generator=torch.Generator().manual_seed(seed)) * 2 - 1
        student.calibrate(probe)
        random_student.calibrate(probe)
        trained = cka_heatmap(teacher, student, probe).diagonal.mean()
        rand = cka_heatmap(teacher, random_student, probe).diagonal.mean()
        assert rand < trained


def test_summarize():
    rows = [(0.0, 0, 0.5), (0.0, 1, 0.7), (1.0, 0, 0.9)]
    (l0, m0, s0, n0), (l1, m1, s1, n1) = summarize(rows)
    assert (l0, n0, l1, n1) == (0.0, 2, 1.0, 1)
    assert m0 == pytest.approx(0.6) and s0 == pytest.approx(math.sqrt(0.02)) and s1 == 0.0


def test_lambda_sweep_structure_and_determinism(toy_teacher_ckpt, small_shapes_dir, tmp_path):
    cfg = tiny_run_config(tmp_path, toy_teacher_ckpt, small_shapes_dir / "test.pt",
                          schedule={"epochs": 2, "warmup_epochs": 1})
    result = lambda_sweep(cfg, [0.0, 1.0], [0, 1], out_dir=tmp_path / "sweep")
    rows = list(csv.reader(result.csv_path.open()))
    assert rows[0] == ["lambda", "seed", "final_acc"] and len(rows) == 1 + 4
    assert len(result.summary) == 2
    assert result.plot_path.exists() and result.summary_path.exists()
    # the lambda = 0 row reproduces a standalone run with the same seed
    alone = run(tiny_run_config(tmp_path / "alone", toy_teacher_ckpt, small_shapes_dir / "test.pt",
                                schedule={"epochs": 2, "warmup_epochs": 1}, seed=1,
                                causal={"lambda": 0.0, "critic_dim": 16}))
    assert result.rows[1] == (0.0, 1, alone["final_acc"])
    again = lambda_sweep(cfg, [0.0, 1.0], [0, 1], out_dir=tmp_path / "sweep2", plot=False)
    assert again.rows == result.rows
    with pytest.raises(ValueError):
        lambda_sweep(cfg, [1.0], [0], out_dir=tmp_path / "bad")
