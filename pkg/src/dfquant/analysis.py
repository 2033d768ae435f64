"""Post-hoc analysis: linear CKA between teacher and student layers, and the lambda sweep."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import RunConfig, resolve_output
from .errors import DegenerateActivations

log = logging.getLogger(__name__)

__all__ = ["linear_cka", "CkaMatrix", "probe_layers", "layer_features", "cka_heatmap",
           "SweepResult", "lambda_sweep", "summarize", "pooled_std"]


def linear_cka(x, y) -> float:
    """Linear CKA of two activation matrices sharing their first (sample) axis.

    ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`` with column-centred
    ``Xc``, ``Yc``; computed in float64.
    """
    x = np.asarray(torch.as_tensor(x).detach().cpu().double().reshape(len(x), -1))
    y = np.asarray(torch.as_tensor(y).detach().cpu().double().reshape(len(y), -1))
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("linear CKA needs at least two samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    # scale out before forming Gram matrices so tiny/huge activations stay representable
    nx, ny = np.abs(xc).max(), np.abs(yc).max()
    if nx == 0 or ny == 0:
        raise DegenerateActivations("centred activations are all zero")
    xc, yc = xc / nx, yc / ny
    cross = np.linalg.norm(yc.T @ xc, "fro") ** 2
    denom = np.linalg.norm(xc.T @ xc, "fro") * np.linalg.norm(yc.T @ yc, "fro")
    return float(min(max(cross / denom, 0.0), 1.0))


@dataclass
class CkaMatrix:
    values: np.ndarray  # (teacher layers, student layers)
    teacher_layers: list[str]
    student_layers: list[str]
    probe: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.teacher_layers), len(self.student_layers)):
            raise ValueError(f"values shape {v.shape} does not match the layer lists")
        if not np.all(np.isfinite(v)):
            raise ValueError("CKA matrix has non-finite entries")
        self.values = v

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.values)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["teacher\\student", *self.student_layers])
            for name, row in zip(self.teacher_layers, self.values):
                w.writerow([name, *(f"{v:.10f}" for v in row)])
        return path


def probe_layers(model: nn.Module) -> list[str]:
    """Names of every ReLU output plus the classification head."""
    names = [n for n, m in model.named_modules() if isinstance(m, nn.ReLU)]
    linears = [n for n, m in model.named_modules() if isinstance(m, nn.Linear)]
    return names + linears[-1:]


@torch.no_grad()
def layer_features(model: nn.Module, inputs: torch.Tensor,
                   names: Sequence[str] | None = None) -> dict[str, torch.Tensor]:
    """Channel-wise spatially mean-pooled outputs of the named submodules, in eval mode."""
    names = list(names) if names is not None else probe_layers(model)
    modules = dict(model.named_modules())
    missing = [n for n in names if n not in modules]
    if missing:
        raise KeyError(f"no such layer(s): {missing}")
    feats: dict[str, torch.Tensor] = {}

    def hook(name):
        def fn(_m, _inp, out):
            feats[name] = out.mean(dim=(2, 3)) if out.dim() == 4 else out.reshape(len(out), -1)
        return fn

    handles = [modules[n].register_forward_hook(hook(n)) for n in names]
    was = model.training
    model.eval()
    try:
        model(inputs)
    finally:
        model.train(was)
        for h in handles:
            h.remove()
    return {n: feats[n] for n in names}


def cka_heatmap(teacher: nn.Module, student: nn.Module, probe_batch: torch.Tensor,
                probe: str = "") -> CkaMatrix:
    """CKA over every (teacher layer, student layer) pair on one probe batch."""
    if len(probe_batch) < 2:
        raise ValueError("probe batch needs at least two images")
    if len(probe_batch) < 64:
        log.warning("probe batch of %d images; CKA estimates are noisy below 64", len(probe_batch))
    inner = getattr(student, "model", student)
    t_feats = layer_features(teacher, probe_batch)
    s_feats = layer_features(inner, probe_batch)
    values = np.array([[linear_cka(tf, sf) for sf in s_feats.values()] for tf in t_feats.values()])
    return CkaMatrix(values, list(t_feats), list(s_feats), probe or f"{len(probe_batch)} images")


# --------------------------------------------------------------------------
# lambda sweep

@dataclass
class SweepResult:
    rows: list[tuple[float, int, float]]  # (lambda, seed, final_acc)
    summary: list[tuple[float, float, float, int]]  # (lambda, mean, std, n)
    csv_path: Path | None = None
    summary_path: Path | None = None
    plot_path: Path | None = None

    def mean_at(self, lam: float) -> float:
        return next(m for l, m, _, _ in self.summary if l == lam)

    def std_at(self, lam: float) -> float:
        return next(s for l, _, s, _ in self.summary if l == lam)


def summarize(rows) -> list[tuple[float, float, float, int]]:
    """Per-lambda mean and sample standard deviation (ddof 1; 0 for a single seed)."""
    out = []
    for lam in dict.fromkeys(r[0] for r in rows):
        accs = np.array([r[2] for r in rows if r[0] == lam], dtype=np.float64)
        std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
        out.append((lam, float(accs.mean()), std, len(accs)))
    return out


def _run_dir(root: Path, lam: float, seed: int) -> Path:
    return root / f"lambda_{lam:g}" / f"seed_{seed}"


def lambda_sweep(template: RunConfig, lambdas: Sequence[float], seeds: Sequence[int],
                 out_dir=None, teacher: nn.Module | None = None, plot: bool = True) -> SweepResult:
    """One full fine-tuning run per (lambda, seed); writes ``sweep.csv``, a summary and a plot."""
    from .training import run

    lambdas = [float(v) for v in lambdas]
    if 0.0 not in lambdas:
        raise ValueError("the sweep needs lambda = 0 as its baseline")
    if not seeds:
        raise ValueError("the sweep needs at least one seed")
    root = resolve_output(str(out_dir if out_dir is not None else template.output_dir)).resolve()
    root.mkdir(parents=True, exist_ok=True)

    rows = []
    for lam in lambdas:
        for seed in seeds:
            cfg = dataclasses.replace(
                template, seed=int(seed), output_dir=str(_run_dir(root, lam, seed)),
                causal=dataclasses.replace(template.causal, lam=lam))
            summary = run(cfg, teacher=teacher)
            acc = summary.get("final_acc")
            if acc is None:
                raise RuntimeError(f"run lambda={lam:g} seed={seed} produced no evaluation")
            rows.append((lam, int(seed), float(acc)))
            log.info("lambda %g seed %d: final_acc %.4f", lam, seed, acc)

    result = SweepResult(rows, summarize(rows))
    result.csv_path = root / "sweep.csv"
    with result.csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "seed", "final_acc"])
        w.writerows((f"{l:g}", s, repr(a)) for l, s, a in rows)
    result.summary_path = root / "sweep_summary.csv"
    with result.summary_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "mean_acc", "std_acc", "n"])
        w.writerows((f"{l:g}", repr(m), repr(s), n) for l, m, s, n in result.summary)
    if plot:
        from .plotting import plot_sweep

        result.plot_path = plot_sweep(result, root / "sweep.png")
    return result


def pooled_std(a: float, b: float) -> float:
    return math.sqrt((a * a + b * b) / 2.0)
