"""Vanilla generative data-free losses.

Generator side: batch-norm statistics matching plus cross-entropy of the
teacher's prediction against the content label. Student side: temperature
scaled logit distillation plus cross-entropy against the content label.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import LabelOutOfRange, NoBatchNorm, ShapeMismatch


@dataclass
class LossWeights:
    w_bns: float = 0.1
    w_kd: float = 1.0
    w_ce: float = 1.0
    kd_temperature: float = 1.0


@dataclass
class LossReport:
    bns: float = 0.0
    ce_generator: float = 0.0
    kd: float = 0.0
    ce_student: float = 0.0
    causal_kl: float = 0.0
    total: float = 0.0
    step: int = 0
    extra: dict = field(default_factory=dict, repr=False)

    def recompute_total(self, weights: LossWeights, lam: float) -> float:
        self.total = (weights.w_ce * (self.ce_generator + self.ce_student)
                      + weights.w_bns * self.bns + weights.w_kd * self.kd
                      + lam * self.causal_kl)
        return self.total

    def as_record(self) -> dict:
        rec = asdict(self)
        rec.pop("extra")
        rec.update(self.extra)
        return rec


def _batchnorms(model: nn.Module) -> list[tuple[str, nn.modules.batchnorm._BatchNorm]]:
    return [(n, m) for n, m in model.named_modules()
            if isinstance(m, nn.modules.batchnorm._BatchNorm)]


def bns_targets(teacher: nn.Module) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    layers = _batchnorms(teacher)
    if not layers:
        raise NoBatchNorm("teacher has no batch-norm layers; disable the BNS term (w_bns = 0)")
    return {n: (m.running_mean, m.running_var) for n, m in layers}


@contextlib.contextmanager
def record_bn_inputs(teacher: nn.Module):
    """Collect per-channel (mean, biased var) of every BN layer's input."""
    stats: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
    layers = _batchnorms(teacher)
    if not layers:
        raise NoBatchNorm("teacher has no batch-norm layers; disable the BNS term (w_bns = 0)")

    def hook(name):
        def fn(module, inputs):
            x = inputs[0]
            dims = [0] + list(range(2, x.dim()))
            stats[name] = (x.mean(dim=dims), x.var(dim=dims, unbiased=False))
        return fn

    handles = [m.register_forward_pre_hook(hook(n)) for n, m in layers]
    try:
        yield stats
    finally:
        for h in handles:
            h.remove()


def bns_from_stats(stats, targets) -> torch.Tensor:
    total = None
    for name, (mu_t, var_t) in targets.items():
        mu, var = stats[name]
        term = (mu - mu_t).pow(2).sum() + (var - var_t).pow(2).sum()
        total = term if total is None else total + term
    return total


def bns_loss(teacher: nn.Module, generated_images: torch.Tensor, return_logits: bool = False):
    """Sum over teacher BN layers of squared distance between batch and stored statistics."""
    targets = bns_targets(teacher)
    with record_bn_inputs(teacher) as stats:
        logits = teacher(generated_images)
    loss = bns_from_stats(stats, targets)
    return (loss, logits) if return_logits else loss


def generator_ce(teacher_logits: torch.Tensor, pseudo_labels: torch.Tensor) -> torch.Tensor:
    n_cls = teacher_logits.shape[1]
    if pseudo_labels.numel() and (pseudo_labels.min() < 0 or pseudo_labels.max() >= n_cls):
        raise LabelOutOfRange(f"labels must lie in [0, {n_cls})")
    return F.cross_entropy(teacher_logits, pseudo_labels)


def kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
            temperature: float = 1.0) -> torch.Tensor:
    if teacher_logits.shape != student_logits.shape:
        raise ShapeMismatch(f"{tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}")
    t = temperature
    log_q = F.log_softmax(student_logits / t, dim=1)
    log_p = F.log_softmax(teacher_logits / t, dim=1)
    return F.kl_div(log_q, log_p, reduction="batchmean", log_target=True) * (t * t)


def student_terms(teacher_logits, student_logits, pseudo_labels, weights: LossWeights):
    kd = kd_loss(teacher_logits.detach(), student_logits, weights.kd_temperature)
    ce = F.cross_entropy(student_logits, pseudo_labels)
    return kd, ce


def vanilla_loss(teacher: nn.Module, student: nn.Module, batch, weights: LossWeights,
                 phase: str = "both", inputs: torch.Tensor | None = None):
    """Weighted vanilla loss on one generated batch.

    ``phase`` picks the generator terms (``"generator"``), the student terms
    (``"student"``) or both. ``inputs`` overrides ``batch.images`` when the
    images need renormalizing before they reach the classifiers.
    """
    if phase not in ("generator", "student", "both"):
        raise ValueError(f"unknown phase {phase!r}")
    x = batch.images if inputs is None else inputs
    labels = batch.pseudo_labels
    report = LossReport()
    value = x.new_zeros(())
    if phase in ("generator", "both"):
        if weights.w_bns:
            bns, t_logits = bns_loss(teacher, x, return_logits=True)
            report.bns = float(bns.detach())
            value = value + weights.w_bns * bns
        else:
            t_logits = teacher(x)
        ce_g = generator_ce(t_logits, labels)
        report.ce_generator = float(ce_g.detach())
        value = value + weights.w_ce * ce_g
    if phase in ("student", "both"):
        with torch.no_grad():
            t_logits = teacher(x.detach())
        kd, ce_s = student_terms(t_logits, student(x.detach()), labels, weights)
        report.kd, report.ce_student = float(kd.detach()), float(ce_s.detach())
        value = value + weights.w_kd * kd + weights.w_ce * ce_s
    report.total = float(value.detach())
    return value, report
