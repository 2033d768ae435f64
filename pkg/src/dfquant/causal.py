"""Style-intervened conditional distributions and the discrepancy penalty between them.

For one content draw and ``M`` style draws the generator yields ``M`` batches.
Teacher features from batch ``l`` and student features from batch ``k`` give
the intervention pair ``(l, k)``; its conditional estimate is the row-wise
softmax of critic scores ``<g(student_i), g(teacher_j)> / beta`` over the
teacher samples ``j``. The penalty is the KL divergence between the estimates
of two different intervention pairs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .distillation import LossReport, LossWeights, student_terms
from .errors import ContentMismatch, ShapeMismatch
from .generator import intervene_styles, sample_content, to_model_input

KL_FLOOR = 1e-12


@dataclass
class CausalObjectiveConfig:
    lam: float = 0.1
    beta: float = 0.1
    interventions_m: int = 2
    pairs_per_step: int = 1
    tau: float = 0.0  # constraint threshold, documented only; the penalty form is used

    def __post_init__(self):
        if self.interventions_m < 2:
            raise ValueError("interventions_m must be >= 2")
        if self.pairs_per_step < 1:
            raise ValueError("pairs_per_step must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")


class Critic(nn.Module):
    """Projection head ``g`` plus temperature; outputs are unit vectors."""

    def __init__(self, feature_dim: int, out_dim: int = 128, beta: float = 0.1,
                 student_dim: int | None = None):
        super().__init__()
        if beta <= 0:
            raise ValueError("beta must be > 0")
        self.beta = beta
        self.g = nn.Sequential(nn.Linear(feature_dim, feature_dim), nn.ReLU(),
                               nn.Linear(feature_dim, out_dim))
        # per-side adapter only when the two feature widths differ
        self.student_adapter = (nn.Linear(student_dim, feature_dim)
                                if student_dim not in (None, feature_dim) else None)

    def project(self, feats: torch.Tensor, side: str = "teacher") -> torch.Tensor:
        if side == "student" and self.student_adapter is not None:
            feats = self.student_adapter(feats)
        return F.normalize(self.g(feats), dim=-1)

    def forward(self, u, v):
        return critic_similarity(u, v, self)


def critic_similarity(u: torch.Tensor, v: torch.Tensor, critic: Critic) -> torch.Tensor:
    """``h(u, v) = exp(<g(u), g(v)> / beta)``; batched over leading dims."""
    return torch.exp((critic.project(u) * critic.project(v)).sum(-1) / critic.beta)


@dataclass
class IntervenedConditional:
    matrix: torch.Tensor
    intervention_pair: tuple[int, int] = (0, 0)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def conditional_from_projections(t_proj: torch.Tensor, s_proj: torch.Tensor, beta: float,
                                 pair=(0, 0)) -> IntervenedConditional:
    # per-pair dot products and a sorted row sum make the result exactly
    # permutation-equivariant (no dependence on sample order in the reductions)
    scores = (s_proj.unsqueeze(1) * t_proj.unsqueeze(0)).sum(-1) / beta
    e = torch.exp(scores - scores.max(dim=1, keepdim=True).values)
    z = torch.sort(e, dim=1).values.sum(dim=1, keepdim=True)
    return IntervenedConditional(e / z, tuple(pair))


def intervened_conditional(teacher_feats: torch.Tensor, student_feats: torch.Tensor,
                           critic: Critic, pair=(0, 0), teacher_content=None,
                           student_content=None) -> IntervenedConditional:
    """Row ``i``: distribution over teacher samples ``j`` given student sample ``i``."""
    if teacher_feats.dim() != 2 or teacher_feats.shape[0] != student_feats.shape[0]:
        raise ShapeMismatch(f"{tuple(teacher_feats.shape)} vs {tuple(student_feats.shape)}")
    if teacher_content is not None and student_content is not None:
        if not torch.equal(teacher_content, student_content):
            raise ContentMismatch("teacher and student batches come from different content draws")
    return conditional_from_projections(critic.project(teacher_feats, "teacher"),
                                        critic.project(student_feats, "student"),
                                        critic.beta, pair)


def causal_kl(p1, p2) -> torch.Tensor:
    """Row-averaged ``KL(p1_row || p2_row)``; ``p2`` floored at 1e-12."""
    a = p1.matrix if isinstance(p1, IntervenedConditional) else p1
    b = p2.matrix if isinstance(p2, IntervenedConditional) else p2
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    log_ratio = torch.where(a == b, torch.zeros_like(a),
                            torch.log(a.clamp_min(KL_FLOOR)) - torch.log(b.clamp_min(KL_FLOOR)))
    kl = torch.where(a > 0, a * log_ratio, torch.zeros_like(a))
    return kl.sum(dim=1).mean()


def intervention_couples(m: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """All ordered couples of distinct intervention pairs over ``m`` style draws."""
    pairs = list(itertools.product(range(m), repeat=2))
    return [(a, b) for a in pairs for b in pairs if a != b]


def sample_couples(m: int, count: int, rng: torch.Generator):
    couples = intervention_couples(m)
    idx = torch.randint(0, len(couples), (count,), generator=rng)
    return [couples[i] for i in idx.tolist()]


@dataclass
class CausalTerms:
    value: torch.Tensor
    report: LossReport
    content: torch.Tensor = None
    styles: list = field(default_factory=list)
    couples: list = field(default_factory=list)


def causal_dfq_loss(gen, teacher, student, critic: Critic, cfg: CausalObjectiveConfig,
                    rng: torch.Generator, pair_rng: torch.Generator | None = None, *,
                    batch_size: int, weights: LossWeights | None = None,
                    mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5),
                    detach_images: bool = False, include_causal: bool = True) -> CausalTerms:
    """Student-side objective on ``M`` style interventions of one content draw.

    Vanilla student terms are averaged over the intervened batches; the KL
    penalty is summed over ``pairs_per_step`` sampled couples of intervention
    pairs and weighted by ``cfg.lam``. The teacher contributes no parameter
    gradients. With ``detach_images`` the generator is cut off as well.
    With ``include_causal=False`` the KL term is skipped entirely.
    """
    weights = weights or LossWeights()
    pair_rng = pair_rng if pair_rng is not None else rng
    m = cfg.interventions_m
    content = sample_content(batch_size, gen.num_classes, rng)
    styles = intervene_styles(content, m, gen.latent_dim, rng)

    t_feats, s_feats = [], []
    kd_sum = ce_sum = 0.0
    for style in styles:
        if detach_images:
            with torch.no_grad():
                x = to_model_input(gen(content, style), mean, std)
        else:
            x = to_model_input(gen(content, style), mean, std)
        tf, tl = teacher.forward_features(x)
        sf, sl = student.forward_features(x)
        kd, ce = student_terms(tl, sl, content, weights)
        kd_sum, ce_sum = kd_sum + kd, ce_sum + ce
        t_feats.append(tf)
        s_feats.append(sf)
    kd, ce = kd_sum / m, ce_sum / m
    value = weights.w_kd * kd + weights.w_ce * ce
    report = LossReport(kd=float(kd.detach()), ce_student=float(ce.detach()))

    couples = []
    if include_causal:
        couples = sample_couples(m, cfg.pairs_per_step, pair_rng)
        t_proj = [critic.project(f, "teacher") for f in t_feats]
        s_proj = [critic.project(f, "student") for f in s_feats]
        cache: dict[tuple[int, int], IntervenedConditional] = {}

        def cond(pair):
            if pair not in cache:
                cache[pair] = conditional_from_projections(t_proj[pair[0]], s_proj[pair[1]],
                                                           critic.beta, pair)
            return cache[pair]

        kl = sum(causal_kl(cond(a), cond(b)) for a, b in couples)
        report.causal_kl = float(kl.detach())
        value = value + cfg.lam * kl
    return CausalTerms(value, report, content, styles, couples)
