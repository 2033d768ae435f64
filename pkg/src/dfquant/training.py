"""Alternating data-free fine-tuning.

Each iteration first updates the generator on the teacher-only terms (BN
statistics + content cross-entropy), then updates the quantized student and
the critic on ``M`` freshly generated style interventions of one content
draw. Dataset files are only touched for per-epoch evaluation, never inside a
training step.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from . import config as config_mod
from .causal import CausalObjectiveConfig, Critic, causal_dfq_loss
from .config import RunConfig
from .data import data_free, load_dataset
from .distillation import LossReport, LossWeights, bns_from_stats, bns_targets, generator_ce, record_bn_inputs
from .errors import DatasetNotFound, NonFiniteLoss
from .evaluation import evaluate
from .generator import Generator, sample_content, sample_style, to_model_input
from .models import CHECKPOINT_FORMAT, bn_stats, load_teacher, param_checksum
from .quantization import QuantizedModelHandle, wrap_model

log = logging.getLogger(__name__)

__all__ = ["RunState", "setup", "train_step", "run", "evaluate", "head_width",
           "load_student", "load_generator", "save_checkpoint", "load_checkpoint"]

PAIR_SEED_OFFSET = 7919


@dataclass
class RunState:
    generator: Generator
    student: QuantizedModelHandle
    critic: Critic
    opt_g: torch.optim.Optimizer
    opt_q: torch.optim.Optimizer
    opt_c: torch.optim.Optimizer
    data_rng: torch.Generator
    pair_rng: torch.Generator
    step: int = 0
    epoch: int = 0
    best_acc: float = -1.0
    history: list = field(default_factory=list)

    def lrs(self) -> tuple[float, float]:
        return self.opt_g.param_groups[0]["lr"], self.opt_q.param_groups[0]["lr"]


def head_width(model: nn.Module) -> int:
    """Number of classes, read off the last linear layer."""
    linears = [m for m in model.modules() if isinstance(m, nn.Linear)]
    if not linears:
        raise ValueError("model has no linear classification head")
    return linears[-1].out_features


@torch.no_grad()
def _feature_width(model: nn.Module, shape) -> int:
    was = model.training
    model.eval()
    feat, _ = model.forward_features(torch.zeros(2, *shape))
    model.train(was)
    return feat.shape[1]


def _weights(cfg: RunConfig) -> LossWeights:
    d = cfg.distillation
    return LossWeights(d.w_bns, d.w_kd, d.w_ce, d.kd_temperature)


def _causal_cfg(cfg: RunConfig) -> CausalObjectiveConfig:
    c = cfg.causal
    return CausalObjectiveConfig(c.lam, c.beta, c.interventions_m, c.pairs_per_step, c.tau)


def _norm(cfg: RunConfig):
    n = cfg.generator.normalization
    return tuple(n.mean), tuple(n.std)


def _image_shape(cfg: RunConfig):
    return (cfg.model.input_shape[0], cfg.generator.image_size, cfg.generator.image_size)


def set_epoch_lrs(state: RunState, cfg: RunConfig, epoch: int) -> None:
    s = cfg.schedule
    factor = s.decay_factor ** (epoch // s.decay_every)
    critic_lr = cfg.causal.critic_lr or cfg.generator.generator_lr
    for opt, base in ((state.opt_g, cfg.generator.generator_lr), (state.opt_q, s.lr_q),
                      (state.opt_c, critic_lr)):
        for group in opt.param_groups:
            group["lr"] = base * factor


def setup(cfg: RunConfig, teacher: nn.Module) -> RunState:
    """Fresh run state: student copied from the teacher, new generator and critic."""
    q, g, s = cfg.quantization, cfg.generator, cfg.schedule
    shape = _image_shape(cfg)
    num_classes = head_width(teacher)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        student = wrap_model(teacher, q.bits_weights, q.bits_activations,
                             quantize_first_last=q.quantize_first_last, freeze_bn=q.freeze_bn)
        gen = Generator(num_classes, g.latent_dim, shape, g.width)
        feat = _feature_width(teacher, shape)
        critic = Critic(feat, cfg.causal.critic_dim, cfg.causal.beta,
                        student_dim=_feature_width(student, shape))
    betas = tuple(s.generator_betas)
    state = RunState(
        generator=gen,
        student=student,
        critic=critic,
        opt_g=torch.optim.Adam(gen.parameters(), lr=g.generator_lr, betas=betas),
        opt_q=torch.optim.SGD(student.parameters(), lr=s.lr_q, momentum=s.momentum,
                              nesterov=s.nesterov, weight_decay=s.weight_decay),
        opt_c=torch.optim.Adam(critic.parameters(), lr=cfg.causal.critic_lr or g.generator_lr,
                               betas=betas),
        data_rng=torch.Generator().manual_seed(cfg.seed),
        pair_rng=torch.Generator().manual_seed(cfg.seed + PAIR_SEED_OFFSET),
    )
    # initial activation ranges from one batch of the untrained generator
    calibrate_from_generator(state, cfg)
    critic.train()
    return state


def calibrate_from_generator(state: RunState, cfg: RunConfig) -> None:
    """Reset the student's activation ranges to those of one generated batch."""
    mean, std = _norm(cfg)
    gen, n = state.generator, cfg.schedule.batch_size
    with torch.no_grad():
        was = gen.training
        gen.eval()
        c = sample_content(n, gen.num_classes, state.data_rng)
        x = to_model_input(gen(c, sample_style(n, gen.latent_dim, state.data_rng)), mean, std)
        gen.train(was)
    for _, layer in state.student.quant_layers():
        layer.act_quant.initialized.fill_(False)
    state.student.calibrate(x)
    state.student.train()


def train_step(state: RunState, teacher: nn.Module, cfg: RunConfig,
               vanilla_only: bool = False, generator_only: bool = False) -> LossReport:
    """One generator update followed by one student + critic update.

    ``vanilla_only`` drops the causal term entirely (reference path for the
    ``lambda = 0`` decomposition check). ``generator_only`` skips the student
    phase (warm-up).
    """
    rng_snapshot = state.data_rng.get_state()
    with data_free():
        report = _train_step(state, teacher, cfg, vanilla_only, generator_only)
    values = [report.bns, report.ce_generator, report.kd, report.ce_student,
              report.causal_kl, report.total]
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteLoss(
            f"non-finite loss at step {report.step}: {report.as_record()}; "
            f"data RNG state checksum {int(rng_snapshot.sum())}",
        )
    state.step += 1
    return report


def _train_step(state: RunState, teacher, cfg: RunConfig, vanilla_only: bool,
                generator_only: bool) -> LossReport:
    weights = _weights(cfg)
    mean, std = _norm(cfg)
    gen, student, critic = state.generator, state.student, state.critic
    n = cfg.schedule.batch_size
    teacher.eval()

    # phase A: generator
    gen.train()
    content = sample_content(n, gen.num_classes, state.data_rng)
    style = sample_style(n, gen.latent_dim, state.data_rng)
    x = to_model_input(gen(content, style), mean, std)
    if weights.w_bns:
        targets = bns_targets(teacher)
        with record_bn_inputs(teacher) as stats:
            t_logits = teacher(x)
        bns = bns_from_stats(stats, targets)
    else:
        t_logits = teacher(x)
        bns = x.new_zeros(())
    ce_g = generator_ce(t_logits, content)
    loss_g = weights.w_bns * bns + weights.w_ce * ce_g
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()

    if generator_only:
        report = LossReport()
    else:
        # phase B: student + critic on style interventions
        student.train()
        critic.train()
        terms = causal_dfq_loss(gen, teacher, student, critic, _causal_cfg(cfg), state.data_rng,
                                state.pair_rng, batch_size=n, weights=weights, mean=mean,
                                std=std, detach_images=True, include_causal=not vanilla_only)
        state.opt_q.zero_grad(set_to_none=True)
        state.opt_c.zero_grad(set_to_none=True)
        terms.value.backward()
        state.opt_q.step()
        state.opt_c.step()
        report = terms.report
    report.bns = float(bns.detach())
    report.ce_generator = float(ce_g.detach())
    report.step = state.step
    report.recompute_total(weights, cfg.causal.lam)
    lr_g, lr_q = state.lrs()
    report.extra = {"epoch": state.epoch, "lr_g": lr_g, "lr_q": lr_q}
    return report


# --------------------------------------------------------------------------
# checkpoints

def _state_blob(state: RunState, cfg: RunConfig, metrics_lines: int, extra_metrics: dict) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT,
        "arch_spec": {"name": cfg.model.arch, "num_classes": cfg.model.num_classes,
                      "input_shape": list(cfg.model.input_shape)},
        "quantization": {"bits_weights": cfg.quantization.bits_weights,
                         "bits_activations": cfg.quantization.bits_activations,
                         "quantize_first_last": cfg.quantization.quantize_first_last},
        "parameters": state.student.model.state_dict(),
        "bn_stats": bn_stats(state.student),
        "metrics": extra_metrics,
        "generator": state.generator.state_dict(),
        "critic": state.critic.state_dict(),
        "optimizers": {"g": state.opt_g.state_dict(), "q": state.opt_q.state_dict(),
                       "c": state.opt_c.state_dict()},
        "rng": {"data": state.data_rng.get_state(), "pair": state.pair_rng.get_state()},
        "step": state.step,
        "epoch": state.epoch,
        "best_acc": state.best_acc,
        "metrics_lines": metrics_lines,
    }


def save_checkpoint(path, state: RunState, cfg: RunConfig, metrics_lines: int = 0,
                    metrics: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(_state_blob(state, cfg, metrics_lines, metrics or {}), tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, cfg: RunConfig, teacher: nn.Module) -> tuple[RunState, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    state = setup(cfg, teacher)
    state.student.model.load_state_dict(blob["parameters"])
    state.generator.load_state_dict(blob["generator"])
    state.critic.load_state_dict(blob["critic"])
    state.opt_g.load_state_dict(blob["optimizers"]["g"])
    state.opt_q.load_state_dict(blob["optimizers"]["q"])
    state.opt_c.load_state_dict(blob["optimizers"]["c"])
    state.data_rng.set_state(blob["rng"]["data"])
    state.pair_rng.set_state(blob["rng"]["pair"])
    state.step, state.epoch, state.best_acc = blob["step"], blob["epoch"], blob["best_acc"]
    return state, blob


def load_student(path) -> QuantizedModelHandle:
    """Rebuild a quantized student from a run checkpoint (eval mode)."""
    from .models import ArchitectureSpec, build

    blob = torch.load(path, map_location="cpu", weights_only=False)
    spec = ArchitectureSpec(blob["arch_spec"]["name"], blob["arch_spec"]["num_classes"],
                            tuple(blob["arch_spec"]["input_shape"]))
    q = blob["quantization"]
    handle = wrap_model(build(spec), q["bits_weights"], q["bits_activations"],
                        quantize_first_last=q["quantize_first_last"])
    handle.model.load_state_dict(blob["parameters"])
    return handle.eval()


def load_generator(path, cfg: RunConfig) -> Generator:
    """The generator saved alongside a student checkpoint, in eval mode."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    g = cfg.generator
    gen = Generator(cfg.model.num_classes, g.latent_dim, _image_shape(cfg), g.width)
    gen.load_state_dict(blob["generator"])
    return gen.eval()


# --------------------------------------------------------------------------

def _write_records(path: Path, records: list[dict]) -> None:
    with path.open("a") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _truncate_lines(path: Path, keep: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)[:keep]
    path.write_text("".join(lines))


def run(cfg: RunConfig, resume: bool = False, teacher: nn.Module | None = None,
        stop_after: int | None = None) -> dict:
    """Execute the schedule; write ``metrics.jsonl``, ``last.pt``, ``best.pt`` and ``summary.json``.

    ``stop_after`` ends the run after that many epochs of this invocation
    (used to exercise resumption); ``resume`` continues from ``last.pt``.
    """
    out = config_mod.resolve_output(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.write_effective(cfg, out)
    if teacher is None:
        teacher, _, _ = load_teacher(cfg.teacher)
    teacher_sum = param_checksum(teacher)
    mean, std = _norm(cfg)

    eval_set = None
    try:
        eval_set = load_dataset(cfg.data.test_path)
    except DatasetNotFound:
        log.warning("test set %s not found; per-epoch evaluation disabled", cfg.data.test_path)
    eval_inputs = (eval_set.normalized(mean, std), eval_set.labels) if eval_set else None
    teacher_acc = evaluate(teacher, eval_inputs) if eval_inputs else None

    metrics_path = out / "metrics.jsonl"
    last_path = out / "last.pt"
    if resume and last_path.exists():
        state, blob = load_checkpoint(last_path, cfg, teacher)
        lines = blob["metrics_lines"]
        summary = dict(blob["metrics"])
        _truncate_lines(metrics_path, lines)
        log.info("resumed from %s at epoch %d (step %d)", last_path, state.epoch, state.step)
    else:
        state = setup(cfg, teacher)
        metrics_path.write_text("")
        lines = 0
        summary = {"teacher_acc": teacher_acc,
                   "initial_acc": evaluate(state.student, eval_inputs) if eval_inputs else None}

    s = cfg.schedule
    epochs_done = 0
    while state.epoch < s.epochs:
        set_epoch_lrs(state, cfg, state.epoch)
        warmup = state.epoch < s.warmup_epochs
        if state.epoch == s.warmup_epochs and s.warmup_epochs > 0:
            calibrate_from_generator(state, cfg)
        records = []
        for _ in range(s.iterations_per_epoch):
            report = train_step(state, teacher, cfg, generator_only=warmup)
            records.append(report.as_record())
        acc, improved = None, False
        if eval_inputs is not None and (state.epoch + 1) % s.eval_every == 0:
            acc = evaluate(state.student, eval_inputs)
            records.append({"epoch": state.epoch, "eval_acc": acc})
            summary["final_acc"] = acc
            if acc > state.best_acc:
                state.best_acc = acc
                summary["best_acc"] = acc
                improved = True
        _write_records(metrics_path, records)
        lines += len(records)
        log.info("epoch %d done: step %d eval_acc %s", state.epoch, state.step, acc)
        state.epoch += 1
        save_checkpoint(last_path, state, cfg, lines, summary)
        if improved:
            save_checkpoint(out / "best.pt", state, cfg, lines, summary)
        epochs_done += 1
        if stop_after is not None and epochs_done >= stop_after:
            break

    if not (out / "best.pt").exists():
        save_checkpoint(out / "best.pt", state, cfg, lines, summary)
    if param_checksum(teacher) != teacher_sum:
        raise RuntimeError("teacher parameters changed during data-free training")
    summary.update({"steps": state.step, "epochs_completed": state.epoch,
                    "lambda": cfg.causal.lam, "seed": cfg.seed, "output_dir": str(out)})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
