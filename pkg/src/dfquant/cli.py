"""Command-line entry point: ``dfquant <subcommand> [options]``.

Exit status is 0 on success, 1 for configuration/validation errors and 2 for
runtime failures (missing files, non-finite losses, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import config as config_mod
from .errors import ConfigError, DfqError

log = logging.getLogger("dfquant")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfquant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, seed=True):
        p.add_argument("--config", help="YAML run configuration (default: all defaults)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one field, e.g. causal.lambda=0.5 (repeatable)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if seed:
            p.add_argument("--seed", type=int, help="override the run seed")

    p = sub.add_parser("pretrain", help="train the full-precision teacher")
    common(p)
    p.add_argument("--make-data", action="store_true",
                   help="write the synthetic shapes set to data.train_path/test_path if missing")

    p = sub.add_parser("dfq-train", help="data-free fine-tuning of the quantized student")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.pt")

    p = sub.add_parser("eval", help="test accuracy of a teacher or student checkpoint")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="evaluation set (default: data.test_path)")

    p = sub.add_parser("cka", help="teacher/student CKA heatmap on generated probe images")
    common(p)
    p.add_argument("--checkpoint", required=True, help="student run checkpoint (best.pt/last.pt)")
    p.add_argument("--probe-size", type=int, default=256)

    p = sub.add_parser("sweep", help="final accuracy over a grid of lambda values and seeds")
    common(p, seed=False)
    p.add_argument("--lambdas", type=_floats, default=[0.0, 0.1, 1.0, 10.0])
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    return parser


def load_config(args, default_config: Path | None = None) -> config_mod.RunConfig:
    path = args.config or default_config
    overrides = config_mod.parse_overrides(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["output_dir"] = args.out
    return config_mod.parse_config(path, overrides)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# --------------------------------------------------------------------------
# subcommands

def cmd_pretrain(args) -> int:
    from .data import make_shapes, save_packed
    from .models import ArchitectureSpec, build, pretrain, save_teacher

    cfg = load_config(args)
    d = cfg.data
    if args.make_data:
        size, nc = cfg.model.input_shape[-1], cfg.model.num_classes
        for path, n, offset in ((d.train_path, 6000, 0), (d.test_path, 2000, 1_000_003)):
            if not Path(path).exists():
                save_packed(make_shapes(n, size, nc, cfg.seed + offset), path)
    spec = ArchitectureSpec(cfg.model.arch, cfg.model.num_classes, tuple(cfg.model.input_shape))
    norm = cfg.generator.normalization
    model, metrics = pretrain(build(spec, seed=cfg.seed), d.train_path, d.test_path,
                              epochs=d.pretrain_epochs, seed=cfg.seed,
                              batch_size=d.pretrain_batch_size, lr=d.pretrain_lr,
                              mean=tuple(norm.mean), std=tuple(norm.std))
    out = config_mod.resolve_output(cfg.output_dir)
    teacher_path = out / "teacher.pt" if args.out else config_mod.resolve_output(cfg.teacher)
    save_teacher(teacher_path, model, spec, metrics)
    config_mod.write_effective(cfg, teacher_path.parent)
    _print({"teacher": str(teacher_path), "test_acc": metrics["test_acc"]})
    return EXIT_OK


def cmd_dfq_train(args) -> int:
    from .training import run

    cfg = load_config(args)
    _print(run(cfg, resume=args.resume))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluation import evaluate
    from .models import load_teacher
    from .training import load_student

    cfg = load_config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    blob = torch.load(ckpt, map_location="cpu", weights_only=False)
    if "generator" in blob:
        model, kind = load_student(ckpt), "student"
    else:
        model, kind = load_teacher(ckpt)[0], "teacher"
    norm = cfg.generator.normalization
    acc = evaluate(model, load_dataset(args.data or cfg.data.test_path),
                   mean=tuple(norm.mean), std=tuple(norm.std))
    _print({"checkpoint": str(ckpt), "kind": kind, "accuracy": acc})
    return EXIT_OK


def cmd_cka(args) -> int:
    from .analysis import cka_heatmap
    from .generator import sample_content, sample_style, to_model_input
    from .models import load_teacher
    from .plotting import plot_cka_heatmap
    from .training import load_generator, load_student

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    run_cfg = ckpt.parent / "config.yaml"
    cfg = load_config(args, run_cfg if run_cfg.is_file() else None)
    teacher, _, _ = load_teacher(config_mod.resolve_output(cfg.teacher))
    student = load_student(ckpt)
    gen = load_generator(ckpt, cfg)
    rng = torch.Generator().manual_seed(cfg.seed)
    n = args.probe_size
    norm = cfg.generator.normalization
    with torch.no_grad():
        content = sample_content(n, cfg.model.num_classes, rng)
        images = gen(content, sample_style(n, cfg.generator.latent_dim, rng))
        probe = to_model_input(images, tuple(norm.mean), tuple(norm.std))
    matrix = cka_heatmap(teacher, student, probe, probe=f"{n} generated images, seed {cfg.seed}")
    out = config_mod.resolve_output(args.out) if args.out else ckpt.parent / "cka"
    out.mkdir(parents=True, exist_ok=True)
    config_mod.write_effective(cfg, out)
    csv_path = matrix.to_csv(out / "cka.csv")
    png = plot_cka_heatmap(matrix, out / "cka.png")
    _print({"csv": str(csv_path), "figure": str(png), "diagonal": matrix.diagonal.tolist()})
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .analysis import lambda_sweep

    cfg = load_config(args)
    root = config_mod.resolve_output(cfg.output_dir)
    config_mod.write_effective(cfg, root)
    result = lambda_sweep(cfg, args.lambdas, args.seeds, out_dir=root)
    _print({"csv": str(result.csv_path), "summary": str(result.summary_path),
            "figure": str(result.plot_path),
            "table": [dict(zip(("lambda", "mean_acc", "std_acc", "n"), r)) for r in result.summary]})
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "dfq-train": cmd_dfq_train, "eval": cmd_eval,
            "cka": cmd_cka, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"dfquant {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DfqError, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"dfquant {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
