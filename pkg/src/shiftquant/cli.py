"""Command line interface.

Subcommands cover the pipeline stages individually (train-teacher,
quantize, selfref-finetune, eval, attack) plus the one-shot experiment
runner (run), the mixing-weight sweep (sweep-beta), and report printing.
Checkpoints and reports are plain JSON. The default output directory is
``SHIFTQUANT_OUTDIR`` or the current directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, nn, student as student_mod
from .config import QuantConfig, load_config, save_config
from .data import load_dataset
from .engine import cost_report, quantize_network_for_inference
from .harness import (
    adversarial_sweep,
    beta_sweep,
    build_network,
    dictionary_summary,
    epsilon_key,
    evaluate_engine,
    evaluate_float,
    run_experiment,
    split_dataset,
    ste_train,
    train_classifier,
)
from .student import QuantizedStudent


def _default_outdir() -> Path:
    return Path(os.environ.get("SHIFTQUANT_OUTDIR", "."))


def _load_cfg(args) -> QuantConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = QuantConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(optimizer=dataclasses.replace(cfg.optimizer, seed=args.seed))
    return cfg.validate()


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    outdir = Path(args.outdir) if args.outdir else _default_outdir()
    report = run_experiment(cfg, args.dataset, outdir=outdir)
    print(f"teacher clean accuracy:   {report['teacher']['clean_accuracy']:.4f}")
    print(f"quantized clean accuracy: {report['quantized']['clean_accuracy']:.4f}")
    for eps, acc in report["quantized"]["adversarial_accuracy"].items():
        print(f"quantized accuracy at eps={eps}: {acc:.4f}")
    print(f"modeled speedup: {report['cost']['modeled_speedup']:.2f}x")
    print(f"report written to {outdir / 'report.json'}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_cfg(args)
    ds = load_dataset(args.dataset)
    train, test = split_dataset(ds)
    rngs = [np.random.default_rng(s)
            for s in np.random.SeedSequence(cfg.optimizer.seed).spawn(2)]
    net = build_network(cfg.arch, tuple(ds.images.shape[1:]), ds.num_classes, rngs[0])
    curve = train_classifier(
        net, train, epochs=cfg.optimizer.teacher_epochs, lr=cfg.optimizer.lr,
        batch_size=cfg.optimizer.batch_size, rng=rngs[1],
    )
    nn.save_checkpoint(net, args.out)
    print(f"final train loss: {curve[-1]:.4f}" if curve else "no epochs run")
    print(f"test accuracy: {evaluate_float(net, test):.4f}")
    print(f"teacher checkpoint written to {args.out}")
    return 0


def cmd_quantize(args) -> int:
    cfg = _load_cfg(args)
    ds = load_dataset(args.dataset)
    train, test = split_dataset(ds)
    teacher = nn.load_checkpoint(args.teacher)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.optimizer.seed).spawn(1)[0])
    student = QuantizedStudent.from_network(
        teacher, dof=cfg.dof_n, n_max=cfg.n_max,
        c0=cfg.cutoff.c0, warmup_steps=cfg.cutoff.warmup_steps,
    )
    ste_train(student, train, epochs=cfg.optimizer.student_epochs,
              lr=cfg.optimizer.lr, batch_size=cfg.optimizer.batch_size, rng=rng)
    student_mod.save_student(student, args.out)
    for row in dictionary_summary(student, cfg.lambda_h):
        print(f"{row['kind']}: q={row['q']} s={row['s']} exponents={row['shift_exponents']} "
              f"balance_p={row['balance_p']:.3f}")
    inf = quantize_network_for_inference(student, cfg.frac_bits)
    print(f"engine test accuracy: {evaluate_engine(inf, test):.4f}")
    print(f"student checkpoint written to {args.out}")
    return 0


def cmd_selfref_finetune(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.ablation.finetune_enabled():
        print("error: no fine-tuning flag set in config.ablation", file=sys.stderr)
        return 2
    ds = load_dataset(args.dataset)
    train, test = split_dataset(ds)
    teacher = nn.load_checkpoint(args.teacher)
    student = student_mod.load_student(args.student)
    rngs = [np.random.default_rng(s)
            for s in np.random.SeedSequence(cfg.optimizer.seed).spawn(2)]
    disc = None
    if cfg.ablation.critic_mode() is not None:
        _, feats = student.forward(ds.images[:1], mode="surrogate")
        from .selfref import Discriminator

        disc = Discriminator(feats.shape[1], rngs[0])
    curves = harness.finetune(teacher, student, disc, train, cfg, rngs[1])
    student_mod.save_student(student, args.out)
    for name in ("task", "discriminator", "generator", "total"):
        tail = curves[name][-1] if curves[name] else float("nan")
        print(f"final {name} loss: {tail:.4f}")
    inf = quantize_network_for_inference(student, cfg.frac_bits)
    print(f"engine test accuracy: {evaluate_engine(inf, test):.4f}")
    print(f"student checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    ds = load_dataset(args.dataset)
    _, test = split_dataset(ds)
    student = student_mod.load_student(args.student)
    inf = quantize_network_for_inference(student, cfg.frac_bits)
    print(f"engine clean accuracy: {evaluate_engine(inf, test):.4f}")
    cost = cost_report(inf, tuple(ds.images.shape[1:]))
    print(f"macs_fp={cost.macs_fp} shiftadd_ops={cost.shiftadd_ops} "
          f"modeled_speedup={cost.modeled_speedup:.2f}x")
    return 0


def cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    ds = load_dataset(args.dataset)
    _, test = split_dataset(ds)
    student = student_mod.load_student(args.student)
    inf = quantize_network_for_inference(student, cfg.frac_bits)
    table = adversarial_sweep(student, lambda b: evaluate_engine(inf, b),
                              test, cfg.attack.epsilons)
    for eps in cfg.attack.epsilons:
        print(f"eps={epsilon_key(eps)}: accuracy={table[epsilon_key(eps)]:.4f}")
    return 0


def cmd_sweep_beta(args) -> int:
    cfg = _load_cfg(args)
    outdir = Path(args.outdir) if args.outdir else _default_outdir()
    rows = beta_sweep(cfg, args.dataset, outdir=outdir)
    print(f"{'beta':>5} {'clean':>8} {'adversarial':>12}")
    for row in rows:
        print(f"{row['beta']:>5.1f} {row['clean_accuracy']:>8.4f} "
              f"{row['adversarial_accuracy']:>12.4f}")
    print(f"table written to {outdir / 'beta_sweep.csv'}")
    return 0


def cmd_report(args) -> int:
    with open(args.report, "r", encoding="ascii") as fh:
        report = json.load(fh)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_init_config(args) -> int:
    save_config(QuantConfig(), args.out)
    print(f"default config written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftquant",
        description="2-bit shift-add quantization experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", default=None, help="JSON config path (defaults apply)")
        p.add_argument("--seed", type=int, default=None, help="override optimizer.seed")
        if dataset:
            p.add_argument("--dataset", default="synthetic:512:0",
                           help="synthetic[:n[:seed]], an IDX directory, or a CSV file")

    p = sub.add_parser("run", help="full pipeline and report")
    common(p)
    p.add_argument("--outdir", default=None)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("train-teacher", help="train the float teacher")
    common(p)
    p.add_argument("--out", required=True, help="teacher checkpoint path")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("quantize", help="fit dictionaries and run straight-through training")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True, help="student checkpoint path")
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("selfref-finetune", help="structural fine-tuning against the teacher")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_selfref_finetune)

    p = sub.add_parser("eval", help="clean accuracy and cost of a student on the engine")
    common(p)
    p.add_argument("--student", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("attack", help="sign-attack accuracy table for a student")
    common(p)
    p.add_argument("--student", required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("sweep-beta", help="one run per mixing weight")
    common(p)
    p.add_argument("--outdir", default=None)
    p.set_defaults(fn=cmd_sweep_beta)

    p = sub.add_parser("report", help="pretty-print a report file")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("init-config", help="write the default config as JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, nn.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
