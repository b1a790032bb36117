"""Command-line entry point: one subcommand per workflow.

Exit codes: 0 success, 1 validation error (bad flags or invalid inputs),
2 runtime/numeric failure. Identical argv over identical inputs writes
byte-identical output files.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import FormatError, InvariantError, NonFiniteError
from .grad import gradcheck
from .losses import LossWeights
from .metrics import evaluate, write_report
from .personalize import TrainConfig, load_state, save_state
from .snapshot import load_manifest
from .synthbench import (
    SynthConfig,
    concat_evaluate,
    format_ablation_table,
    format_kshot_table,
    generate,
    run_ablation,
    run_kshot,
    train_on_manifest,
)


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on bad usage; we reserve 2 for runtime."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _print_config(name: str, cfg) -> None:
    if hasattr(cfg, "__dataclass_fields__"):
        cfg = asdict(cfg)
    items = " ".join(f"{k}={v}" for k, v in cfg.items())
    print(f"[{name}] {items}")


def _train_config(args) -> TrainConfig:
    weights = LossWeights(dice=args.lambda_dice, bce=args.lambda_bce,
                          cls=args.lambda_cls, neg_z=args.lambda_negz,
                          neg_m=args.lambda_negm)
    return TrainConfig(learning_rate=args.lr, iterations=args.iters,
                       alpha=args.alpha, weights=weights, seed=args.seed,
                       injection_enabled=not args.no_inject)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--lambda-dice", type=float, default=1.0)
    p.add_argument("--lambda-bce", type=float, default=1.0)
    p.add_argument("--lambda-cls", type=float, default=1.0)
    p.add_argument("--lambda-negz", type=float, default=0.1)
    p.add_argument("--lambda-negm", type=float, default=500.0)
    p.add_argument("--no-inject", action="store_true")
    p.add_argument("--seed", type=int, default=0)


def _cmd_synth(args) -> int:
    config = SynthConfig(v=args.vocab, d=args.dim, n=args.proposals,
                         h=args.grid, w=args.grid, hf=args.feature_grid,
                         wf=args.feature_grid,
                         instances_per_class=args.instances,
                         delta=args.delta, sigma=args.sigma,
                         k_train=args.k_train, n_test_pos=args.test_pos,
                         n_test_neg=args.test_neg, seed=args.seed)
    _print_config("synth", config)
    manifest = generate(config, args.out)
    print(f"wrote {manifest}")
    return 0


def _cmd_personalize(args) -> int:
    if args.iters < 1:
        raise InvariantError(f"--iters must be >= 1, got {args.iters}")
    if args.lr <= 0:
        raise InvariantError(f"--lr must be positive, got {args.lr}")
    config = _train_config(args)
    _print_config("personalize", {"data": args.data, "out": args.out, **asdict(config)})
    manifest = load_manifest(Path(args.data) / "manifest.tsv")
    state, trace = train_on_manifest(manifest, config)
    save_state(state, args.out)
    trace_path = Path(args.out).with_suffix(Path(args.out).suffix + ".trace")
    trace_path.write_text("".join(f"{i}\t{v:.17g}\n" for i, v in enumerate(trace)))
    print(f"wrote {args.out} and {trace_path} (final loss {trace[-1]:.6f})")
    return 0


def _cmd_eval(args) -> int:
    if not args.frozen_only and args.state is None:
        raise InvariantError("--state is required unless --frozen-only is given")
    _print_config("eval", {"data": args.data, "state": args.state,
                           "report": args.report, "frozen_only": args.frozen_only,
                           "per_image": args.per_image})
    manifest = load_manifest(Path(args.data) / "manifest.tsv")
    state = None if args.frozen_only else load_state(args.state)
    report = evaluate(manifest, state=state, per_image=args.per_image)
    write_report(report, args.report)
    print(f"iou_per={report.iou_per:.4f} miou={report.miou:.4f} "
          f"precision_per={report.precision_per:.4f} recall_per={report.recall_per:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    _print_config("gradcheck", {"seed": args.seed, "eps": args.eps, "tol": args.tol})
    report = gradcheck(seed=args.seed, eps=args.eps, tol=args.tol)
    print(report.summary())
    return 0 if report.passed else 2


def _cmd_ablate(args) -> int:
    config = TrainConfig()
    _print_config("ablate", {"data": args.data, "out": args.out, **asdict(config)})
    rows = run_ablation(args.data, config)
    table = format_ablation_table(rows)
    Path(args.out).write_text(table)
    print(table, end="")
    return 0


def _cmd_kshot(args) -> int:
    try:
        k_list = [int(tok) for tok in args.k.split(",") if tok]
    except ValueError:
        raise InvariantError(f"--k must be a comma-separated integer list, got {args.k!r}")
    if not k_list or min(k_list) < 1:
        raise InvariantError(f"--k values must be >= 1, got {args.k!r}")
    config = TrainConfig()
    _print_config("kshot", {"data": args.data, "k": k_list, "out": args.out,
                            **asdict(config)})
    rows = run_kshot(args.data, k_list, config)
    table = format_kshot_table(rows)
    Path(args.out).write_text(table)
    print(table, end="")
    return 0


def _cmd_concat_eval(args) -> int:
    _print_config("concat-eval", {"data": args.data, "state": args.state,
                                  "report": args.report})
    state = load_state(args.state)
    report = concat_evaluate(args.data, state)
    write_report(report, args.report)
    print(f"iou_per={report.iou_per:.4f} miou={report.miou:.4f} "
          f"precision_per={report.precision_per:.4f} recall_per={report.recall_per:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="povseg",
                     description="Personalized open-vocabulary segmentation head "
                                 "over frozen backbone snapshots.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=SynthConfig.seed)
    p.add_argument("--vocab", type=int, default=SynthConfig.v)
    p.add_argument("--dim", type=int, default=SynthConfig.d)
    p.add_argument("--proposals", type=int, default=SynthConfig.n)
    p.add_argument("--grid", type=int, default=SynthConfig.h)
    p.add_argument("--feature-grid", type=int, default=SynthConfig.hf)
    p.add_argument("--instances", type=int, default=SynthConfig.instances_per_class)
    p.add_argument("--delta", type=float, default=SynthConfig.delta)
    p.add_argument("--sigma", type=float, default=SynthConfig.sigma)
    p.add_argument("--k-train", type=int, default=SynthConfig.k_train)
    p.add_argument("--test-pos", type=int, default=SynthConfig.n_test_pos)
    p.add_argument("--test-neg", type=int, default=SynthConfig.n_test_neg)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("personalize", help="Train a personal state on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_personalize)

    p = sub.add_parser("eval", help="Evaluate a state (or the frozen baseline)")
    p.add_argument("--data", required=True)
    p.add_argument("--state")
    p.add_argument("--report", required=True)
    p.add_argument("--frozen-only", action="store_true")
    p.add_argument("--per-image", action="store_true",
                   help="average per-image metrics instead of aggregating counts")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="Analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="Five-row module ablation table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("kshot", help="K-shot trend table")
    p.add_argument("--data", required=True)
    p.add_argument("--k", default="1,3,5")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_kshot)

    p = sub.add_parser("concat-eval", help="Evaluate on horizontally joined pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_concat_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (InvariantError, FormatError, FileNotFoundError) as exc:
        print(f"povseg: validation error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteError as exc:
        print(f"povseg: numeric error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, OSError, np.linalg.LinAlgError) as exc:
        print(f"povseg: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
