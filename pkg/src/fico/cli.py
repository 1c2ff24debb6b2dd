"""Command-line interface.

Subcommands: synth, teacher, train, eval, ablate, corrupt, gradcheck, report.
Exit codes: 0 success, 1 validation failure (bad flags, malformed config,
missing datasets), 2 runtime failure (divergence, failed check, IO error).
The FICO_THREADS environment variable bounds worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from fico.errors import (
    ConfigError,
    DatasetLayoutError,
    LevelCountMismatch,
    ShapeMismatch,
    UndefinedMetric,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _configure_threads() -> None:
    raw = os.environ.get("FICO_THREADS")
    if raw is None:
        return
    try:
        threads = int(raw)
    except ValueError as err:
        raise ConfigError(f"FICO_THREADS must be an integer, got {raw!r}") from err
    if threads < 1:
        raise ConfigError(f"FICO_THREADS must be >= 1, got {threads}")
    import torch

    torch.set_num_threads(threads)


def _cmd_synth(args) -> int:
    from fico.shift import DatasetSpec, synth_dataset

    kwargs = {}
    if args.categories:
        kwargs["categories"] = tuple(args.categories.split(","))
    spec = DatasetSpec(
        image_size=args.image_size,
        train_count=args.train_count,
        test_good_count=args.test_good_count,
        test_defect_count=args.test_defect_count,
        aux_count=args.aux_count,
        **kwargs,
    )
    root = synth_dataset(args.out, spec, args.seed)
    print(f"dataset written to {root} (categories: {', '.join(spec.categories)})")
    return 0


def _cmd_teacher(args) -> int:
    from fico.harness import save_teacher
    from fico.model import make_teacher

    teacher, metrics = make_teacher(
        args.aux,
        seed=args.seed,
        base_channels=args.base_channels,
        k_levels=args.k_levels,
        min_accuracy=args.min_accuracy,
        max_epochs=args.max_epochs,
    )
    path = save_teacher(args.out, teacher, metrics)
    print(f"teacher at {path}: accuracy {metrics['accuracy']:.3f} after {metrics['epochs']} epochs")
    return 0


def _load_config(args):
    from fico.harness import RunConfig

    config = RunConfig.from_json(args.config)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _cmd_train(args) -> int:
    from fico.harness import train

    config = _load_config(args)
    result = train(config, args.out)
    final = result.trajectory[-1]["total"] if result.trajectory else float("nan")
    print(f"checkpoint at {result.checkpoint_path} (mode {config.mode}, final total {final:.4f})")
    return 0


def _cmd_eval(args) -> int:
    from fico.harness import evaluate

    scenarios = None
    if args.scenario:
        scenarios = {}
        for item in args.scenario:
            if "=" not in item:
                raise ConfigError(f"--scenario expects NAME=PATH, got {item!r}")
            name, _, root = item.partition("=")
            scenarios[name] = root
    result = evaluate(args.checkpoint, scenarios=scenarios, lam=args.lam, out_dir=args.out)
    for name, value in result.aurocs.items():
        print(f"{name}: auroc {value:.4f}")
    print(f"report under {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    from fico.data import list_categories
    from fico.harness import ablate

    config = _load_config(args)
    modes = args.modes.split(",")
    categories = args.categories.split(",") if args.categories else None
    if categories is None and not config.category:
        categories = list_categories(config.dataset_root)
    table = ablate(config, modes, args.out, categories=categories)
    for row in table["rows"]:
        cells = " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float))
        print(f"{row['mode']}: {cells}")
    print(f"ablation table under {args.out}")
    return 0


def _cmd_corrupt(args) -> int:
    from fico.shift import CorruptionSpec, corrupt_tree

    spec = CorruptionSpec.from_severity(args.kind, args.severity)
    root = corrupt_tree(args.in_dir, args.out, spec, args.seed)
    print(f"corrupted dataset at {root} ({spec.kind}={spec.value}, severity {args.severity})")
    return 0


def _cmd_gradcheck(args) -> int:
    from fico.checkpoint import atomic_write_text
    from fico.harness import gradcheck_pipeline

    report = gradcheck_pipeline(seed=args.seed, tolerance=args.tolerance)
    for name, comp in report["components"].items():
        verdict = "PASS" if comp["passed"] else "FAIL"
        print(f"{name}: max_rel_err {comp['max_rel_err']:.3e} {verdict}")
    print(f"overall: {'PASS' if report['passed'] else 'FAIL'} in {report['runtime_s']:.1f}s")
    if args.out:
        atomic_write_text(Path(args.out), json.dumps(report, indent=1))
        print(f"report at {args.out}")
    return 0 if report["passed"] else 2


def _cmd_report(args) -> int:
    from fico.eval import ScoredSample, build_report

    scores_dir = Path(args.scores)
    files = sorted(scores_dir.glob("*.json"))
    if not files:
        raise ConfigError(f"no score files under {scores_dir}")
    results: dict[str, dict[str, list[ScoredSample]]] = {}
    order: list[str] = []
    for path in files:
        payload = json.loads(path.read_text())
        category = payload.get("category", "all")
        scenario = payload["scenario"]
        samples = [ScoredSample(s["sample_id"], s["score"], s["label"]) for s in payload["samples"]]
        results.setdefault(category, {})[scenario] = samples
        if scenario not in order:
            order.append(scenario)
    build_report(results, args.out, scenario_order=order)
    print(f"report under {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="fico", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", parents=[], help="generate the synthetic texture benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--categories", default="", help="comma-separated texture families")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--train-count", type=int, default=64)
    p.add_argument("--test-good-count", type=int, default=16)
    p.add_argument("--test-defect-count", type=int, default=8)
    p.add_argument("--aux-count", type=int, default=48)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("teacher", help="train and freeze the texture-classification teacher")
    p.add_argument("--aux", required=True, help="auxiliary class-folder dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--k-levels", type=int, default=3)
    p.add_argument("--min-accuracy", type=float, default=0.90)
    p.add_argument("--max-epochs", type=int, default=40)
    p.set_defaults(func=_cmd_teacher)

    p = sub.add_parser("train", help="train one category with the config's mode")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score scenario datasets with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=None, help="test-time adaptation strength")
    p.add_argument("--scenario", action="append", default=None, metavar="NAME=PATH")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate several modes under one seed")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--modes", default="GNL,DISCO,DISCO+DIIFI,FICO")
    p.add_argument("--categories", default="", help="comma-separated; defaults to all in the dataset")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("corrupt", help="mirror a dataset with one corruption applied")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--severity", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_corrupt)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", default="", help="optional JSON report path")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", help="rebuild report tables and figures from score files")
    p.add_argument("--scores", required=True, help="directory of per-scenario score JSON files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return 1
    try:
        _configure_threads()
        return args.func(args)
    except (ConfigError, DatasetLayoutError, ShapeMismatch, LevelCountMismatch, UndefinedMetric) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - the CLI boundary maps everything to exit 2
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
