"""Command line entry point: ``dmsn {generate,train,eval,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import ConfigurationError, DMSNError

log = logging.getLogger("dmsn")


def _resolve(path: str, base: Path) -> str:
    if not path:
        return path
    p = Path(path)
    return str(p if p.is_absolute() else (base / p).resolve())


def cmd_generate(args) -> int:
    from .synth_data import default_domain_specs, generate_dataset, save_dataset

    root = Path(args.out)
    for split, n, seed in (("train", args.num_images, args.seed), ("test", args.test_images, args.seed + 1)):
        ds = generate_dataset(default_domain_specs(n), seed)
        manifest = save_dataset(ds, root / split)
        print(f"{split}: {sum(len(v) for v in ds.values())} images -> {manifest}")
    return 0


def cmd_train(args) -> int:
    import torch

    from .evaluation import evaluate
    from .synth_data import load_dataset
    from .trainer import TrainConfig, run_training

    torch.set_num_threads(1)
    config = TrainConfig.from_file(args.config)
    # data paths are resolved against the config file but stored as written,
    # so identical configs give identical checkpoints wherever they run
    base = Path(args.config).resolve().parent
    if not config.train_data:
        raise ConfigurationError("train_data is not set in the config")
    train = load_dataset(_resolve(config.train_data, base))
    out = Path(args.out)
    result = run_training(config, out, train, resume=args.resume, max_steps=args.max_steps)
    print(f"status={result.summary['status']} steps={result.summary['steps']} faults={result.summary['faults']}")
    print(f"checkpoint: {result.checkpoint}")
    if config.test_data:
        report = evaluate(result.checkpoint, load_dataset(_resolve(config.test_data, base)), config)
        report.to_json(out / "report.json")
        print(f"target mAP: {report.map:.4f}")
    return 0 if result.summary["status"] == "ok" else 1


def cmd_eval(args) -> int:
    import torch

    from .evaluation import evaluate, load_detector
    from .synth_data import load_dataset
    from .trainer import TrainConfig

    torch.set_num_threads(1)
    _, meta = load_detector(args.ckpt)
    config = TrainConfig.from_dict(meta["config"])
    if args.include_empty_classes:
        config.include_empty_classes = True
    split = load_dataset(Path(args.data) / args.split)
    report = evaluate(args.ckpt, split, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    print(f"mAP: {report.map:.4f}")
    for name, ap in report.per_class_ap.items():
        print(f"  {name}: {'n/a' if ap is None else f'{ap:.4f}'}")
    for name, m in report.per_subnet_map.items():
        print(f"  subnet {name}: {m:.4f}")
    return 0


def cmd_report(args) -> int:
    from .evaluation import write_report

    path = write_report(args.runs, args.out)
    print(f"report: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmsn", description="Multi-source domain-adaptive detection on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings such as skipped steps")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic corpus (train and test splits)")
    p.add_argument("--out", required=True, help="dataset root; splits go to <out>/train and <out>/test")
    p.add_argument("--num-images", type=int, default=200, help="training images per domain")
    p.add_argument("--test-images", type=int, default=100, help="test images per domain")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split", required=True, help="split directory under the root, e.g. test")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--include-empty-classes", action="store_true", help="score classes without ground truth as AP 0")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="plots and a markdown summary for a directory of runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default=None, help="output directory (default <runs>/report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DMSNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
