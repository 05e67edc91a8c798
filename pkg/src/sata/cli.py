"""Command line entry point: ``sata {train,grid,eval,attn-report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import SataError
from .harness import (
    evaluate,
    export_attention_report,
    grid_search,
    load_config,
    load_datasets,
    train,
)

EXIT_CODES = {
    "config": 2,
    "parameter": 2,
    "data": 3,
    "format": 3,
    "corruption": 3,
    "checkpoint": 4,
    "numeric": 5,
}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sata", description="ViT training with trivial-attention suppression")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--t", type=float, help="threshold coefficient")
        p.add_argument("--s", type=float, help="suppression scale (initial value when learnable)")
        p.add_argument("--lr1", type=float, help="model learning rate")
        p.add_argument("--lr2", type=float, help="suppression-scale learning rate")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--data-dir", dest="data_dir", help="dataset directory (else $SATA_DATA_DIR)")
        p.add_argument("--out", help="output directory")
        return p

    common(sub.add_parser("train", help="train one model"))
    grid = common(sub.add_parser("grid", help="fixed-s grid over s and t"))
    grid.add_argument("--s-values", type=_floats)
    grid.add_argument("--t-values", type=_floats)
    grid.add_argument("--jobs", type=int, default=1)
    ev = common(sub.add_parser("eval", help="top-1 accuracy of a checkpoint"))
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", choices=["train", "val"], default="val")
    rep = common(sub.add_parser("attn-report", help="export attention statistics"))
    rep.add_argument("--checkpoint", required=True)
    rep.add_argument("--threshold", type=float)
    rep.add_argument("--bin-width", dest="bin_width", type=float)
    rep.add_argument("--num-images", dest="report_images", type=int)
    rep.add_argument("--split", choices=["train", "val"], default="val")
    return parser


def _config(args):
    keys = ["t", "s", "lr1", "lr2", "seed", "epochs", "data_dir", "out", "threshold", "bin_width", "report_images"]
    overrides = {k: getattr(args, k, None) for k in keys}
    return load_config(args.config, **overrides)


def _pick(train_set, val_set, split):
    return train_set if split == "train" or val_set is None else val_set


def run(args) -> int:
    config = _config(args)
    if args.command == "train":
        report = train(config)
        last = report.epochs[-1] if report.epochs else {}
        print(f"checkpoint={report.checkpoint} epochs={len(report.epochs)} "
              f"train_acc={last.get('train_acc', float('nan')):.4f} val_acc={last.get('val_acc', float('nan')):.4f}")
    elif args.command == "grid":
        result = grid_search(config, args.s_values, args.t_values, jobs=args.jobs)
        print(f"grid={result.path} baseline={result.baseline:.4f} failed_cells={len(result.errors)}")
    elif args.command == "eval":
        train_set, val_set = load_datasets(config)
        acc = evaluate(args.checkpoint, _pick(train_set, val_set, args.split))
        print(f"top1={acc:.6f}")
    elif args.command == "attn-report":
        train_set, val_set = load_datasets(config)
        data = _pick(train_set, val_set, args.split)
        batch = data.normalized(np.arange(min(config.report_images, len(data))))
        out = Path(config.out)
        report = export_attention_report(args.checkpoint, batch, config.threshold, config.bin_width, out)
        print(f"files={len(report.files)} dir={out} bound_ok={report.bound_ok}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except SataError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {exc.category}: {msg}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())
