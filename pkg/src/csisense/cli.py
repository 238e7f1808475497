"""Command line interface: prepare | train | evaluate | analyze | report.

Each stage takes --config PATH (JSON, strict schema) plus repeatable
--override dotted.key=value flags.  The dataset root may come from the
CSISENSE_DATASET_ROOT environment variable when dataset.root is null.
Exit code 0 only on full success.
"""

from __future__ import annotations

import argparse
import json
import sys

from .experiment import (
    Experiment,
    cmd_analyze,
    cmd_evaluate,
    cmd_prepare,
    cmd_report,
    cmd_train,
)


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE",
        help="override a config entry by dotted path (repeatable)",
    )
    parser.add_argument(
        "--force", action="store_true",
        help="allow replacing outputs of a previous run of this stage",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csisense", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (
        ("prepare", "validate/synthesise the dataset and write split manifests"),
        ("train", "train one model per split"),
        ("evaluate", "compute metrics per split and the mean ± SD aggregate"),
        ("analyze", "feature-space identity-invariance analysis"),
    ):
        p = sub.add_parser(name, help=text)
        _add_config_args(p)
        if name == "analyze":
            p.add_argument("--checkpoint", default=None, help="checkpoint to analyze")

    p = sub.add_parser("report", help="render tables and plot data from run directories")
    p.add_argument("runs", nargs="+", help="run directories (run-<fingerprint>)")
    p.add_argument("--out", default=None, help="directory for tables.txt and CSVs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            text = cmd_report(args.runs, out_dir=args.out)
            print(text, end="")
            return 0
        exp = Experiment.from_file(args.config, overrides=args.override)
        if args.command == "prepare":
            summary = cmd_prepare(exp, force=args.force)
            print(json.dumps(summary, indent=2))
        elif args.command == "train":
            results = cmd_train(exp, force=args.force)
            print(json.dumps(results, indent=2))
        elif args.command == "evaluate":
            record = cmd_evaluate(exp, force=args.force)
            print(json.dumps(record["aggregate"], indent=2))
        elif args.command == "analyze":
            payload = cmd_analyze(exp, checkpoint=args.checkpoint, force=args.force)
            inv = payload["invariance"]
            print(json.dumps({
                "euclidean_mean": inv["euclidean_mean"],
                "euclidean_sd": inv["euclidean_sd"],
                "cosine_mean": inv["cosine_mean"],
                "cosine_sd": inv["cosine_sd"],
                "excluded_users": inv["excluded_users"],
            }, indent=2))
        print(f"run directory: {exp.run_dir}", file=sys.stderr)
        return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
