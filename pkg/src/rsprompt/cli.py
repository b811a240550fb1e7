"""Command-line entry point: ``rsprompt <subcommand> [flags]``.

Exit codes: 0 success, 1 a task failed, 2 the configuration was rejected.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, parse_config
from .data.registry import DATASETS, load_dataset

EXIT_OK, EXIT_TASK, EXIT_CONFIG = 0, 1, 2

SUBCOMMAND_KINDS = {
    "zeroshot": ("zeroshot",),
    "probe": ("probe",),
    "train": ("train",),
    "eval": ("eval",),
    "crosseval": ("crosseval",),
    "report": (),
    "run": None,
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment document")
    common.add_argument("--dataset", action="append", help="dataset name (repeatable)")
    common.add_argument("--method", action="append", help="method name (repeatable)")
    common.add_argument("--shots", action="append", type=int, help="shots per class (repeatable)")
    common.add_argument("--seed", action="append", type=int, help="sampling/training seed (repeatable)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--out", help="output root")
    common.add_argument("--backbone", help="backbone archive path, or 'micro'")
    common.add_argument("--data-root", help="directory holding the datasets")
    common.add_argument("--template", help="zero-shot prompt template")
    common.add_argument("--resume", action="store_true", default=True, help="skip completed tasks (default)")
    common.add_argument("--no-resume", dest="resume", action="store_false")
    common.add_argument("--force", action="store_true", help="re-run completed tasks")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rsprompt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    help_text = {
        "zeroshot": "hand-crafted prompt baseline",
        "probe": "linear probe on frozen image features",
        "train": "train prompt methods and save checkpoints",
        "eval": "evaluate saved checkpoints on the test split",
        "crosseval": "source x target transfer grid from 16-shot checkpoints",
        "report": "tables and figures from saved reports",
        "digest": "print backbone, split and config hashes",
        "run": "execute the whole plan",
    }
    for name, text in help_text.items():
        sub.add_parser(name, parents=[common], help=text)
    sub.add_parser("schema", help="print the config JSON schema")
    return parser


def _overrides(args, command: str) -> dict:
    doc: dict = {}
    if args.dataset:
        doc["datasets"] = args.dataset
    if args.method:
        doc["methods"] = args.method
    if args.shots:
        doc["shots"] = args.shots
    if args.seed:
        doc["seeds"] = args.seed
    if args.out:
        doc["output_root"] = args.out
    if args.backbone:
        doc["backbone"] = args.backbone
    if args.data_root:
        doc["data_root"] = args.data_root
    if args.template:
        doc["zeroshot_template"] = args.template
    if command == "zeroshot":
        doc.setdefault("methods", ["zeroshot"])
    elif command == "probe":
        doc.setdefault("methods", ["probe"])
    elif command == "crosseval":
        doc["cross_dataset"] = True
        if args.shots:
            if len(args.shots) != 1:
                raise ConfigError("crosseval takes a single --shots value")
            doc["cross_shots"] = args.shots[0]
    return doc


def _load(args, command: str):
    overrides = _overrides(args, command)
    if "datasets" not in overrides:
        base = {}
        if args.config:
            import yaml
            from pathlib import Path

            base = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(base, dict) or "datasets" not in base:
            overrides["datasets"] = list(DATASETS)
    return parse_config(args.config, overrides)


def _digest(cfg) -> dict:
    from .experiment import open_backbone

    out = {"config_hash": cfg.content_hash(), "backbone_digest": open_backbone(cfg).digest(), "split_digests": {}}
    for name in cfg.datasets:
        try:
            out["split_digests"][name] = load_dataset(name, cfg.data_root, check_files=False).split_digests()
        except (FileNotFoundError, ValueError, KeyError) as exc:
            out["split_digests"][name] = f"unavailable: {exc}"
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "schema":
        from .config import config_schema

        print(json.dumps(config_schema(), indent=1))
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args, args.command)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # malformed yaml and friends
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .experiment import Runner, run

    try:
        if args.command == "digest":
            print(json.dumps(_digest(cfg), indent=1, sort_keys=True))
            return EXIT_OK
        if args.command == "report":
            for p in Runner(cfg).report():
                print(p)
            return EXIT_OK
        kinds = SUBCOMMAND_KINDS[args.command]
        code = run(cfg, jobs=args.jobs, force=args.force, resume=args.resume, kinds=kinds,
                   emit=args.command in ("run", "crosseval"))
    except Exception as exc:
        logging.getLogger("rsprompt").error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TASK
    if code == EXIT_OK and args.command in ("zeroshot", "probe", "eval"):
        _print_accuracies(cfg, args.command)
    return code


def _print_accuracies(cfg, command: str) -> None:
    from .experiment import Runner

    for r in Runner(cfg).collect_reports():
        if command == "eval" and r.method in ("zeroshot", "probe"):
            continue
        if command != "eval" and r.method != command:
            continue
        shots = "" if r.method == "zeroshot" else f" shots={r.shots} seeds={r.seeds}"
        print(f"{r.dataset} {r.method}{shots} top1={100 * r.accuracy:.2f}%")


if __name__ == "__main__":
    sys.exit(main())
