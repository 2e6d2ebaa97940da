"""Command-line entry point.

    talkit gen-synth    --out DIR
    talkit train        --track {supervised,weak} --data DIR --out CKPT
    talkit train-tcanet --data DIR --out CKPT
    talkit train-mgfn   --data DIR --out CKPT
    talkit refine       --checkpoint CKPT --data DIR --proposals FILE --out FILE [--stages K]
    talkit localize     --checkpoint CKPT --data DIR --out FILE
    talkit eval         --detections FILE --annotations FILE [--json FILE]
    talkit grad-check
    talkit export-cas   --checkpoint CKPT --data DIR --out DIR

Every command takes ``--config`` (JSON, see ``--print-config``) and
``--seed``. Named errors exit with status 2; a failed gradient check
exits with status 1.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from . import pipeline
from .config import RunConfig
from .errors import ConfigError, TalError
from .fileio import write_json
from .gradsuite import run_module_checks


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "stages", None) is not None and args.command in ("train", "train-tcanet"):
        cfg.tbr = replace(cfg.tbr, stages=args.stages)
    return cfg.validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkit", description="Temporal action localisation toolkit")
    parser.add_argument("--print-config", action="store_true", help="print the default config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--track", choices=("supervised", "weak"))
        return p

    p = command("gen-synth", "write a synthetic dataset")
    p.add_argument("--out", required=True)

    for name in ("train", "train-tcanet", "train-mgfn"):
        p = command(name, "train a model on a dataset directory")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="checkpoint path")
        if name != "train-mgfn":
            p.add_argument("--stages", type=int)

    p = command("refine", "refine proposals with a trained TCANet")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", type=int)

    p = command("localize", "weakly supervised detection with a trained MGFN")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = command("eval", "score detections or proposals against annotations")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--json", dest="json_out", help="also write metric records here")
    p.add_argument("--out", dest="json_out", help=argparse.SUPPRESS)

    p = command("grad-check", "finite-difference check of every trainable module")
    p.add_argument("--max-coords", type=int, default=40)

    p = command("export-cas", "write normalised CAS matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def run(args) -> int:
    cfg = _load_config(args)
    cmd = args.command
    if cmd == "train":
        if args.track is None:
            raise ConfigError("train needs --track supervised or --track weak")
        cmd = "train-tcanet" if args.track == "supervised" else "train-mgfn"
    if cmd == "gen-synth":
        data = pipeline.generate(args.out, cfg)
        print(f"wrote {len(data.videos)} videos and {len(data.clips)} clips to {args.out}")
    elif cmd == "train-tcanet":
        pipeline.train_supervised(args.data, args.out, cfg)
        print(f"saved {args.out}")
    elif cmd == "train-mgfn":
        pipeline.train_weak(args.data, args.out, cfg)
        print(f"saved {args.out}")
    elif cmd == "refine":
        rows = pipeline.refine_file(args.checkpoint, args.data, args.proposals, args.out, args.stages)
        print(f"refined {len(rows)} proposals -> {args.out}")
    elif cmd == "localize":
        dets = pipeline.localize_dir(args.checkpoint, args.data, args.out)
        print(f"wrote {len(dets)} detections -> {args.out}")
    elif cmd == "eval":
        metrics = pipeline.evaluate_files(args.detections, args.annotations)
        sys.stdout.write(pipeline.format_metrics(metrics))
        if args.json_out:
            write_json(args.json_out, metrics)
    elif cmd == "grad-check":
        reports = run_module_checks(cfg.seed, args.max_coords)
        for name, report in reports.items():
            print(f"{name:12s} {report.summary()}")
        return 0 if all(r.passed for r in reports.values()) else 1
    elif cmd == "export-cas":
        paths = pipeline.export_cas(args.checkpoint, args.data, args.out)
        print(f"wrote {len(paths)} CAS files to {args.out}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_config:
        sys.stdout.write(RunConfig().dumps())
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return run(args)
    except (TalError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
