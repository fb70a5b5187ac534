"""``lipunit`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

COMMANDS = ("make-data", "fit-units", "train-l2s", "train-vocoder", "synthesize", "evaluate", "ablate", "validate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipunit", description="Lip-to-speech pipeline with speech units.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML config file (defaults if omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, repeatable")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--workers", type=int, default=1, help="parallel workers for corpus synthesis")
    p.add_argument("--resume", action="store_true", help="skip steps whose outputs already exist")
    p.add_argument("--output-dir", help="shortcut for --set output_dir=...")
    p.add_argument("--frames", help="synthesize: VIDF frames file")
    p.add_argument("--speaker", type=int, help="synthesize: speaker id")
    p.add_argument("--out", help="synthesize: output WAV path")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    try:
        cfg = load_config(args.config, overrides, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        from .config import dump_config
        print(dump_config(cfg), end="")
        return EXIT_OK
    if args.command == "synthesize" and (args.frames is None or args.speaker is None or args.out is None):
        print("error: synthesize needs --frames, --speaker and --out", file=sys.stderr)
        return EXIT_CONFIG

    import torch
    from . import pipeline
    torch.set_num_threads(1)
    run_ = pipeline.Run(cfg, workers=args.workers, resume=args.resume)
    try:
        if args.command == "make-data":
            pipeline.make_data(run_)
        elif args.command == "fit-units":
            pipeline.fit_units(run_)
        elif args.command == "train-l2s":
            pipeline.train_l2s_command(run_)
        elif args.command == "train-vocoder":
            pipeline.train_vocoder_command(run_)
        elif args.command == "synthesize":
            pipeline.synthesize(run_, args.frames, args.speaker, args.out)
        elif args.command == "evaluate":
            report = pipeline.evaluate_command(run_)
            print(f"stoi {report.mean['stoi']:.4f}  estoi {report.mean['estoi']:.4f}  "
                  f"uer {report.mean['uer']:.4f}  wer {report.mean['wer']:.4f}")
        elif args.command == "ablate":
            pipeline.ablate(run_)
            print(run_.report("ablation.txt").read_text(), end="")
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - every other failure maps to exit 1
        logging.getLogger("lipunit").debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
