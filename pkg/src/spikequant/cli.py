"""``spikequant`` command line.

Every subcommand runs one stage in the run directory; ``pipeline`` chains
train-toy, sweep, base, guided, composite, quantize and report. Logs are
line-delimited JSON on stderr. Each error class has its own exit code (see
:mod:`spikequant.errors`).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .errors import SpikeQuantError

SUBCOMMANDS = {
    "train-toy": "build and train the toy network (or import --config's checkpoint)",
    "sweep": "layer-wise sensitivity sweep over the bit axis",
    "base": "select the high/low base settings from the sweep",
    "guided": "guided per-unit exploration between the base settings",
    "composite": "evaluate whole-network settings and select the final spec",
    "quantize": "apply a spec to the trained model and evaluate it",
    "eval": "evaluate a checkpoint on the evaluation subset",
    "report": "write the run report",
    "pipeline": "run every stage in order",
}

_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}


class JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        out.update({k: v for k, v in vars(record).items() if k not in _RESERVED})
        return json.dumps(out, default=str)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (INI key = value)")
    common.add_argument("--output-dir", help="run directory (env SPIKEQUANT_OUTPUT_DIR)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="evaluation threads (env SPIKEQUANT_WORKERS)")
    common.add_argument("--force", action="store_true", help="re-run stages even when up to date")
    common.add_argument("--subset-size", type=int, help="evaluation samples, 0 = whole validation split")
    common.add_argument("--delta", type=float, help="accuracy tolerance in percentage points")
    common.add_argument("--mode", choices=("faithful", "symmetric"))
    common.add_argument("--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(prog="spikequant", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in SUBCOMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "quantize":
            p.add_argument("--spec", help="quant spec file to apply instead of the composite selection")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint to evaluate (default: quantized, else trained model)")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLines())
    root = logging.getLogger("spikequant")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if args.quiet else logging.INFO)
    root.propagate = False

    from .pipeline import run_stage

    overrides = {
        "output_dir": args.output_dir,
        "seed": args.seed,
        "workers": args.workers,
        "subset_size": args.subset_size,
        "delta": args.delta,
        "mode": args.mode,
    }
    try:
        cfg = load_config(args.config, overrides)
        if not args.quiet:
            print("# effective configuration\n" + cfg.to_ini(), file=sys.stderr)
        kwargs = {}
        if args.command == "quantize" and args.spec:
            kwargs["spec_path"] = args.spec
        if args.command == "eval" and args.checkpoint:
            kwargs["checkpoint"] = args.checkpoint
        run_stage(cfg, args.command, force=args.force, **kwargs)
    except SpikeQuantError as exc:
        root.error(str(exc), extra={"event": "error", "error": type(exc).__name__, "exit_code": exc.exit_code})
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
