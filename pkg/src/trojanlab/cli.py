"""Command-line front end: ``trojanlab <subcommand> --out DIR [--config PATH] ...``.

Each subcommand runs one pipeline stage inside the run directory ``--out``;
``run-all`` runs every stage in order.  Failures print one JSON object to
stderr (and to ``DIR/error.json``) and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

from . import config as config_mod
from . import pipeline
from .container import ContainerError

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_CODES = {
    config_mod.ConfigError: 2,
    pipeline.MissingArtifactError: 3,
    pipeline.OutputExistsError: 4,
    ContainerError: 5,
}


def _setup_logging() -> None:
    level = os.environ.get("TROJANLAB_LOG", "error").lower()
    if level not in LOG_LEVELS:
        level = "error"
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trojanlab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON (defaults if omitted)")
    common.add_argument("--out", type=Path, help="run directory (overrides output_dir in the config)")
    common.add_argument("--seed", type=int, help="master seed for data and pretraining")
    common.add_argument("--jobs", type=int, default=None, help="worker processes for sweeps")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    sub = p.add_subparsers(dest="command", required=True)
    for name in [*pipeline.STAGES, "run-all"]:
        sub.add_parser(name, parents=[common])
    return p


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None and args.jobs < 1:
        raise config_mod.ConfigError("--jobs must be >= 1")
    return cfg


def _out_dir(args, cfg) -> Path:
    out = args.out or (Path(cfg.output_dir) if cfg.output_dir else None)
    if out is None:
        raise config_mod.ConfigError("no run directory: pass --out or set output_dir in the config")
    return out


def run_stage(run: pipeline.Run, name: str, plots: bool = True):
    log = logging.getLogger("trojanlab")
    log.info("stage %s", name)
    result = pipeline.STAGES[name](run)
    if plots:
        from . import plotting

        plotting.render_stage(run.dir, name)
    return result


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    out = None
    try:
        cfg = _load_config(args)
        out = _out_dir(args, cfg)
        run = pipeline.Run(out, cfg, force=args.force, jobs=args.jobs)
        run.echo_config()
        names = list(pipeline.STAGES) if args.command == "run-all" else [args.command]
        for name in names:
            run_stage(run, name, plots=not args.no_plots)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        code = next((c for cls, c in EXIT_CODES.items() if isinstance(exc, cls)), 1)
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if isinstance(exc, pipeline.MissingArtifactError):
            record["produced_by"] = exc.producer
        if logging.getLogger("trojanlab").isEnabledFor(logging.DEBUG):
            record["traceback"] = traceback.format_exc()
        text = json.dumps(record, sort_keys=True)
        print(text, file=sys.stderr)
        if out is not None and out.is_dir():
            (out / "error.json").write_text(text + "\n")
        return code
    err = out / "error.json"
    if err.exists():
        err.unlink()
    return 0


if __name__ == "__main__":
    sys.exit(main())
