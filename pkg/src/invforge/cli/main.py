"""``invforge`` command line: dataset generation, training stages, design, report and export."""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
log = logging.getLogger("invforge")


def _common() -> argparse.ArgumentParser:
    # SUPPRESS lets these flags appear before or after the subcommand without clobbering each other
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="YAML config file")
    p.add_argument("--set", dest="sets", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                   help="override a config key, e.g. --set vae_train.steps=200 (repeatable)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap on BLAS/OpenMP worker threads")
    p.add_argument("--out", default=argparse.SUPPRESS, help="run directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="invforge", parents=[common],
                                     description="Guided latent diffusion and lattice refinement for drag-minimizing shapes.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the superellipsoid dataset")
    tr = sub.add_parser("train", parents=[common], help="train one model")
    tr.add_argument("model", choices=["vae", "diffusion", "latent-obj", "gnn"])
    de = sub.add_parser("design", parents=[common], help="sample, extract and refine candidates")
    de.add_argument("--no-refine", action="store_true", help="keep the extracted meshes unrefined")
    de.add_argument("-n", type=int, help="number of candidates")
    de.add_argument("--gamma", type=float, help="guidance scale")
    de.add_argument("--method", choices=["diffusion", "cem", "gd"])
    de.add_argument("--name", help="output directory name inside the run")
    rp = sub.add_parser("report", parents=[common], help="evaluate design sets")
    rp.add_argument("--design", action="append", help="design directory name (repeatable)")
    ex = sub.add_parser("export", parents=[common], help="copy refined designs to a flat directory")
    ex.add_argument("dest")
    ex.add_argument("--design", help="design directory name")
    sub.add_parser("all", parents=[common], help="run every stage in order")
    return parser


def _resolve(args):
    from .config import load_config

    sets = list(getattr(args, "sets", []) or [])
    for flag in ("seed", "threads", "out"):
        if hasattr(args, flag):
            sets.append(f"{flag}={getattr(args, flag)}")
    if args.command == "design":
        if args.no_refine:
            sets.append("design.refine=false")
        if args.n is not None:
            sets.append(f"design.n={args.n}")
        if args.gamma is not None:
            sets.append(f"design.gamma={args.gamma}")
        if args.method is not None:
            sets.append(f"design.method={args.method}")
        if args.name is not None:
            sets.append(f"design.name={args.name}")
    return load_config(getattr(args, "config", None), sets)


def dispatch(args) -> None:
    cfg = _resolve(args)
    from . import pipeline

    run = pipeline.Run(cfg)
    if args.command == "gen-data":
        pipeline.gen_data(run)
    elif args.command == "train":
        pipeline.TRAINERS[args.model](run)
    elif args.command == "design":
        pipeline.design(run)
    elif args.command == "report":
        pipeline.report(run, args.design)
    elif args.command == "export":
        pipeline.export(run, args.dest, args.design)
    elif args.command == "all":
        pipeline.gen_data(run)
        for trainer in pipeline.TRAINERS.values():
            trainer(run)
        pipeline.design(run)
        pipeline.report(run)


def _cap_threads(argv: list[str]) -> None:
    # must happen before numpy loads its BLAS, hence the manual scan
    n = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    n = n or os.environ.get("INVFORGE_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _cap_threads(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from ..errors import ConfigError, DataError, InvForgeError, NumericalError

    try:
        dispatch(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (DataError, InvForgeError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
