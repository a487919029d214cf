"""Command-line entry point.

    trajforge run -c config.json [--workers N] [--seed S]
    trajforge <stage> -c config.json          (fetch, transform, filter, export, split, stats, pes)
    trajforge validate -c config.json
    trajforge synth fixture DIR | trajforge synth scale DIR --frames N

Exit codes: 0 success, 2 invalid configuration, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import STAGES, ConfigInvalid, StageFailure, run, validate_config

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _common(p):
    p.add_argument("-c", "--config", required=True, help="pipeline config (JSON)")
    p.add_argument("--workers", type=int, help="worker processes (overrides config)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="trajforge", description="DFT relaxation-trajectory curation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the configured stages")
    _common(p)
    p.add_argument("--stages", help="comma-separated stage list (overrides config)")

    for st in STAGES:
        p = sub.add_parser(st, help=f"run only the {st} stage")
        _common(p)
        if st == "pes":
            p.add_argument("--elements", help="comma-separated element subset, e.g. Fe,Cu,Al,Ni")
            p.add_argument("--rcut", type=float)
            p.add_argument("--nmax", type=int)
            p.add_argument("--lmax", type=int)
            p.add_argument("--sigma", type=float)
            p.add_argument("--refs", help="reference energies JSON")
            p.add_argument("--functional", help="functional whose frames fit the PCA")
            p.add_argument("--project-functional", help="project this functional's frames instead")

    p = sub.add_parser("validate", help="parse and print the effective config")
    p.add_argument("-c", "--config", required=True)

    p = sub.add_parser("synth", help="write a synthetic raw corpus")
    p.add_argument("kind", choices=["fixture", "scale"])
    p.add_argument("directory")
    p.add_argument("--frames", type=int, default=10_000)
    p.add_argument("--atoms", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _pes_overrides(args):
    over = {}
    if args.elements:
        over["elements"] = [e.strip() for e in args.elements.split(",") if e.strip()]
    for flag, key in (("rcut", "r_cut"), ("nmax", "n_max"), ("lmax", "l_max"), ("sigma", "sigma"),
                      ("refs", "refs"), ("functional", "functional"),
                      ("project_functional", "project_functional")):
        v = getattr(args, flag)
        if v is not None:
            over[key] = v
    return over


def _load(args):
    overrides = {"workers": args.workers, "seed": args.seed}
    if args.command == "run" and args.stages:
        overrides["stages"] = [s.strip() for s in args.stages.split(",") if s.strip()]
    elif args.command in STAGES:
        overrides["stages"] = [args.command]
    if args.command == "pes":
        pes = _pes_overrides(args)
        if pes:
            with open(args.config) as fh:
                text = fh.read()
            base = json.loads(text) if text.strip() else {}
            overrides["pes"] = {**base.get("pes", {}), **pes}
    return validate_config(args.config, **overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    if args.command == "synth":
        from .synthetic import fixture_corpus, scale_corpus
        if args.kind == "fixture":
            dirs = fixture_corpus(args.directory)
            print(json.dumps({s.value: str(d) for s, d in dirs.items()}, indent=2))
        else:
            info = scale_corpus(args.directory, args.frames, atoms=args.atoms, seed=args.seed)
            print(json.dumps({"frames": info["frames"], "trajectories": info["trajectories"]}))
        return EXIT_OK

    try:
        if args.command == "validate":
            cfg = validate_config(args.config, check_dependencies=False)
            from .pipeline import _plain
            print(json.dumps(_plain(cfg), indent=2, sort_keys=True))
            return EXIT_OK
        cfg = _load(args)
    except ConfigInvalid as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        report = run(cfg)
    except StageFailure as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
