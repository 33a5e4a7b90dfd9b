"""Command line: ``sitebot run | replay | report``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("sitebot")


def _run(args) -> int:
    from .manager import run_scenario
    from .sim import load_scenario

    sc = load_scenario(args.scenario, seed=args.seed, noise_scale=args.noise_scale)
    out = Path(args.out) if args.out else Path("runs") / f"{sc.name}-seed{sc.noise.seed}"
    overrides = {}
    if args.cycles is not None:
        from dataclasses import replace
        sc = replace(sc, cycles=args.cycles)
    if args.no_hal:
        overrides["hal_enabled"] = False
    log.info("running %s (seed %d) -> %s", sc.name, sc.noise.seed, out)
    report, rt = run_scenario(sc, out, **overrides)
    sys.stdout.write(report.summary())
    sys.stdout.write(f"simulated {rt.t:.1f} s; logs in {out}\n")
    return 1 if report.failed else 0


def _replay(args) -> int:
    from .manager import replay_estimates

    path = Path(args.log)
    run_dir = path.parent if path.is_file() else path
    replayed, logged = replay_estimates(run_dir)
    sys.stdout.write(f"replayed {len(replayed)} estimator knots from {run_dir}\n")
    if logged is None:
        return 0
    if logged.shape != replayed.shape:
        sys.stdout.write(f"MISMATCH: {len(logged)} logged vs {len(replayed)} replayed knots\n")
        return 1
    diff = float(np.max(np.abs(logged - replayed))) if len(logged) else 0.0
    identical = bool(np.array_equal(logged, replayed))
    sys.stdout.write(f"max |logged - replayed| = {diff:.3e} ({'identical' if identical else 'differs'})\n")
    return 0 if identical or diff <= args.tolerance else 1


def _report(args) -> int:
    from .manager import RunReport

    d = Path(args.run_dir)
    rep = RunReport.from_csv(d / "report.csv")
    sys.stdout.write(rep.summary())
    return 1 if rep.failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sitebot", description="Mobile marking robot simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write its logs")
    r.add_argument("scenario", help="scenario YAML file")
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    r.add_argument("--noise-scale", type=float, default=None,
                   help="multiply every sensor noise level and bias")
    r.add_argument("--cycles", type=int, default=None, help="override the loop cycle count")
    r.add_argument("--no-hal", action="store_true", help="keep the MHE pose at the HAL step")
    r.add_argument("-o", "--out", default=None, help="run directory (default runs/<name>-seed<N>)")
    r.set_defaults(func=_run)

    rp = sub.add_parser("replay", help="re-run the estimator over a measurement log")
    rp.add_argument("log", help="measurements.jsonl or its run directory")
    rp.add_argument("--tolerance", type=float, default=0.0,
                    help="accepted deviation from the logged estimates")
    rp.set_defaults(func=_replay)

    rr = sub.add_parser("report", help="summarize a finished run")
    rr.add_argument("run_dir")
    rr.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        sys.stderr.write(f"sitebot: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
