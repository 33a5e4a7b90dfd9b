"""Mark the location-A dot pattern with and without the HAL step.

    python3 demos/hal_on_off.py [scenario.yaml] [--seed N]

Both runs share the same motion (the viewpoint scan also happens without
HAL), so the difference is the HAL correction alone. Takes a few minutes.
"""
import argparse
from pathlib import Path

from sitebot.manager import run_scenario
from sitebot.sim import load_scenario

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("scenario", nargs="?", default=str(HERE.parent / "scenarios" / "location_a.yaml"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rows = {}
    for hal in (True, False):
        sc = load_scenario(args.scenario, seed=args.seed)
        # approach straight from the spawn instead of from a random start per dot
        report, rt = run_scenario(sc, hal_enabled=hal, random_approach=False)
        rows[hal] = report
        print(f"HAL {'on ' if hal else 'off'}: {len(report.done)}/{len(report)} done, "
              f"absolute {report.mean_absolute_error_mm():6.2f} mm, "
              f"relative {report.mean_relative_error_mm():6.2f} mm, simulated {rt.t:.0f} s")
    print("\ndot   HAL on (mm)            HAL off (mm)")
    for a, b in zip(rows[True].entries, rows[False].entries):
        print(f"{a.task_id}{a.dot:<4} {a.absolute_error_mm:6.2f}                 {b.absolute_error_mm:6.2f}")


if __name__ == "__main__":
    main()
