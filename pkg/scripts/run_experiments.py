#!/usr/bin/env python3
"""Drive the shipped manifests through the command line in dependency order.

The fit manifests run first because the closed-loop and alpha manifests load
their containers. Pass names (without .toml) to run a subset:

    python scripts/run_experiments.py vdp_fit vdp_mpc_nominal
    python scripts/run_experiments.py --jobs 4

Runtimes on a laptop: the fits and the open-loop study are minute-scale, the
650-step surrogate closed loops take a few minutes each, alpha_vdp solves
thousands of small OCPs and is the slowest entry.
"""

import argparse
import sys
import time
from pathlib import Path

from koopman_mpc.cli import main as toolkit

MANIFESTS = Path(__file__).resolve().parent.parent / "manifests"

# (name, command); order matters, fits feed the later runs.
PLAN = [
    ("vdp_fit", "fit"),
    ("cstr_fit", "fit"),
    ("vdp_quick", "openloop"),
    ("vdp_openloop", "openloop"),
    ("vdp_mpc_nominal", "mpc"),
    ("vdp_mpc_surrogate_n30", "mpc"),
    ("vdp_mpc_surrogate_n50", "mpc"),
    ("vdp_mpc_nominal_lam25", "mpc"),
    ("vdp_mpc_nominal_lam25_n50", "mpc"),
    ("vdp_mpc_surrogate_lam25", "mpc"),
    ("vdp_mpc_surrogate_lam25_n50", "mpc"),
    ("cstr_mpc", "mpc"),
    ("alpha_synthetic", "alpha"),
    ("alpha_vdp", "alpha"),
]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("names", nargs="*", help="manifest names to run (default: all)")
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()

    known = {name for name, _ in PLAN}
    unknown = set(args.names) - known
    if unknown:
        parser.error(f"unknown manifest names: {sorted(unknown)} (choose from {sorted(known)})")

    failures = []
    for name, command in PLAN:
        if args.names and name not in args.names:
            continue
        manifest = MANIFESTS / f"{name}.toml"
        print(f"== {command} {manifest.name}")
        start = time.monotonic()
        code = toolkit([command, "--manifest", str(manifest), "--jobs", str(args.jobs)])
        print(f"== {name}: exit {code} after {time.monotonic() - start:.1f}s")
        if code != 0:
            failures.append(name)
    if failures:
        print(f"failed: {', '.join(failures)}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
