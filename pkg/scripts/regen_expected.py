#!/usr/bin/env python3
"""Recompute the frozen reference numbers in tests/expected_results.json.

Every value the tests compare against ships in that file together with the
manifest and seed that produced it. Rerun this script after any change that
legitimately moves the benchmarks (integrator tolerances, solver defaults,
sampling changes) and commit the refreshed file; the diff is the review
artifact. Runs the full van der Pol and CSTR pipelines, takes ~10 minutes.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "tests"))

import benchmarks  # noqa: E402
from koopman_mpc.dynamics import SampledDataMap  # noqa: E402
from koopman_mpc.edmd import BilinearSurrogate, fit, sample_states  # noqa: E402
from koopman_mpc.errbound import (  # noqa: E402
    build_test_points,
    c_tilde_constant,
    lipschitz_estimate,
    open_loop_error_study,
    operator_error,
    proportional_error_study,
    reference_compression,
)
from koopman_mpc.manifest import build_dictionary, build_system  # noqa: E402

TARGET = REPO / "tests" / "expected_results.json"


def log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def open_loop_section() -> dict:
    manifest = benchmarks.load("vdp_openloop.toml")
    bundle = build_system(manifest)
    dictionary = build_dictionary(manifest, bundle)
    plant = SampledDataMap(bundle.system, bundle.dt, bundle.integrator)
    study = manifest.section("openloop")
    report = open_loop_error_study(
        plant,
        dictionary,
        bundle.state_box,
        bundle.control_box,
        d_grid=[int(d) for d in study["d_grid"]],
        n_init=int(study["n_init"]),
        horizon=int(study["horizon"]),
        seed=manifest.seed_for(study),
    )
    log(f"open loop: means {report.time_averaged_mean}")
    return {
        "manifest": "vdp_openloop.toml",
        "seed": manifest.seed_for(study),
        "d_grid": list(report.d_grid),
        "horizon": report.horizon,
        "n_init": int(study["n_init"]),
        "time_averaged_mean": [float(v) for v in report.time_averaged_mean],
    }


def proportional_section() -> dict:
    manifest = benchmarks.load("vdp_openloop.toml")
    bundle = build_system(manifest)
    dictionary = build_dictionary(manifest, bundle)
    plant = SampledDataMap(bundle.system, bundle.dt, bundle.integrator)
    section = manifest.section("proportional")
    seed = manifest.seed_for(section)
    d_grid = [int(d) for d in section["d_grid"]]
    reference = reference_compression(
        dictionary,
        bundle.system,
        bundle.state_box,
        mode=section.get("reference", "empirical"),
        d_ref=int(section["d_ref"]) if "d_ref" in section else None,
        seed=seed,
    )
    u_grid = [np.zeros(bundle.control_box.dim), *bundle.control_box.corners()]
    estimates = {
        d: fit(dictionary, bundle.system, sample_states(bundle.state_box, d, seed))
        for d in d_grid
    }
    eps0 = operator_error(estimates[min(d_grid)], reference, bundle.dt, u_grid)
    c_tilde = c_tilde_constant(reference, bundle.dt, eps0, u_grid)
    lipschitz = lipschitz_estimate(dictionary, bundle.state_box, seed=seed)
    states, controls = build_test_points(
        bundle.state_box, bundle.control_box, int(section.get("n_test", 200)), seed
    )
    max_ratio = {}
    for d in d_grid:
        surrogate = BilinearSurrogate(estimates[d], dictionary, bundle.dt)
        result = proportional_error_study(
            plant, surrogate, states, controls, lipschitz, c_tilde
        )
        max_ratio[str(d)] = result.max_ratio
        log(f"proportional: d={d} max ratio {result.max_ratio:.6e}")
    return {
        "manifest": "vdp_openloop.toml",
        "seed": seed,
        "n_test": int(section.get("n_test", 200)),
        "lipschitz": lipschitz,
        "c_tilde": c_tilde,
        "max_ratio": max_ratio,
    }


def tail_stats(norms: np.ndarray, window: int) -> dict:
    tail = norms[-window:]
    return {
        "mean": float(np.mean(tail)),
        "median": float(np.median(tail)),
        "max": float(np.max(tail)),
    }


def practical_stability_section(assets: benchmarks.FitAssets) -> dict:
    runs = {}
    for horizon in (30, 50):
        t0 = time.monotonic()
        traj, values, _ = benchmarks.closed_loop_from_manifest(
            f"vdp_mpc_surrogate_n{horizon}.toml", model=assets.surrogate
        )
        norms = traj.norms
        runs[f"n{horizon}"] = {
            "entry_step_r05": benchmarks.first_entry_step(norms, 0.05),
            "entry_step_r10": benchmarks.first_entry_step(norms, 0.1),
            "tail100": tail_stats(norms, 100),
            "final_norm": float(norms[-1]),
            "steps": len(traj),
        }
        log(
            f"lam=0.05 N={horizon}: entries "
            f"{runs[f'n{horizon}']['entry_step_r05']}/{runs[f'n{horizon}']['entry_step_r10']}"
            f" tail mean {runs[f'n{horizon}']['tail100']['mean']:.3e}"
            f" ({time.monotonic() - t0:.0f}s)"
        )
    post = max(run["tail100"]["max"] for run in runs.values())
    return {"radius": 0.05, "runs": runs, "observed_tail_max": post}


def nominal_decay_section() -> dict:
    t0 = time.monotonic()
    traj, values, _ = benchmarks.closed_loop_from_manifest(
        "vdp_mpc_nominal.toml", steps=310
    )
    norms = traj.norms
    below = np.nonzero(norms < 1e-6)[0]
    first = int(below[0]) if len(below) else None
    log(
        f"nominal lam=0.05: first step below 1e-6 at {first}, "
        f"norm(300)={norms[300]:.6e} ({time.monotonic() - t0:.0f}s)"
    )
    return {
        "manifest": "vdp_mpc_nominal.toml",
        "steps": len(traj),
        "first_step_below_tol": first,
        "tol": 1e-6,
        "norm_at_step_300": float(norms[300]),
        "max_increase_after_step_5": float(np.max(np.diff(norms[5:]))),
    }


def value_trace_section(assets: benchmarks.FitAssets) -> dict:
    out = {}
    for horizon in (30, 50):
        entry = {}
        suffix = "" if horizon == 30 else "_n50"
        for label, model in (("nominal", None), ("surrogate", assets.surrogate)):
            name = f"vdp_mpc_{label}_lam25{suffix}.toml"
            t0 = time.monotonic()
            traj, values, _ = benchmarks.closed_loop_from_manifest(name, model=model)
            diffs = np.diff(values)
            k0 = benchmarks.first_stagnation_step(values)
            entry[label] = {
                "max_increase": float(np.max(diffs)),
                "stagnation_step": k0,
                "post_stagnation_max_over_entry": float(
                    np.max(values[k0:]) / values[k0]
                ),
                "final_value": float(values[-1]),
            }
            log(
                f"lam=0.25 N={horizon} {label}: max dV {entry[label]['max_increase']:.2e} "
                f"stagnation at {k0} ({time.monotonic() - t0:.0f}s)"
            )
        out[f"n{horizon}"] = entry
    return out


def cstr_section() -> dict:
    assets = benchmarks.fit_from_manifest("cstr_fit.toml")
    t0 = time.monotonic()
    traj, values, _ = benchmarks.closed_loop_from_manifest(
        "cstr_mpc.toml", model=assets.surrogate
    )
    norms = traj.norms
    stats = tail_stats(norms, 60)
    log(f"cstr: tail60 mean {stats['mean']:.3e} ({time.monotonic() - t0:.0f}s)")
    return {
        "manifest": "cstr_mpc.toml",
        "steps": len(traj),
        "entry_step_r10": benchmarks.first_entry_step(norms, 0.1),
        "tail60": stats,
        "final_norm": float(norms[-1]),
        "min_norm": float(np.min(norms)),
    }


def main() -> int:
    t0 = time.monotonic()
    log("fitting van der Pol d=10000 estimate")
    assets = benchmarks.fit_from_manifest("vdp_fit.toml")
    payload = {
        "_note": (
            "Frozen benchmark outputs; regenerate with scripts/regen_expected.py "
            "and commit the diff"
        ),
        "open_loop": open_loop_section(),
        "proportional": proportional_section(),
        "practical_stability": practical_stability_section(assets),
        "nominal_decay": nominal_decay_section(),
        "value_traces": value_trace_section(assets),
        "cstr": cstr_section(),
    }
    TARGET.write_text(json.dumps(payload, indent=2) + "\n")
    log(f"wrote {TARGET} in {time.monotonic() - t0:.0f}s total")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
