"""Manifest-driven command line for the fitting, study, and control pipelines.

``toolkit <command> --manifest <path> [--jobs N] [--out DIR]`` with commands

* ``fit``: regress the generators and write a portable container.
* ``openloop``: open-loop prediction-error study over a sample-count grid,
  optionally followed by the proportional-bound ratio study.
* ``mpc``: closed-loop run with the nominal or surrogate model, trajectory
  CSV plus a practical-stability verdict.
* ``alpha``: growth bounds and the horizon suboptimality index.
* ``validate``: semantic checks on the manifest's system and dictionary.

Every output carries a header comment with the manifest hash and toolkit
version, and every command writes a run record with per-output checksums.
Exit codes: 0 on success, 1 on runtime failure, 2 on manifest or usage
errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .container import load_estimate, save_estimate
from .dynamics import Box, SampledDataMap, validate_system
from .edmd import BilinearSurrogate, fit, sample_states
from .errbound import (
    build_test_points,
    c_tilde_constant,
    lipschitz_estimate,
    open_loop_error_study,
    operator_error,
    proportional_error_study,
    reference_compression,
)
from .errors import ManifestError, ToolkitError
from .manifest import (
    Manifest,
    SystemBundle,
    build_dictionary,
    build_solver_config,
    build_stage_cost,
    build_system,
    load_manifest,
)
from .mpc import (
    MpcProblem,
    closed_loop_run,
    estimate_growth_bounds,
    practical_stability_check,
    suboptimality_index,
)

log = logging.getLogger(__name__)

_DEFAULT_CONTAINER = "generator.genest"


def _cell(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, comment: str, header, rows) -> None:
    lines = [f"# {comment}", ",".join(header)]
    lines.extend(",".join(_cell(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _comment(manifest: Manifest) -> str:
    return f"manifest_sha256={manifest.sha256} toolkit_version={__version__}"


def _control_grid(control_box: Box) -> list[np.ndarray]:
    """Deterministic control grid: box corners plus the origin."""
    return [np.zeros(control_box.dim), *control_box.corners()]


def _load_surrogate(manifest: Manifest, bundle: SystemBundle, spec: str) -> BilinearSurrogate:
    _, _, rel = spec.partition(":")
    path = manifest.resolve(rel or _DEFAULT_CONTAINER)
    if not path.exists():
        raise ManifestError(f"surrogate container not found: {path}")
    estimate = load_estimate(path)
    dictionary = build_dictionary(manifest, bundle)
    if estimate.dict_id != dictionary.dict_id:
        raise ManifestError(
            f"container was fitted with dictionary {estimate.dict_id!r}, "
            f"manifest declares {dictionary.dict_id!r}"
        )
    return BilinearSurrogate(estimate, dictionary, bundle.dt)


def cmd_fit(manifest: Manifest, out_dir: Path, jobs: int) -> dict[str, Path]:
    bundle = build_system(manifest)
    dictionary = build_dictionary(manifest, bundle)
    sampling = manifest.section("sampling")
    count = int(sampling["d"])
    samples = sample_states(bundle.state_box, count, manifest.seed_for(sampling))
    options = manifest.optional("fit") or {}
    estimate = fit(
        dictionary,
        bundle.system,
        samples,
        consistency=bool(options.get("consistency", True)),
    )
    target = out_dir / options.get("container", _DEFAULT_CONTAINER)
    save_estimate(estimate, target)
    ranks = [info.rank for info in estimate.info]
    print(
        f"fit: d={count} M={estimate.size} n_c={estimate.n_c} "
        f"ranks={ranks} -> {target.name}"
    )
    return {"container": target}


def cmd_openloop(manifest: Manifest, out_dir: Path, jobs: int) -> dict[str, Path]:
    bundle = build_system(manifest)
    dictionary = build_dictionary(manifest, bundle)
    plant = SampledDataMap(bundle.system, bundle.dt, bundle.integrator)
    study = manifest.section("openloop")
    report = open_loop_error_study(
        plant,
        dictionary,
        bundle.state_box,
        bundle.control_box,
        d_grid=study["d_grid"],
        n_init=int(study["n_init"]),
        horizon=int(study["horizon"]),
        seed=manifest.seed_for(study),
        jobs=jobs,
    )
    outputs = {}
    target = out_dir / "openloop_error.csv"
    _write_csv(target, _comment(manifest), ("d", "k", "mean_err", "max_err"), report.rows())
    outputs["openloop_error"] = target
    for d, avg in zip(report.d_grid, report.time_averaged_mean):
        print(f"openloop: d={d} time-averaged mean error {avg:.6e}")

    prop = manifest.optional("proportional")
    if prop:
        outputs["proportional"] = _proportional_study(
            manifest, bundle, dictionary, plant, prop, out_dir
        )
    return outputs


def _proportional_study(manifest, bundle, dictionary, plant, section, out_dir: Path) -> Path:
    """Ratio study across sample counts with one shared denominator constant.

    The reference compression, the Lipschitz constant, and c-tilde are all
    computed once (c-tilde from the smallest, least accurate fit), so the
    per-d maxima are directly comparable.
    """
    seed = manifest.seed_for(section)
    d_grid = [int(d) for d in section["d_grid"]]
    mode = section.get("reference", "empirical")
    reference = reference_compression(
        dictionary,
        bundle.system,
        bundle.state_box,
        mode=mode,
        d_ref=int(section["d_ref"]) if "d_ref" in section else None,
        seed=seed,
    )
    u_grid = _control_grid(bundle.control_box)
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
    rows = []
    for d in d_grid:
        surrogate = BilinearSurrogate(estimates[d], dictionary, bundle.dt)
        result = proportional_error_study(
            plant, surrogate, states, controls, lipschitz, c_tilde
        )
        rows.append((d, result.max_ratio, result.mean_ratio, lipschitz, c_tilde))
        print(
            f"proportional: d={d} max ratio {result.max_ratio:.6e} "
            f"mean {result.mean_ratio:.6e}"
        )
    target = out_dir / "proportional.csv"
    _write_csv(
        target,
        _comment(manifest),
        ("d", "max_ratio", "mean_ratio", "L_psi", "c_tilde"),
        rows,
    )
    return target


def _build_problem(manifest: Manifest, bundle: SystemBundle, section: dict) -> MpcProblem:
    model_spec = section.get("model", "nominal")
    if model_spec == "nominal":
        model = SampledDataMap(bundle.system, bundle.dt, bundle.integrator)
    elif model_spec == "surrogate" or model_spec.startswith("surrogate:"):
        model = _load_surrogate(manifest, bundle, model_spec)
    else:
        raise ManifestError(f"unknown model selection {model_spec!r}")
    cost = build_stage_cost(section, bundle.system.n_x, bundle.system.n_c)
    state_box = bundle.state_box if section.get("state_constrained", True) else None
    return MpcProblem(
        model=model,
        cost=cost,
        horizon=int(section["horizon"]),
        control_box=bundle.control_box,
        state_box=state_box,
        tightening=float(section.get("tightening", 0.0)),
        seed=manifest.seed_for(section),
    )


def cmd_mpc(manifest: Manifest, out_dir: Path, jobs: int) -> dict[str, Path]:
    bundle = build_system(manifest)
    section = manifest.section("mpc")
    prob = _build_problem(manifest, bundle, section)
    solver = build_solver_config(section.get("solver"))
    plant = SampledDataMap(bundle.system, bundle.dt, bundle.integrator)
    x0 = np.asarray(section["x0"], dtype=float)
    steps = int(section["steps"])
    traj, values = closed_loop_run(plant, prob, x0, steps, config=solver)

    n_x = traj.states.shape[1]
    n_c = traj.controls.shape[1] if len(traj) else bundle.system.n_c
    header = ["n", "norm_x"]
    header += [f"x_{i + 1}" for i in range(n_x)]
    header += [f"u_{i + 1}" for i in range(n_c)]
    header += ["V_N", "stage_cost"]
    norms = traj.norms
    rows = []
    for n in range(len(traj)):
        row = [n, norms[n], *traj.states[n], *traj.controls[n], values[n], traj.costs[n]]
        rows.append(row)
    rows.append([len(traj), norms[-1], *traj.states[-1]] + [""] * (n_c + 2))
    target = out_dir / "closedloop.csv"
    _write_csv(target, _comment(manifest), header, rows)

    radius = float(section.get("radius", 0.05))
    verdict = practical_stability_check(
        traj, radius, settle_fraction=float(section.get("settle_fraction", 1.0))
    )
    payload = {
        "model": section.get("model", "nominal"),
        "horizon": prob.horizon,
        "steps_requested": steps,
        "steps_completed": len(traj),
        "diagnostic": traj.diagnostic,
        "radius": verdict.radius,
        "entered": verdict.entered,
        "entry_step": verdict.entry_step,
        "post_entry_max_norm": verdict.post_entry_max_norm,
        "settle_fraction": verdict.settle_fraction,
        "holds": verdict.holds,
        "final_norm": float(norms[-1]),
        "min_norm": float(np.min(norms)),
    }
    verdict_path = out_dir / "verdict.json"
    _write_json(verdict_path, payload)
    print(
        f"mpc: {len(traj)}/{steps} steps, final |x|={norms[-1]:.3e}, "
        f"ball r={radius}: {'holds' if verdict.holds else 'fails'}"
    )
    return {"closedloop": target, "verdict": verdict_path}


def cmd_alpha(manifest: Manifest, out_dir: Path, jobs: int) -> dict[str, Path]:
    bundle = build_system(manifest)
    section = manifest.section("alpha")
    horizons = [int(n) for n in section["horizons"]]
    if not horizons or min(horizons) < 2:
        raise ManifestError("[alpha] horizons must all be >= 2")
    omega = float(section.get("omega", 1.0))

    if "growth_bounds" in section:
        bounds = np.asarray(section["growth_bounds"], dtype=float)
        summary = {"mode": "direct", "k_max": bounds.size}
        b_of = lambda k: float(bounds[k - 1])  # noqa: E731
        alphas = {n: suboptimality_index(bounds, n, omega=omega) for n in horizons}
    else:
        mpc_section = manifest.section("mpc")
        prob = _build_problem(manifest, bundle, mpc_section)
        solver = build_solver_config(mpc_section.get("solver"))
        seed = manifest.seed_for(section)
        sub = section.get("sub_box")
        domain = _sub_box(bundle.state_box, sub)
        rng = np.random.default_rng(seed)
        samples = domain.sample(rng, int(section["n_samples"]))
        exclude = float(section.get("exclude_radius", 1e-3))
        samples = samples[np.linalg.norm(samples, axis=1) >= exclude]
        if len(samples) == 0:
            raise ManifestError("[alpha] every sample fell inside the excluded ball")
        k_max = int(section.get("k_max", max(horizons)))
        bounds = estimate_growth_bounds(prob, samples, k_max, config=solver)
        summary = {
            "mode": "estimated",
            "k_max": bounds.k_max,
            "samples_used": bounds.samples_used,
            "samples_skipped": bounds.samples_skipped,
        }
        b_of = bounds.bound
        alphas = {n: suboptimality_index(bounds, n, omega=omega) for n in horizons}

    rows = [(n, alphas[n], b_of(n)) for n in horizons]
    target = out_dir / "alpha.csv"
    _write_csv(target, _comment(manifest), ("N", "alpha", "B_N"), rows)
    for n in horizons:
        print(f"alpha: N={n} alpha={alphas[n]:.6f} B_N={b_of(n):.6f}")
    log.info("growth-bound summary: %s", summary)
    return {"alpha": target}


def _sub_box(state_box: Box, spec: dict | None) -> Box:
    if spec is None:
        return state_box
    box = Box(np.asarray(spec["lo"], dtype=float), np.asarray(spec["hi"], dtype=float))
    if box.dim != state_box.dim:
        raise ManifestError("[alpha] sub_box dimension mismatch")
    return box


def cmd_validate(manifest: Manifest, out_dir: Path, jobs: int) -> dict[str, Path]:
    problems: list[str] = []
    warnings: list[str] = []
    nonconforming: list[str] = []
    try:
        bundle = build_system(manifest)
    except (ManifestError, ToolkitError) as err:
        problems.append(f"system: {err}")
        bundle = None
    if bundle is not None:
        problems.extend(
            f"system: {p}"
            for p in validate_system(bundle.system, bundle.state_box, bundle.control_box)
        )
        for name, box in (("state", bundle.state_box), ("control", bundle.control_box)):
            if box.dim and not (np.all(box.lo < 0) and np.all(box.hi > 0)):
                warnings.append(f"origin is not interior to the {name} box")
        try:
            dictionary = build_dictionary(manifest, bundle)
            nonconforming = list(dictionary.nonconforming)
            if nonconforming:
                warnings.append(
                    "nonconforming observables (error bound not certified): "
                    + ", ".join(nonconforming)
                )
        except (ManifestError, ToolkitError) as err:
            problems.append(f"dictionary: {err}")
        mpc_section = manifest.optional("mpc")
        if mpc_section is not None:
            x0 = np.asarray(mpc_section.get("x0", ()), dtype=float)
            if x0.size and not bundle.state_box.contains(x0, tol=1e-9):
                problems.append("mpc: x0 lies outside the state box")
            model_spec = mpc_section.get("model", "nominal")
            if model_spec != "nominal":
                try:
                    _load_surrogate(manifest, bundle, model_spec)
                except (ManifestError, ToolkitError) as err:
                    problems.append(f"mpc: {err}")
    report = {
        "experiment_id": manifest.experiment_id,
        "manifest_sha256": manifest.sha256,
        "problems": problems,
        "warnings": warnings,
        "nonconforming_observables": nonconforming,
        "clean": not problems and not warnings,
    }
    target = out_dir / "validation.json"
    _write_json(target, report)
    for line in problems:
        print(f"problem: {line}")
    for line in warnings:
        print(f"warning: {line}")
    print(f"validate: {'clean' if report['clean'] else 'findings recorded'} -> {target.name}")
    return {"validation": target}


_COMMANDS = {
    "fit": cmd_fit,
    "openloop": cmd_openloop,
    "mpc": cmd_mpc,
    "alpha": cmd_alpha,
    "validate": cmd_validate,
}


def _write_record(command, manifest, out_dir: Path, outputs, elapsed) -> Path:
    record = {
        "command": command,
        "experiment_id": manifest.experiment_id,
        "manifest_sha256": manifest.sha256,
        "toolkit_version": __version__,
        "seed_override": manifest.seed_override,
        "wall_clock_seconds": elapsed,
        "outputs": {path.name: _sha256_file(path) for path in outputs.values()},
    }
    target = out_dir / f"{command}_record.json"
    _write_json(target, record)
    return target


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="toolkit",
        description="Generator-surrogate fitting, error studies, and MPC runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--manifest", required=True, help="path to a TOML manifest")
        cmd.add_argument("--jobs", type=int, default=1, help="worker threads for studies")
        cmd.add_argument("--out", default=None, help="output directory override")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")

    try:
        manifest = load_manifest(args.manifest)
        out_dir = manifest.output_dir(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
    except ManifestError as err:
        print(f"manifest error: {err}", file=sys.stderr)
        return 2
    start = time.monotonic()
    try:
        outputs = _COMMANDS[args.command](manifest, out_dir, max(1, args.jobs))
    except ManifestError as err:
        print(f"manifest error: {err}", file=sys.stderr)
        return 2
    except ToolkitError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    record = _write_record(args.command, manifest, out_dir, outputs, time.monotonic() - start)
    print(f"record: {record}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
