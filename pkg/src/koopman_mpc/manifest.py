"""Experiment manifests: TOML files that fully determine a run.

A manifest carries every knob and every seed; nothing is drawn from implicit
entropy, so any command driven by the same manifest bytes reproduces its
outputs. ``TOOLKIT_SEED_OVERRIDE`` replaces all seeds at load time and the
override is recorded so run records stay honest.

Section overview (``schema_version = 1``):

* ``[experiment]``: id, master seed, optional output dir.
* ``[system]``: kind (``van_der_pol``, ``linear``, ``cstr``), state and
  control boxes, sampling period, kind-specific parameters. CSTR physical
  constants are mandatory subkeys; there are no default physics.
* ``[integrator]``: adaptive-integrator tolerances.
* ``[dictionary]``: ``monomial`` with a degree, or ``custom`` with
  observable descriptor strings.
* ``[sampling]``, ``[fit]``, ``[openloop]``, ``[proportional]``, ``[mpc]``
  (with ``[mpc.solver]``), ``[alpha]``: per-command parameters.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from .dictionary import (
    Dictionary,
    Monomial,
    Observable,
    ReciprocalExp,
    custom_dictionary,
    monomial_dictionary,
)
from .dynamics import (
    Box,
    ControlAffineSystem,
    CstrParams,
    cstr_shifted,
    linear_system,
    van_der_pol,
)
from .errors import ManifestError
from .mpc import SolverConfig, StageCost
from .rkf45 import IntegratorConfig

SCHEMA_VERSION = 1
SEED_ENV = "TOOLKIT_SEED_OVERRIDE"

_CSTR_FIELDS = (
    "flow",
    "volume",
    "rate_constant",
    "activation_energy",
    "gas_constant",
    "inlet_concentration",
    "inlet_temperature",
    "enthalpy",
    "density",
    "heat_capacity",
    "steady_state",
)


@dataclass(frozen=True)
class Manifest:
    """Parsed manifest plus the identity of its bytes."""

    path: Path
    data: dict
    sha256: str
    seed_override: int | None

    @property
    def experiment_id(self) -> str:
        return self.data["experiment"]["id"]

    @property
    def master_seed(self) -> int:
        if self.seed_override is not None:
            return self.seed_override
        return int(self.data["experiment"]["seed"])

    def section(self, name: str) -> dict:
        try:
            return self.data[name]
        except KeyError:
            raise ManifestError(f"manifest has no [{name}] section") from None

    def optional(self, name: str) -> dict | None:
        return self.data.get(name)

    def seed_for(self, section: dict) -> int:
        """Section-local seed, unless the environment override is active."""
        if self.seed_override is not None:
            return self.seed_override
        return int(section.get("seed", self.data["experiment"]["seed"]))

    def output_dir(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        configured = self.data.get("output", {}).get("dir")
        if configured is not None:
            return (self.path.parent / configured).resolve()
        return self.path.parent

    def resolve(self, relative) -> Path:
        return (self.path.parent / relative).resolve()


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise ManifestError(f"cannot read manifest: {err}") from err
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as err:
        raise ManifestError(f"{path}: not valid TOML: {err}") from err
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(
            f"{path}: schema_version {version!r} unsupported (expected {SCHEMA_VERSION})"
        )
    override = os.environ.get(SEED_ENV)
    seed_override = None
    if override is not None and override != "":
        try:
            seed_override = int(override)
        except ValueError:
            raise ManifestError(f"{SEED_ENV} must be an integer, got {override!r}") from None
    manifest = Manifest(
        path=path,
        data=data,
        sha256=hashlib.sha256(raw).hexdigest(),
        seed_override=seed_override,
    )
    problems = validate_manifest(manifest)
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems))
    return manifest


def validate_manifest(manifest: Manifest) -> list[str]:
    """Structural checks that apply to every command."""
    problems = []
    data = manifest.data
    exp = data.get("experiment")
    if not isinstance(exp, dict):
        return ["missing [experiment] section"]
    if not isinstance(exp.get("id"), str) or not exp.get("id"):
        problems.append("[experiment] needs a nonempty string id")
    if not isinstance(exp.get("seed"), int) or exp.get("seed", -1) < 0:
        problems.append("[experiment] needs a nonnegative integer seed")
    system = data.get("system")
    if not isinstance(system, dict):
        problems.append("missing [system] section")
        return problems
    kind = system.get("kind")
    if kind not in ("van_der_pol", "linear", "cstr"):
        problems.append(f"unknown system kind {kind!r}")
    for box_key in ("state_box", "control_box"):
        box = system.get(box_key)
        if not (isinstance(box, dict) and "lo" in box and "hi" in box):
            problems.append(f"[system] {box_key} needs lo and hi arrays")
    if not isinstance(system.get("dt"), (int, float)) or system.get("dt", 0) <= 0:
        problems.append("[system] dt must be a positive number")
    if kind == "cstr":
        params = system.get("cstr")
        if not isinstance(params, dict):
            problems.append("[system.cstr] physical parameters are mandatory")
        else:
            missing = [k for k in _CSTR_FIELDS if k not in params]
            if missing:
                problems.append(f"[system.cstr] missing fields: {', '.join(missing)}")
    return problems


def _box(spec: dict, what: str) -> Box:
    try:
        return Box(np.asarray(spec["lo"], dtype=float), np.asarray(spec["hi"], dtype=float))
    except (KeyError, ValueError, TypeError) as err:
        raise ManifestError(f"bad {what}: {err}") from err


@dataclass(frozen=True)
class SystemBundle:
    """Everything [system] + [integrator] pins down."""

    system: ControlAffineSystem
    state_box: Box
    control_box: Box
    dt: float
    integrator: IntegratorConfig


def build_system(manifest: Manifest) -> SystemBundle:
    section = manifest.section("system")
    kind = section["kind"]
    if kind == "van_der_pol":
        system = van_der_pol(mu=float(section.get("mu", 0.1)))
    elif kind == "linear":
        a = np.asarray(section["a"], dtype=float)
        b = section.get("b")
        system = linear_system(a, None if b is None else np.asarray(b, dtype=float))
    elif kind == "cstr":
        raw = section["cstr"]
        steady = tuple(float(v) for v in raw["steady_state"])
        if len(steady) != 2:
            raise ManifestError("[system.cstr] steady_state must have two entries")
        params = CstrParams(
            **{k: float(raw[k]) for k in _CSTR_FIELDS if k != "steady_state"},
            steady_state=steady,
        )
        system = cstr_shifted(params)
    else:
        raise ManifestError(f"unknown system kind {kind!r}")
    state_box = _box(section["state_box"], "state box")
    control_box = _box(section["control_box"], "control box")
    if state_box.dim != system.n_x or control_box.dim != system.n_c:
        raise ManifestError("box dimensions do not match the system")
    integ = manifest.optional("integrator") or {}
    config = IntegratorConfig(
        rel_tol=float(integ.get("rel_tol", 1e-8)),
        abs_tol=float(integ.get("abs_tol", 1e-10)),
    )
    return SystemBundle(system, state_box, control_box, float(section["dt"]), config)


def parse_observable(descriptor: str) -> Observable:
    """Inverse of ``Observable.descriptor`` for the shipped observable kinds."""
    head, _, rest = descriptor.partition(":")
    try:
        if head == "mono":
            return Monomial(tuple(int(e) for e in rest.split(",")))
        if head == "rexp":
            index, _, shift = rest.partition(":")
            return ReciprocalExp(int(index), float(shift) if shift else 0.0)
    except (ValueError, TypeError) as err:
        raise ManifestError(f"bad observable descriptor {descriptor!r}: {err}") from err
    raise ManifestError(f"unknown observable kind in descriptor {descriptor!r}")


def build_dictionary(manifest: Manifest, bundle: SystemBundle) -> Dictionary:
    section = manifest.section("dictionary")
    kind = section.get("kind")
    n_x = bundle.system.n_x
    if kind == "monomial":
        return monomial_dictionary(n_x, int(section["max_degree"]))
    if kind == "custom":
        descriptors = section.get("observables")
        if not descriptors:
            raise ManifestError("[dictionary] custom kind needs an observables list")
        observables = [parse_observable(d) for d in descriptors]
        return custom_dictionary(
            n_x,
            observables,
            state_box=bundle.state_box,
            allow_singular=bool(section.get("allow_singular", False)),
        )
    raise ManifestError(f"unknown dictionary kind {kind!r}")


def _weight_matrix(raw, size: int, what: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.ndim == 1:
        arr = np.diag(arr)
    if arr.shape != (size, size):
        raise ManifestError(f"{what} must be {size}x{size} or a diagonal of length {size}")
    return arr


def build_stage_cost(section: dict, n_x: int, n_c: int) -> StageCost:
    try:
        q = _weight_matrix(section["state_weight"], n_x, "state_weight")
        r = _weight_matrix(section["control_weight"], n_c, "control_weight")
    except KeyError as err:
        raise ManifestError(f"[mpc] missing {err.args[0]}") from None
    return StageCost(q, r)


def build_solver_config(section: dict | None) -> SolverConfig:
    if not section:
        return SolverConfig()
    kwargs = {}
    for key in ("max_iterations", "restarts"):
        if key in section:
            kwargs[key] = int(section[key])
    for key in ("gradient_tol", "fd_step", "constraint_tol"):
        if key in section:
            kwargs[key] = float(section[key])
    if "penalty_weights" in section:
        kwargs["penalty_weights"] = tuple(float(w) for w in section["penalty_weights"])
    return SolverConfig(**kwargs)
