"""Control-affine continuous-time systems and their sampled-data maps.

Systems are described by a drift field and one constant-in-``u`` input field
per control channel, so the right-hand side is ``g0(x) + sum_i u_i * g_i(x)``.
All fields are vectorized: they accept arrays shaped ``(..., n_x)`` and return
the same shape, which keeps data-matrix assembly cheap for large sample sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError
from .rkf45 import IntegratorConfig, integrate

VectorField = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with per-coordinate bounds."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionError("box bounds must be matching flat arrays")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box has min > max in some coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def violation(self, x) -> np.ndarray:
        """Per-coordinate overshoot distance, zero inside the box."""
        x = np.asarray(x, dtype=float)
        return np.maximum(0.0, np.maximum(self.lo - x, x - self.hi))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(count, self.dim))

    def corners(self) -> np.ndarray:
        grids = np.meshgrid(*zip(self.lo, self.hi), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def tightened(self, eps: float) -> "Box":
        """Shrink every face by ``eps`` (erosion by a Euclidean ball)."""
        if eps < 0:
            raise ValueError("tightening margin must be nonnegative")
        lo, hi = self.lo + eps, self.hi - eps
        if np.any(lo > hi):
            raise ValueError(f"tightening by {eps} empties the box")
        return Box(lo, hi)


@dataclass(frozen=True)
class ControlAffineSystem:
    """Continuous-time dynamics ``dx/dt = drift(x) + sum_i u_i inputs[i](x)``."""

    name: str
    n_x: int
    n_c: int
    drift: VectorField
    inputs: tuple[VectorField, ...] = ()

    def __post_init__(self):
        if self.n_x < 1 or self.n_c < 0:
            raise DimensionError("need n_x >= 1 and n_c >= 0")
        if len(self.inputs) != self.n_c:
            raise DimensionError("one input field per control channel required")

    def field(self, x: np.ndarray, u) -> np.ndarray:
        """Right-hand side at states ``x`` (shape ``(..., n_x)``) under constant ``u``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_x:
            raise DimensionError(f"state has {x.shape[-1]} entries, expected {self.n_x}")
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.size != self.n_c:
            raise DimensionError(f"control has {u.size} entries, expected {self.n_c}")
        out = np.asarray(self.drift(x), dtype=float)
        for ui, gi in zip(u, self.inputs):
            if ui != 0.0:
                out = out + ui * np.asarray(gi(x), dtype=float)
        return out


@dataclass(frozen=True)
class SampledDataMap:
    """Exact discrete-time map of a system under zero-order hold.

    ``step(x, u)`` integrates the frozen-input vector field over one sampling
    period with the adaptive integrator, so it plays the role of the true
    sampled plant everywhere a prediction model is expected.
    """

    system: ControlAffineSystem
    dt: float
    config: IntegratorConfig = field(default_factory=IntegratorConfig)
    is_surrogate = False

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("sampling period must be positive")
        if self.config.initial_step is None:
            # Trying the full period first saves the startup heuristic; a too
            # large trial is simply rejected and halved by the controller.
            object.__setattr__(self, "config", replace(self.config, initial_step=self.dt))

    @property
    def n_x(self) -> int:
        return self.system.n_x

    @property
    def n_c(self) -> int:
        return self.system.n_c

    def step(self, x: np.ndarray, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float)).copy()
        frozen = lambda z: self.system.field(z, u)  # noqa: E731
        return integrate(frozen, np.asarray(x, dtype=float), self.dt, self.config)

    def step_many(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """One sampling period for a batch of states with per-row controls.

        The whole batch is integrated as one stacked system sharing the step
        sequence, so differences between nearby rows are far more accurate
        than differences between separate adaptive runs; finite-difference
        callers rely on that cancellation.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        count, n_x = x.shape
        if len(u) != count:
            raise DimensionError("need one control row per state row")
        system = self.system

        def field(flat):
            xs = flat.reshape(count, n_x)
            out = np.asarray(system.drift(xs), dtype=float)
            for i, gi in enumerate(system.inputs):
                out = out + u[:, i : i + 1] * np.asarray(gi(xs), dtype=float)
            return out.ravel()

        return integrate(field, x.ravel(), self.dt, self.config).reshape(count, n_x)


@dataclass(frozen=True)
class Trajectory:
    """Sampled trajectory: ``K+1`` states, ``K`` controls, optional stage costs."""

    states: np.ndarray
    controls: np.ndarray
    dt: float
    costs: np.ndarray | None = None
    diagnostic: str | None = None

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        controls = np.asarray(self.controls, dtype=float)
        if controls.ndim == 1:
            # a flat sequence is one control channel; empty means no steps
            controls = controls.reshape(len(controls), 1 if controls.size else 0)
        if len(states) != len(controls) + 1:
            raise DimensionError("need exactly one more state than controls")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)
        if self.costs is not None:
            costs = np.asarray(self.costs, dtype=float)
            if costs.shape != (len(controls),):
                raise DimensionError("need one stage cost per applied control")
            object.__setattr__(self, "costs", costs)

    def __len__(self) -> int:
        return len(self.controls)

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)


def simulate(model, x0, controls) -> Trajectory:
    """Roll a prediction model forward under a fixed control sequence."""
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        if controls.size:
            controls = controls.reshape(len(controls), 1)
        else:
            controls = np.zeros((0, model.n_c))
    x = np.asarray(x0, dtype=float)
    states = [x]
    for u in controls:
        x = model.step(x, u)
        states.append(x)
    return Trajectory(np.array(states), controls, dt=model.dt)


def write_trajectory_csv(traj: Trajectory, path, header_comment: str | None = None):
    """Write ``step,t,x_1..x_nx,u_1..u_nc`` rows; the final row has no control."""
    n_x = traj.states.shape[1]
    n_c = traj.controls.shape[1]
    cols = ["step", "t"]
    cols += [f"x_{i + 1}" for i in range(n_x)]
    cols += [f"u_{i + 1}" for i in range(n_c)]
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    lines.append(",".join(cols))
    for k, x in enumerate(traj.states):
        row = [str(k), repr(k * traj.dt)]
        row += [repr(float(v)) for v in x]
        if k < len(traj.controls):
            row += [repr(float(v)) for v in traj.controls[k]]
        else:
            row += [""] * n_c
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# --- benchmark catalog ------------------------------------------------------


def van_der_pol(mu: float = 0.1) -> ControlAffineSystem:
    """Controlled Van der Pol oscillator with the force entering the velocity."""

    def drift(x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, mu * (1.0 - x1**2) * x2 - x1], axis=-1)

    def push(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 1] = 1.0
        return out

    return ControlAffineSystem("van_der_pol", 2, 1, drift, (push,))


def linear_system(a, b=None) -> ControlAffineSystem:
    """``dx/dt = A x + B u`` with constant input directions."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionError("state matrix must be square")
    if b is None:
        b = np.zeros((n, 0))
    b = np.asarray(b, dtype=float).reshape(n, -1)

    def drift(x):
        return np.asarray(x, dtype=float) @ a.T

    def column(i):
        def direction(x):
            x = np.asarray(x, dtype=float)
            out = np.zeros_like(x)
            out[...] = b[:, i]
            return out

        return direction

    inputs = tuple(column(i) for i in range(b.shape[1]))
    return ControlAffineSystem("linear", n, b.shape[1], drift, inputs)


PolyTerm = tuple[float, Sequence[int]]


def _poly_component(terms: Sequence[PolyTerm], n_x: int):
    cleaned = [(float(c), tuple(int(e) for e in ex)) for c, ex in terms]
    for _, ex in cleaned:
        if len(ex) != n_x or any(e < 0 for e in ex):
            raise DimensionError("polynomial exponents must be nonnegative, length n_x")

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for c, ex in cleaned:
            term = np.full(x.shape[:-1], c)
            for j, e in enumerate(ex):
                if e:
                    term = term * x[..., j] ** e
            out = out + term
        return out

    return evaluate


def polynomial_system(
    n_x: int, drift_terms: Sequence[Sequence[PolyTerm]],
    input_terms: Sequence[Sequence[Sequence[PolyTerm]]] = (),
    name: str = "polynomial",
) -> ControlAffineSystem:
    """Build a system whose fields are sparse polynomials given as
    ``(coefficient, exponent-vector)`` term lists, one list per component."""
    if len(drift_terms) != n_x:
        raise DimensionError("drift needs one term list per state component")

    def stack_field(component_terms):
        comps = [_poly_component(t, n_x) for t in component_terms]

        def evaluate(x):
            x = np.asarray(x, dtype=float)
            return np.stack([c(x) for c in comps], axis=-1)

        return evaluate

    drift = stack_field(drift_terms)
    inputs = tuple(stack_field(t) for t in input_terms)
    return ControlAffineSystem(name, n_x, len(inputs), drift, inputs)


@dataclass(frozen=True)
class CstrParams:
    """Physical constants for the exothermic CSTR benchmark.

    All values are caller-supplied; there are deliberately no defaults because
    published parameter sets for this reactor differ. ``steady_state`` is the
    operating point the model is shifted around, with zero steady heat input.
    """

    flow: float                 # F, volumetric feed rate
    volume: float               # V_r, reactor volume
    rate_constant: float        # k0, Arrhenius prefactor
    activation_energy: float    # E
    gas_constant: float         # R
    inlet_concentration: float  # C_A0
    inlet_temperature: float    # T_A0
    enthalpy: float             # dH, negative for exothermic reaction
    density: float              # rho
    heat_capacity: float        # C_p
    steady_state: tuple[float, float]  # (concentration, temperature) shift point


def cstr_shifted(p: CstrParams) -> ControlAffineSystem:
    """Second-order CSTR in coordinates shifted so the steady state sits at 0.

    The heat input is the single control channel and enters linearly through
    ``1 / (rho * C_p * V_r)``; the reaction rate is second order in the
    concentration with Arrhenius temperature dependence.
    """
    q = p.flow / p.volume
    heat_gain = 1.0 / (p.density * p.heat_capacity * p.volume)
    heat_release = -p.enthalpy / (p.density * p.heat_capacity)
    c_s, t_s = p.steady_state
    ea = p.activation_energy / p.gas_constant

    def drift(x):
        x = np.asarray(x, dtype=float)
        conc = x[..., 0] + c_s
        temp = x[..., 1] + t_s
        rate = p.rate_constant * np.exp(-ea / temp) * conc * conc
        d_conc = q * (p.inlet_concentration - conc) - rate
        d_temp = q * (p.inlet_temperature - temp) + heat_release * rate
        return np.stack([d_conc, d_temp], axis=-1)

    def heat(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 1] = heat_gain
        return out

    return ControlAffineSystem("cstr", 2, 1, drift, (heat,))


def validate_system(
    system: ControlAffineSystem,
    state_box: Box,
    control_box: Box | None = None,
    equilibrium_tol: float = 1e-9,
    seed: int = 0,
) -> list[str]:
    """Return a list of problems: origin drift residual and finiteness spot checks."""
    problems = []
    origin = np.zeros(system.n_x)
    residual = float(np.linalg.norm(system.field(origin, np.zeros(system.n_c))))
    if residual > equilibrium_tol:
        problems.append(f"drift at origin has norm {residual:.3e}")
    rng = np.random.default_rng(seed)
    probes = np.vstack([state_box.corners(), state_box.sample(rng, 64)])
    u_probe = np.zeros(system.n_c)
    if control_box is not None and system.n_c:
        u_probe = control_box.hi
    for tag, u in (("zero", np.zeros(system.n_c)), ("max", u_probe)):
        values = system.field(probes, u)
        if not np.all(np.isfinite(values)):
            problems.append(f"field non-finite on state box under {tag} control")
    return problems
