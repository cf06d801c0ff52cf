"""Receding-horizon control on top of interchangeable one-step models.

The optimal control problem is solved by single shooting: the decision
vector stacks the horizon's control values, box constraints on the controls
are handled by a projected quasi-Newton method, and state-box constraints
enter through a quadratic penalty with an increasing weight schedule.
Gradients are assembled by the adjoint recursion from per-stage Jacobians,
which come analytically from models that expose ``step_jacobian`` and from
batched forward differences otherwise.

Cost controllability is probed empirically: growth bounds ``B_k`` are the
worst observed ratios of the ``k``-step value function to the unavoidable
stage cost, and they feed the closed-form suboptimality index ``alpha_N``
used to certify relaxed dynamic-programming decrease.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .dynamics import Box, Trajectory
from .errors import (
    DegenerateIndexError,
    DimensionError,
    InfeasibleError,
    IntegrationError,
    MatrixExponentialError,
    ObservableDomainError,
)

log = logging.getLogger(__name__)

_CONSTRAINT_TOL = 1e-9
_ROLLOUT_ABORT = (
    ObservableDomainError,
    MatrixExponentialError,
    IntegrationError,
    FloatingPointError,
)


@dataclass(frozen=True)
class StageCost:
    """Quadratic stage cost ``x' Q x + u' R u``."""

    state_weight: np.ndarray
    control_weight: np.ndarray

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.state_weight, dtype=float))
        r = np.atleast_2d(np.asarray(self.control_weight, dtype=float))
        for name, w in (("state", q), ("control", r)):
            if w.shape[0] != w.shape[1]:
                raise DimensionError(f"{name} weight must be square")
            if not np.allclose(w, w.T, atol=1e-12):
                raise ValueError(f"{name} weight must be symmetric")
        for name, w in (("state", q), ("control", r)):
            if w.size and np.any(np.linalg.eigvalsh(w) <= 0):
                raise ValueError(f"{name} weight must be positive definite")
        object.__setattr__(self, "state_weight", q)
        object.__setattr__(self, "control_weight", r)

    def __call__(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return float(x @ self.state_weight @ x + u @ self.control_weight @ u)

    def state_term(self, x) -> float:
        """Control-free floor of the stage cost, ``min_u`` attained at zero."""
        x = np.asarray(x, dtype=float)
        return float(x @ self.state_weight @ x)


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for the shooting solver."""

    max_iterations: int = 400
    gradient_tol: float = 1e-12
    fd_step: float = 1e-8
    penalty_weights: tuple[float, ...] = (1e4, 1e6, 1e8)
    restarts: int = 1
    constraint_tol: float = _CONSTRAINT_TOL

    def __post_init__(self):
        if self.max_iterations < 1 or self.restarts < 0:
            raise ValueError("bad iteration/restart budget")
        if self.gradient_tol <= 0 or self.fd_step <= 0 or self.constraint_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not self.penalty_weights or any(w <= 0 for w in self.penalty_weights):
            raise ValueError("penalty weights must be positive")


@dataclass(frozen=True)
class MpcProblem:
    """Finite-horizon OCP data bound to a prediction model.

    The state box is tightened by ``tightening`` when the model is a
    surrogate, which is the constraint-robustness margin practical stability
    arguments ask for; the plant itself is never tightened.
    """

    model: object
    cost: StageCost
    horizon: int
    control_box: Box
    state_box: Box | None = None
    tightening: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.tightening < 0:
            raise ValueError("tightening margin must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.control_box.dim != getattr(self.model, "n_c", self.control_box.dim):
            raise DimensionError("control box does not match the model")

    @property
    def applicable_state_box(self) -> Box | None:
        if self.state_box is None:
            return None
        if getattr(self.model, "is_surrogate", False) and self.tightening > 0:
            return self.state_box.tightened(self.tightening)
        return self.state_box


def rollout_cost(model, cost: StageCost, x0, controls) -> tuple[float, np.ndarray]:
    """Accumulated stage cost and visited states under a control sequence.

    If the model exits its domain mid-rollout the partial cost and the states
    reached so far are returned; callers detect truncation by the state count.
    """
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        controls = controls.reshape(len(controls), -1)
    x = np.asarray(x0, dtype=float)
    states = [x]
    total = 0.0
    for u in controls:
        total += cost(x, u)
        try:
            x = model.step(x, u)
        except _ROLLOUT_ABORT:
            break
        if not np.all(np.isfinite(x)):
            break
        states.append(x)
    return total, np.array(states)


def _penalty_gradient(box: Box | None, x) -> np.ndarray:
    if box is None:
        return np.zeros_like(x)
    return 2.0 * (np.maximum(0.0, x - box.hi) - np.maximum(0.0, box.lo - x))


def _stage_jacobians(model, states, controls, fd_step):
    """Per-stage step Jacobians ``(A_k, B_k)`` along a rollout.

    Models that expose ``step_jacobian`` supply them exactly. Otherwise they
    come from forward differences of the one-step map; when the model offers
    a batched ``step_many``, base and perturbed rows go through one shared
    integration so the differences do not inherit independent adaptive-step
    noise.
    """
    n_steps, n_x = states.shape
    n_c = controls.shape[1]
    exact = getattr(model, "step_jacobian", None)
    if exact is not None:
        a = np.empty((n_steps, n_x, n_x))
        b = np.empty((n_steps, n_x, n_c))
        for k in range(n_steps):
            _, a[k], b[k] = exact(states[k], controls[k])
        return a, b

    per = 1 + n_x + n_c
    xs = np.repeat(states, per, axis=0)
    us = np.repeat(controls, per, axis=0)
    eps_x = fd_step * np.maximum(1.0, np.abs(states))
    eps_u = fd_step * np.maximum(1.0, np.abs(controls))
    for k in range(n_steps):
        base = k * per
        for j in range(n_x):
            xs[base + 1 + j, j] += eps_x[k, j]
        for i in range(n_c):
            us[base + 1 + n_x + i, i] += eps_u[k, i]
    many = getattr(model, "step_many", None)
    if many is not None:
        outs = many(xs, us)
    else:
        outs = np.array([model.step(x, u) for x, u in zip(xs, us)])
    a = np.empty((n_steps, n_x, n_x))
    b = np.empty((n_steps, n_x, n_c))
    for k in range(n_steps):
        base_row = outs[k * per]
        for j in range(n_x):
            a[k, :, j] = (outs[k * per + 1 + j] - base_row) / eps_x[k, j]
        for i in range(n_c):
            b[k, :, i] = (outs[k * per + 1 + n_x + i] - base_row) / eps_u[k, i]
    return a, b


class _Shooting:
    """Penalized single-shooting objective with adjoint-assembled gradients."""

    def __init__(self, model, cost, x0, n_steps, n_c, state_box, fd_step):
        self.model = model
        self.cost = cost
        self.x0 = np.asarray(x0, dtype=float)
        self.n_steps = n_steps
        self.n_c = n_c
        self.box = state_box
        self.fd_step = fd_step
        self.weight = 0.0
        self.evaluations = 0

    def _penalty(self, x) -> float:
        if self.box is None:
            return 0.0
        v = self.box.violation(x)
        return float(v @ v)

    def _forward(self, controls, collect_jacobians=False):
        """Rollout with accumulated stage cost and state-box penalty.

        With ``collect_jacobians`` and a model exposing ``step_jacobian``,
        the per-stage Jacobians come out of the same pass as the states, so
        exact-derivative models pay for one decomposition per stage.
        """
        exact = getattr(self.model, "step_jacobian", None) if collect_jacobians else None
        x = self.x0
        run_cost = 0.0
        run_pen = 0.0
        states = [x]
        jacobians = []
        for k in range(self.n_steps):
            u = controls[k]
            run_cost += self.cost(x, u)
            try:
                if exact is not None:
                    x, a_k, b_k = exact(x, u)
                    jacobians.append((a_k, b_k))
                else:
                    x = self.model.step(x, u)
            except _ROLLOUT_ABORT:
                return None, k
            if not np.all(np.isfinite(x)):
                return None, k
            states.append(x)
            run_pen += self._penalty(x)
        result = (run_cost, run_pen, np.array(states))
        if exact is not None:
            a = np.array([j[0] for j in jacobians])
            b = np.array([j[1] for j in jacobians])
            return result + ((a, b),), self.n_steps
        return result, self.n_steps

    def evaluate(self, z):
        self.evaluations += 1
        controls = z.reshape(self.n_steps, self.n_c)
        result, reached = self._forward(controls)
        if result is None:
            return None, reached
        run_cost, run_pen, states = result
        data = {
            "controls": controls,
            "states": states,
            "raw_cost": run_cost,
            "penalty": run_pen,
            "objective": run_cost + self.weight * run_pen,
        }
        return data, reached

    def _abort_value(self, reached) -> float:
        # Crude barrier that still slopes toward longer feasible rollouts.
        return 1e18 * (1.0 + (self.n_steps - reached) / max(1, self.n_steps))

    def objective_and_gradient(self, z):
        self.evaluations += 1
        controls = z.reshape(self.n_steps, self.n_c)
        result, reached = self._forward(controls, collect_jacobians=True)
        if result is None:
            return self._abort_value(reached), np.zeros_like(z)
        run_cost, run_pen, states = result[:3]
        if len(result) == 4:
            a, b = result[3]
        else:
            try:
                a, b = _stage_jacobians(self.model, states[:-1], controls, self.fd_step)
            except _ROLLOUT_ABORT:
                return self._abort_value(self.n_steps), np.zeros_like(z)
        q2 = 2.0 * self.cost.state_weight
        r2 = 2.0 * self.cost.control_weight
        grad = np.empty((self.n_steps, self.n_c))
        costate = self.weight * _penalty_gradient(self.box, states[-1])
        for k in range(self.n_steps - 1, -1, -1):
            grad[k] = r2 @ controls[k] + b[k].T @ costate
            costate = q2 @ states[k] + a[k].T @ costate
            if k > 0:
                costate = costate + self.weight * _penalty_gradient(self.box, states[k])
        return run_cost + self.weight * run_pen, grad.ravel()

    def max_violation(self, states) -> float:
        if self.box is None:
            return 0.0
        if len(states) != self.n_steps + 1:
            return math.inf
        return float(max((np.max(self.box.violation(x)) for x in states[1:]), default=0.0))


@dataclass(frozen=True)
class OcpSolution:
    """Result of one finite-horizon solve."""

    controls: np.ndarray
    value: float
    feasible: bool
    states: np.ndarray
    diagnostics: dict


def _start_schedule(prob, n_steps, warm_start):
    lo = np.tile(prob.control_box.lo, n_steps)
    hi = np.tile(prob.control_box.hi, n_steps)
    starts = []
    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=float).reshape(-1)
        if warm.size != n_steps * prob.control_box.dim:
            raise DimensionError("warm start has the wrong length")
        starts.append(("warm", np.clip(warm, lo, hi)))
    starts.append(("zero", np.zeros(n_steps * prob.control_box.dim)))
    return starts, (lo, hi)


def solve_ocp(
    prob: MpcProblem,
    x0,
    warm_start=None,
    horizon: int | None = None,
    config: SolverConfig = SolverConfig(),
) -> OcpSolution:
    """Solve the finite-horizon OCP from ``x0`` under the problem's model.

    Deterministic start schedule: warm start when supplied, then the zero
    sequence, then ``config.restarts`` seeded random draws. The first start
    that yields a feasible control sequence wins; when none does, the
    empirical admissible set is treated as empty and an infeasibility error
    is raised. Non-convergence within the iteration budget is reported via
    ``diagnostics['converged']`` rather than by failing.
    """
    x0 = np.asarray(x0, dtype=float)
    n_steps = prob.horizon if horizon is None else int(horizon)
    if n_steps < 1:
        raise ValueError("horizon must be at least 1")
    n_c = prob.control_box.dim
    box = prob.applicable_state_box
    if box is not None and not box.contains(x0, tol=config.constraint_tol):
        raise InfeasibleError(f"initial state {x0} outside the applicable state box")

    starts, (lo, hi) = _start_schedule(prob, n_steps, warm_start)
    seed_words = np.frombuffer(x0.tobytes(), dtype=np.uint32)
    rng = np.random.default_rng([prob.seed, *seed_words.tolist()])
    for r in range(config.restarts):
        starts.append((f"random-{r}", rng.uniform(lo, hi)))

    shoot = _Shooting(prob.model, prob.cost, x0, n_steps, n_c, box, config.fd_step)
    bounds = list(zip(lo, hi))
    options = {
        "maxiter": config.max_iterations,
        "maxfun": 50 * config.max_iterations,
        "ftol": 1e-18,
        "gtol": config.gradient_tol,
        "maxls": 60,
    }

    best = None
    for label, z0 in starts:
        z = np.clip(z0, lo, hi)
        iterations = 0
        result = None
        for weight in config.penalty_weights:
            shoot.weight = weight
            result = minimize(
                shoot.objective_and_gradient,
                z,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options=options,
            )
            z = result.x
            data, reached = shoot.evaluate(z)
            iterations += int(result.nit)
            if data is None:
                break
            if shoot.max_violation(data["states"]) <= config.constraint_tol:
                break
        if data is None:
            continue
        violation = shoot.max_violation(data["states"])
        feasible = violation <= config.constraint_tol
        candidate = OcpSolution(
            controls=data["controls"],
            value=float(data["raw_cost"]),
            feasible=feasible,
            states=data["states"],
            diagnostics={
                "start": label,
                "iterations": iterations,
                "converged": bool(result.status == 0),
                "gradient_norm": float(np.max(np.abs(result.jac))),
                "penalty_residual": violation,
                "objective_evaluations": shoot.evaluations,
            },
        )
        if feasible:
            return candidate
        if best is None or candidate.diagnostics["penalty_residual"] < best.diagnostics["penalty_residual"]:
            best = candidate
    detail = "" if best is None else (
        f" (best residual {best.diagnostics['penalty_residual']:.3e})"
    )
    raise InfeasibleError(
        f"no feasible control sequence found after {len(starts)} starts{detail}"
    )


def mpc_feedback(
    prob: MpcProblem, x, warm_start=None, config: SolverConfig = SolverConfig()
) -> tuple[np.ndarray, OcpSolution]:
    """First element of the optimal sequence, plus the full solution."""
    sol = solve_ocp(prob, x, warm_start=warm_start, config=config)
    return sol.controls[0].copy(), sol


def closed_loop_run(
    plant,
    prob: MpcProblem,
    x0,
    steps: int,
    config: SolverConfig = SolverConfig(),
) -> tuple[Trajectory, np.ndarray]:
    """Receding-horizon loop: plan with ``prob.model``, apply to ``plant``.

    Each solve is warm-started from the previous solution shifted by one
    stage. Solver infeasibility truncates the run and leaves a diagnostic on
    the trajectory instead of raising, so partial experiments stay usable.
    Returns the trajectory (with stage costs) and the optimal-value trace.
    """
    if steps < 1:
        raise ValueError("need at least one closed-loop step")
    x = np.asarray(x0, dtype=float)
    states = [x]
    controls = []
    costs = []
    values = []
    warm = None
    diagnostic = None
    for n in range(steps):
        try:
            u, sol = mpc_feedback(prob, x, warm_start=warm, config=config)
        except InfeasibleError as err:
            diagnostic = f"feedback infeasible at step {n}: {err}"
            break
        values.append(sol.value)
        costs.append(prob.cost(x, u))
        try:
            x = plant.step(x, u)
        except _ROLLOUT_ABORT as err:
            diagnostic = f"plant step failed at step {n}: {err}"
            break
        states.append(x)
        controls.append(u)
        warm = np.vstack([sol.controls[1:], np.zeros((1, sol.controls.shape[1]))])
    n_c = prob.control_box.lo.size
    traj = Trajectory(
        np.array(states),
        np.array(controls, dtype=float).reshape(len(controls), n_c),
        dt=getattr(plant, "dt", 1.0),
        costs=np.array(costs[: len(controls)]) if controls else None,
        diagnostic=diagnostic,
    )
    return traj, np.array(values)


def admissible(prob: MpcProblem, x0, controls, tol: float = _CONSTRAINT_TOL) -> bool:
    """Check a control sequence against boxes under the problem's model."""
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        controls = controls.reshape(len(controls), -1)
    lo, hi = prob.control_box.lo, prob.control_box.hi
    if np.any(controls < lo - tol) or np.any(controls > hi + tol):
        return False
    _, states = rollout_cost(prob.model, prob.cost, x0, controls)
    if len(states) != len(controls) + 1:
        return False
    box = prob.applicable_state_box
    if box is None:
        return True
    return all(box.contains(x, tol=tol) for x in states[1:])


@dataclass(frozen=True)
class GrowthBounds:
    """Empirical value-growth bounds ``B_k`` over a sample of states."""

    values: np.ndarray
    samples_used: int
    samples_skipped: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 1:
            raise DimensionError("growth bounds must be a flat nonempty array")
        object.__setattr__(self, "values", vals)

    @property
    def k_max(self) -> int:
        return self.values.size

    def bound(self, k: int) -> float:
        if not 1 <= k <= self.k_max:
            raise IndexError(f"B_{k} not estimated (k_max={self.k_max})")
        return float(self.values[k - 1])


def estimate_growth_bounds(
    prob: MpcProblem,
    states: np.ndarray,
    k_max: int,
    config: SolverConfig = SolverConfig(),
) -> GrowthBounds:
    """Worst observed ``V_k(x) / l*(x)`` over states, per horizon ``k``.

    ``l*`` is the control-free stage cost, so with positive-definite control
    weight ``B_1 = 1`` holds automatically. The returned sequence is made
    nondecreasing in ``k`` (a longer horizon can only add cost). Samples at
    which the stage-cost floor vanishes or the OCP is infeasible are skipped
    with a warning.
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    ratios = np.full((len(states), k_max), -np.inf)
    used = 0
    skipped = 0
    for idx, x in enumerate(states):
        floor = prob.cost.state_term(x)
        if np.linalg.norm(x) < 1e-6 or floor <= 0.0:
            log.warning("growth-bound sample %d too close to the origin; skipped", idx)
            skipped += 1
            continue
        warm = None
        try:
            for k in range(1, k_max + 1):
                sol = solve_ocp(prob, x, warm_start=warm, horizon=k, config=config)
                ratios[idx, k - 1] = sol.value / floor
                warm = np.vstack([sol.controls, np.zeros((1, sol.controls.shape[1]))])
        except InfeasibleError as err:
            log.warning("growth-bound sample %d infeasible: %s", idx, err)
            skipped += 1
            ratios[idx] = -np.inf
            continue
        used += 1
    if used == 0:
        raise InfeasibleError("no usable growth-bound samples")
    bounds = np.max(ratios, axis=0)
    bounds = np.maximum.accumulate(np.maximum(bounds, 1.0))
    return GrowthBounds(values=bounds, samples_used=used, samples_skipped=skipped)


def suboptimality_index(bounds, n_horizon: int, omega: float = 1.0) -> float:
    """Closed-form relaxed dynamic-programming suboptimality index.

    ``alpha_N = 1 - (B_2 - w)(B_N - 1) prod_{i=3..N}(B_i - 1) /
    (prod_{i=2..N} B_i - (B_2 - w) prod_{i=3..N}(B_i - 1))`` with empty
    products equal to one. ``bounds`` is either :class:`GrowthBounds` or a
    flat sequence starting at ``B_1``. The result may be nonpositive; callers
    decide what to do with a failed certificate.
    """
    if n_horizon < 2:
        raise ValueError("the index needs a horizon of at least 2")
    if isinstance(bounds, GrowthBounds):
        get = bounds.bound
        top = bounds.k_max
    else:
        seq = np.asarray(bounds, dtype=float)
        get = lambda k: float(seq[k - 1])  # noqa: E731
        top = seq.size
    if top < n_horizon:
        raise IndexError(f"bounds cover k <= {top}, need {n_horizon}")
    b = {k: get(k) for k in range(2, n_horizon + 1)}
    if any(v < 1.0 - 1e-9 for v in b.values()):
        raise ValueError("growth bounds below one are not meaningful")
    tail = math.prod(b[i] - 1.0 for i in range(3, n_horizon + 1))
    numerator = (b[2] - omega) * (b[n_horizon] - 1.0) * tail
    denominator = math.prod(b[i] for i in range(2, n_horizon + 1)) - (b[2] - omega) * tail
    if abs(denominator) < 1e-300:
        raise DegenerateIndexError(
            f"suboptimality denominator vanished for N={n_horizon}"
        )
    # single division so rational cases (integer bounds) come out exact
    return (denominator - numerator) / denominator


@dataclass(frozen=True)
class StabilityVerdict:
    """Outcome of a containment check on a closed-loop trajectory."""

    radius: float
    entered: bool
    entry_step: int | None
    post_entry_max_norm: float | None
    settle_fraction: float
    holds: bool


def practical_stability_check(
    traj: Trajectory, radius: float, settle_fraction: float = 1.0
) -> StabilityVerdict:
    """Check eventual containment of state norms in the ``radius`` ball.

    The entry step is the first index from which the trajectory never leaves
    the ball again; the verdict holds when that happens no later than
    ``settle_fraction`` of the recorded length.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not 0 < settle_fraction <= 1:
        raise ValueError("settle fraction must be in (0, 1]")
    norms = traj.norms
    outside = np.flatnonzero(norms > radius)
    entry = 0 if outside.size == 0 else int(outside[-1]) + 1
    entered = entry < norms.size
    if not entered:
        return StabilityVerdict(radius, False, None, None, settle_fraction, False)
    post_max = float(np.max(norms[entry:]))
    deadline = settle_fraction * (norms.size - 1)
    return StabilityVerdict(
        radius=radius,
        entered=True,
        entry_step=entry,
        post_entry_max_norm=post_max,
        settle_fraction=settle_fraction,
        holds=entry <= deadline,
    )
