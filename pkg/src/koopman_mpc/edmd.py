"""Generator regression from lifted samples and the induced bilinear surrogate.

The estimator works directly on the infinitesimal generator: data matrices
pair lifted states with analytic directional derivatives, one regression for
the drift (zero control) and one per unit control direction. Control
affinity of the generator then gives ``L(u) = L0 + sum_i u_i (L_i - L0)``,
and one surrogate step is the state projection of the lifted matrix
exponential ``exp(dt * L(u))`` applied to the lifted state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .dictionary import Dictionary, StateProjection, coordinate_projection, generator_action
from .dynamics import Box, ControlAffineSystem, Trajectory
from .errors import (
    DimensionError,
    EstimationError,
    MatrixExponentialError,
    ObservableDomainError,
)

log = logging.getLogger(__name__)

SV_CUTOFF = 1e-12


@dataclass(frozen=True)
class SampleSet:
    """States drawn i.i.d. uniformly from a box, with provenance."""

    points: np.ndarray
    domain: Box
    seed: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise EstimationError("sample set must be a nonempty (d, n_x) array")
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]


def sample_states(domain: Box, count: int, seed: int) -> SampleSet:
    """Draw ``count`` i.i.d. uniform states; reproducible for a fixed seed.

    Draws fill a single PCG64 stream in row order, so for one seed the sets
    are nested across sizes: the first ``d`` rows agree for every request of
    at least ``d`` points.
    """
    if count < 1:
        raise EstimationError("need at least one sample")
    rng = np.random.default_rng(seed)
    return SampleSet(domain.sample(rng, count), domain, seed)


def assemble_data_matrices(
    dictionary: Dictionary,
    system: ControlAffineSystem,
    samples: SampleSet,
    u,
) -> tuple[np.ndarray, np.ndarray]:
    """Lifted sample matrix ``X`` and generator-action matrix ``Y`` (both ``M x d``).

    Column ``j`` of ``X`` is the lift of sample ``j``; the same column of
    ``Y`` holds the analytic generator action at that sample under constant
    control ``u``. Non-finite entries are reported with the offending sample
    indices rather than silently poisoning the regression.
    """
    pts = samples.points
    try:
        x_mat = dictionary.lift(pts).T
        y_mat = generator_action(dictionary, system, pts, u).T
    except ObservableDomainError:
        raise
    for tag, mat in (("lift", x_mat), ("generator action", y_mat)):
        bad = ~np.all(np.isfinite(mat), axis=0)
        if np.any(bad):
            raise ObservableDomainError(
                f"non-finite {tag} values at sample(s) {np.flatnonzero(bad).tolist()}",
                observable=tag,
                indices=np.flatnonzero(bad),
            )
    return x_mat, y_mat


@dataclass(frozen=True)
class RegressionInfo:
    rank: int
    singular_values: np.ndarray
    residual: float


def estimate_generator(
    x_mat: np.ndarray, y_mat: np.ndarray, cutoff: float = SV_CUTOFF
) -> tuple[np.ndarray, RegressionInfo]:
    """Frobenius least squares ``argmin_L |L X - Y|``, as ``Y X^T (X X^T)^+``.

    The pseudoinverse acts on the Gram matrix ``X X^T``: its eigenvalues are
    the squared singular values of ``X``, so directions below
    ``cutoff * lambda_max`` are dropped. Applying the cutoff on the squared
    spectrum matters for dictionaries with near-collinear observables (the
    reactor's reciprocal exponentials are constant to a few 1e-4): inverting
    those directions would put 1e8-scale entries into the generator and the
    matrix exponential downstream would be pure roundoff. Rank deficiency is
    legal (minimum-norm solution) but logged, since it usually means too few
    samples.
    """
    x_mat = np.asarray(x_mat, dtype=float)
    y_mat = np.asarray(y_mat, dtype=float)
    if x_mat.shape != y_mat.shape or x_mat.ndim != 2:
        raise DimensionError("X and Y must be equal-shape 2-d arrays")
    if not (np.all(np.isfinite(x_mat)) and np.all(np.isfinite(y_mat))):
        raise EstimationError("data matrices contain non-finite entries")
    gram = x_mat @ x_mat.T
    eigvals, eigvecs = np.linalg.eigh(gram)
    eigvals, eigvecs = eigvals[::-1], eigvecs[:, ::-1]
    if eigvals[0] <= 0.0:
        raise EstimationError("lifted sample matrix is identically zero")
    keep = eigvals > cutoff * eigvals[0]
    rank = int(np.count_nonzero(keep))
    if rank < x_mat.shape[0]:
        log.warning("rank-deficient regression: rank %d < %d", rank, x_mat.shape[0])
    basis = eigvecs[:, keep]
    l_mat = (y_mat @ x_mat.T) @ (basis / eigvals[keep]) @ basis.T
    residual = float(np.linalg.norm(l_mat @ x_mat - y_mat))
    sing = np.sqrt(np.maximum(eigvals, 0.0))
    return l_mat, RegressionInfo(rank, sing, residual)


@dataclass(frozen=True)
class GeneratorEstimate:
    """Estimated drift generator plus one generator per unit control direction."""

    drift: np.ndarray
    inputs: tuple[np.ndarray, ...]
    dict_id: str
    sample_count: int
    consistency_enforced: bool
    info: tuple[RegressionInfo, ...] = ()

    def __post_init__(self):
        drift = np.asarray(self.drift, dtype=float)
        m = drift.shape[0]
        if drift.shape != (m, m):
            raise DimensionError("drift generator must be square")
        inputs = tuple(np.asarray(a, dtype=float) for a in self.inputs)
        if any(a.shape != (m, m) for a in inputs):
            raise DimensionError("all generators must share the lifted dimension")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "inputs", inputs)

    @property
    def size(self) -> int:
        return self.drift.shape[0]

    @property
    def n_c(self) -> int:
        return len(self.inputs)


def fit(
    dictionary: Dictionary,
    system: ControlAffineSystem,
    samples: SampleSet,
    consistency: bool = True,
) -> GeneratorEstimate:
    """Estimate the drift generator and one generator per control direction.

    All regressions share the lifted sample matrix; only the generator-action
    side changes with the control. With ``consistency`` the first column of
    the drift estimate is zeroed after the solve, which pins the origin as a
    fixed point of the zero-control surrogate (the analytic action of the
    drift on every observable vanishes there). The same correction is applied
    to every unit-control generator so the affine differences ``Lei - L0``
    keep their constant columns: those columns carry the state-independent
    part of the control maps and must survive the projection, otherwise
    scaling the control amplifies the discarded drift column instead.
    """
    x_mat, y0 = assemble_data_matrices(
        dictionary, system, samples, np.zeros(system.n_c)
    )
    drift_fit, info0 = estimate_generator(x_mat, y0)
    drift = drift_fit
    if consistency:
        drift = drift_fit.copy()
        drift[:, 0] = 0.0
    inputs = []
    infos = [info0]
    for i in range(system.n_c):
        unit = np.zeros(system.n_c)
        unit[i] = 1.0
        _, y_i = assemble_data_matrices(dictionary, system, samples, unit)
        l_i, info_i = estimate_generator(x_mat, y_i)
        if consistency:
            l_i = l_i.copy()
            l_i[:, 0] -= drift_fit[:, 0]
        inputs.append(l_i)
        infos.append(info_i)
    return GeneratorEstimate(
        drift=drift,
        inputs=tuple(inputs),
        dict_id=dictionary.dict_id,
        sample_count=samples.count,
        consistency_enforced=consistency,
        info=tuple(infos),
    )


def control_generator(estimate: GeneratorEstimate, u) -> np.ndarray:
    """Generator at constant control: ``L0 + sum_i u_i (L_i - L0)``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.size != estimate.n_c:
        raise DimensionError(f"control has {u.size} entries, expected {estimate.n_c}")
    out = estimate.drift.copy()
    for ui, l_i in zip(u, estimate.inputs):
        if ui != 0.0:
            out += ui * (l_i - estimate.drift)
    return out


def _eig_factors(scaled: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Eigendecomposition of a small generator, or None when not trustworthy."""
    try:
        eigvals, basis = np.linalg.eig(scaled)
    except np.linalg.LinAlgError:
        return None
    cond = np.linalg.cond(basis)
    if not np.isfinite(cond) or cond > 1e10:
        return None
    return eigvals, basis


def _exp_divided_differences(eigvals: np.ndarray) -> np.ndarray:
    """Matrix of ``(exp(a) - exp(b)) / (a - b)`` over eigenvalue pairs.

    Written as ``exp((a+b)/2) * sinh(h)/h`` with ``h = (a-b)/2`` so nearly
    equal eigenvalues do not cancel catastrophically; the ``h -> 0`` limit
    uses the series ``1 + h^2/6``.
    """
    half = (eigvals[:, None] - eigvals[None, :]) / 2.0
    mid = np.exp((eigvals[:, None] + eigvals[None, :]) / 2.0)
    small = np.abs(half) < 1e-7
    safe = np.where(small, 1.0, half)
    ratio = np.where(small, 1.0 + half * half / 6.0, np.sinh(safe) / safe)
    return mid * ratio


def matrix_exponential(a: np.ndarray) -> np.ndarray:
    """Dense matrix exponential via scaling-and-squaring with Pade approximants.

    Raises when the result is not finite, reporting the operator norm, which
    is the usual culprit for overflow."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError("matrix exponential needs a square matrix")
    out = scipy.linalg.expm(a)
    if not np.all(np.isfinite(out)):
        raise MatrixExponentialError(
            f"matrix exponential overflowed (input norm {np.linalg.norm(a, 2):.3e})"
        )
    return out


@dataclass(frozen=True)
class BilinearSurrogate:
    """Sampled-data surrogate: lift, propagate by ``exp(dt L(u))``, project.

    Transition matrices are memoized per control value, which makes repeated
    rollouts with shared controls (finite-difference sweeps in particular)
    cheap. The cache is an implementation detail; results do not depend on it.
    """

    estimate: GeneratorEstimate
    dictionary: Dictionary
    dt: float
    projection: StateProjection | None = None
    is_surrogate = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("sampling period must be positive")
        if self.estimate.size != self.dictionary.size:
            raise DimensionError("estimate and dictionary disagree on lifted size")
        if self.projection is None:
            object.__setattr__(self, "projection", coordinate_projection(self.dictionary))

        @lru_cache(maxsize=4096)
        def cached(u_bytes: bytes) -> np.ndarray:
            u = np.frombuffer(u_bytes, dtype=float)
            return matrix_exponential(self.dt * control_generator(self.estimate, u))

        object.__setattr__(self, "_cached_transition", cached)

    @property
    def n_x(self) -> int:
        return self.dictionary.n_x

    @property
    def n_c(self) -> int:
        return self.estimate.n_c

    def transition(self, u) -> np.ndarray:
        """Lifted one-period transition matrix for constant control ``u``."""
        u = np.ascontiguousarray(np.atleast_1d(np.asarray(u, dtype=float)))
        if u.size != self.n_c:
            raise DimensionError(f"control has {u.size} entries, expected {self.n_c}")
        return self._cached_transition(u.tobytes())

    def step(self, x, u) -> np.ndarray:
        z = self.dictionary.lift(np.asarray(x, dtype=float))
        return self.projection.apply(self.transition(u) @ z)

    def step_jacobian(self, x, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """One step plus its exact Jacobians in the state and the control.

        The state Jacobian is the projected transition applied to the lift
        gradient; the control Jacobian is the Frechet derivative of the
        matrix exponential along each channel's generator direction, applied
        to the lifted state. Both come from one eigendecomposition of the
        scaled generator (divided differences of ``exp`` on the spectrum);
        when the eigenbasis is too ill-conditioned to trust, the dense
        scaling-and-squaring routines take over.
        """
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        z = self.dictionary.lift(x)
        lift_grad = self.dictionary.gradient(x)
        rows = np.asarray(self.projection.indices)
        scaled = self.dt * control_generator(self.estimate, u)
        directions = [
            self.dt * (l_i - self.estimate.drift) for l_i in self.estimate.inputs
        ]

        factors = _eig_factors(scaled)
        if factors is not None:
            eigvals, basis = factors
            exp_w = np.exp(eigvals)
            coords = np.linalg.solve(basis, np.column_stack([z, lift_grad]))
            propagated = (basis * exp_w) @ coords
            x_next = propagated[rows, 0].real
            a_mat = propagated[rows, 1:].real
            phi = _exp_divided_differences(eigvals)
            b_mat = np.empty((rows.size, u.size))
            for i, direction in enumerate(directions):
                mixed = phi * np.linalg.solve(basis, direction @ basis)
                b_mat[:, i] = (basis @ (mixed @ coords[:, 0]))[rows].real
            if np.all(np.isfinite(x_next)) and np.all(np.isfinite(a_mat)) and np.all(
                np.isfinite(b_mat)
            ):
                return x_next, a_mat, b_mat

        trans = self.transition(u)
        x_next = (trans @ z)[rows]
        a_mat = (trans @ lift_grad)[rows]
        b_mat = np.empty((rows.size, u.size))
        for i, direction in enumerate(directions):
            frechet = scipy.linalg.expm_frechet(scaled, direction, compute_expm=False)
            b_mat[:, i] = (frechet @ z)[rows]
        return x_next, a_mat, b_mat


def predict_open_loop(surrogate: BilinearSurrogate, x0, controls) -> Trajectory:
    """Iterate the surrogate under a control sequence.

    Stops early and attaches a diagnostic when an observable leaves its
    numeric domain or the prediction stops being finite; the truncated
    trajectory is still returned so studies can grade partial predictions.
    """
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        if controls.size:
            controls = controls.reshape(len(controls), 1)
        else:
            controls = np.zeros((0, surrogate.n_c))
    x = np.asarray(x0, dtype=float)
    states = [x]
    diagnostic = None
    used = 0
    for k, u in enumerate(controls):
        try:
            x = surrogate.step(x, u)
        except (ObservableDomainError, MatrixExponentialError) as err:
            diagnostic = f"prediction stopped at step {k}: {err}"
            break
        if not np.all(np.isfinite(x)):
            diagnostic = f"prediction diverged at step {k}"
            break
        states.append(x)
        used += 1
    return Trajectory(
        np.array(states), controls[:used], dt=surrogate.dt, diagnostic=diagnostic
    )
