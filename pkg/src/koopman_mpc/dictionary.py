"""Observable dictionaries used to lift states for generator regression.

A dictionary is an ordered tuple of scalar observables whose first entry is
the constant function and whose next ``n_x`` entries are the coordinates, so
the lift of the origin is always the first canonical basis vector and state
recovery is a row selection. Observables beyond the coordinates are expected
to vanish at the origin together with their gradients; entries that do not
are kept but flagged as nonconforming, and the error-bound machinery refuses
to certify dictionaries containing them.
"""

from __future__ import annotations

import abc
import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dynamics import Box, ControlAffineSystem
from .errors import DictionarySpecError, DimensionError, ObservableDomainError

# exp() overflows double precision just above this exponent
_EXP_GUARD = 700.0


class Observable(abc.ABC):
    """Scalar observable with an analytic gradient, vectorized over samples."""

    name: str

    @abc.abstractmethod
    def value(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at ``points`` shaped ``(d, n_x)``; returns ``(d,)``."""

    @abc.abstractmethod
    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Gradient rows at ``points``; returns ``(d, n_x)``."""

    @property
    @abc.abstractmethod
    def descriptor(self) -> str:
        """Canonical id string used for dictionary hashing."""

    @abc.abstractmethod
    def conforming(self, n_x: int) -> bool:
        """True when the observable is structurally admissible beyond the
        coordinates: zero value and zero gradient at the origin."""


@dataclass(frozen=True)
class Monomial(Observable):
    exponents: tuple[int, ...]

    def __post_init__(self):
        ex = tuple(int(e) for e in self.exponents)
        if any(e < 0 for e in ex):
            raise DictionarySpecError("monomial exponents must be nonnegative")
        object.__setattr__(self, "exponents", ex)

    @property
    def name(self) -> str:
        if self.degree == 0:
            return "1"
        parts = []
        for j, e in enumerate(self.exponents):
            if e == 1:
                parts.append(f"x{j + 1}")
            elif e > 1:
                parts.append(f"x{j + 1}^{e}")
        return "*".join(parts)

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    @property
    def descriptor(self) -> str:
        return "mono:" + ",".join(map(str, self.exponents))

    def conforming(self, n_x: int) -> bool:
        return self.degree >= 2

    def value(self, points):
        out = np.ones(points.shape[0])
        for j, e in enumerate(self.exponents):
            if e:
                out = out * points[:, j] ** e
        return out

    def gradient(self, points):
        grad = np.zeros_like(points)
        for j, e in enumerate(self.exponents):
            if e == 0:
                continue
            col = float(e) * points[:, j] ** (e - 1)
            for i, ei in enumerate(self.exponents):
                if ei and i != j:
                    col = col * points[:, i] ** ei
            grad[:, j] = col
        return grad


@dataclass(frozen=True)
class ReciprocalExp(Observable):
    """``exp(1 / (x_i + shift))``, singular where the shifted coordinate is 0.

    The shift places the singularity; with ``shift=0`` the observable is
    undefined at ``x_i = 0`` and numerically unusable in a thin strip around
    it, so construction over a box straddling the singularity must be
    acknowledged explicitly (see :func:`custom_dictionary`).
    """

    index: int
    shift: float = 0.0

    def __post_init__(self):
        if self.index < 0:
            raise DictionarySpecError("coordinate index must be nonnegative")
        object.__setattr__(self, "shift", float(self.shift))

    @property
    def name(self) -> str:
        if self.shift == 0.0:
            return f"exp(1/x{self.index + 1})"
        return f"exp(1/(x{self.index + 1}{self.shift:+g}))"

    @property
    def descriptor(self) -> str:
        return f"rexp:{self.index}:{self.shift!r}"

    def conforming(self, n_x: int) -> bool:
        return False

    def singular_on(self, box: Box) -> bool:
        lo = box.lo[self.index] + self.shift
        hi = box.hi[self.index] + self.shift
        return lo <= 0.0 <= hi

    def _reciprocal(self, points):
        z = points[:, self.index] + self.shift
        bad = z == 0.0
        if np.any(bad):
            raise ObservableDomainError(
                f"{self.name} undefined at sample(s) {np.flatnonzero(bad).tolist()}",
                observable=self.name,
                indices=np.flatnonzero(bad),
            )
        w = 1.0 / z
        over = w > _EXP_GUARD
        if np.any(over):
            raise ObservableDomainError(
                f"{self.name} overflows double precision at sample(s) "
                f"{np.flatnonzero(over).tolist()}",
                observable=self.name,
                indices=np.flatnonzero(over),
            )
        return w

    def value(self, points):
        return np.exp(self._reciprocal(points))

    def gradient(self, points):
        w = self._reciprocal(points)
        grad = np.zeros_like(points)
        grad[:, self.index] = -np.exp(w) * w * w
        return grad


@dataclass(frozen=True)
class StateProjection:
    """Row selection recovering the state from a lifted vector."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DictionarySpecError("projection rows must be strictly increasing")
        if idx and idx[0] < 0:
            raise DictionarySpecError("projection rows must be nonnegative")
        object.__setattr__(self, "indices", idx)

    def apply(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z[..., list(self.indices)]


@dataclass(frozen=True)
class Dictionary:
    """Ordered observable dictionary over ``n_x`` state coordinates."""

    n_x: int
    observables: tuple[Observable, ...]
    dict_id: str
    lipschitz_bound: float | None = None

    @property
    def size(self) -> int:
        return len(self.observables)

    @property
    def nonconforming(self) -> tuple[str, ...]:
        return tuple(
            ob.name for ob in self.observables[1 + self.n_x:]
            if not ob.conforming(self.n_x)
        )

    def _points(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[1] != self.n_x:
            raise DimensionError(f"points must have {self.n_x} coordinates")
        return pts, single

    def lift(self, x) -> np.ndarray:
        """Evaluate all observables; ``(M,)`` for one state, ``(d, M)`` for many."""
        pts, single = self._points(x)
        out = np.column_stack([ob.value(pts) for ob in self.observables])
        return out[0] if single else out

    def gradient(self, x) -> np.ndarray:
        """Stacked gradients; ``(M, n_x)`` for one state, ``(d, M, n_x)`` for many."""
        pts, single = self._points(x)
        out = np.stack([ob.gradient(pts) for ob in self.observables], axis=1)
        return out[0] if single else out


def generator_action(
    dictionary: Dictionary, system: ControlAffineSystem, x, u
) -> np.ndarray:
    """Directional derivatives of every observable along the closed field.

    Computes ``grad(psi_k)(x) . (g0(x) + sum u_i g_i(x))`` analytically, which
    is the action of the generator associated with constant control ``u``.
    Shape follows :meth:`Dictionary.lift`.
    """
    if dictionary.n_x != system.n_x:
        raise DimensionError("dictionary and system disagree on the state dimension")
    pts, single = dictionary._points(x)
    grads = dictionary.gradient(pts)
    f = system.field(pts, u)
    out = np.einsum("dmn,dn->dm", grads, f)
    return out[0] if single else out


def coordinate_projection(dictionary: Dictionary) -> StateProjection:
    """Projection selecting the coordinate observables (rows 1..n_x)."""
    indices = []
    for row, ob in enumerate(dictionary.observables):
        if isinstance(ob, Monomial) and ob.degree == 1:
            indices.append(row)
    if len(indices) != dictionary.n_x:
        raise DictionarySpecError("dictionary does not contain all coordinates")
    return StateProjection(tuple(indices))


def _graded_lex_exponents(n_x: int, max_degree: int) -> list[tuple[int, ...]]:
    def compositions(total, parts):
        if parts == 1:
            yield (total,)
            return
        for head in range(total, -1, -1):
            for tail in compositions(total - head, parts - 1):
                yield (head,) + tail

    out = []
    for degree in range(max_degree + 1):
        out.extend(sorted(compositions(degree, n_x), reverse=True))
    return out


def monomial_dictionary(n_x: int, max_degree: int) -> Dictionary:
    """All monomials of total degree up to ``max_degree`` in graded
    lexicographic order, starting with the constant and the coordinates."""
    if n_x < 1 or max_degree < 1:
        raise DictionarySpecError("need n_x >= 1 and max_degree >= 1")
    observables = tuple(Monomial(e) for e in _graded_lex_exponents(n_x, max_degree))
    return Dictionary(
        n_x=n_x,
        observables=observables,
        dict_id=f"monomial-n{n_x}-p{max_degree}",
    )


def _structural_prefix_ok(observables: Sequence[Observable], n_x: int) -> bool:
    if len(observables) < 1 + n_x:
        return False
    head = observables[0]
    if not (isinstance(head, Monomial) and head.degree == 0):
        return False
    for j in range(n_x):
        ob = observables[1 + j]
        want = tuple(1 if i == j else 0 for i in range(n_x))
        if not (isinstance(ob, Monomial) and ob.exponents == want):
            return False
    return True


def custom_dictionary(
    n_x: int,
    observables: Iterable[Observable],
    state_box: Box | None = None,
    allow_singular: bool = False,
) -> Dictionary:
    """Assemble a dictionary from explicit observables.

    The list must begin with the constant followed by every coordinate, in
    order. Reciprocal-exponential observables whose singularity lies inside
    the declared state box are rejected unless ``allow_singular`` is set;
    that acknowledgment opts into domain errors at evaluation time instead.
    """
    obs = tuple(observables)
    if not _structural_prefix_ok(obs, n_x):
        raise DictionarySpecError(
            "dictionary must start with the constant and the coordinate observables"
        )
    for ob in obs:
        if isinstance(ob, Monomial) and len(ob.exponents) != n_x:
            raise DictionarySpecError(f"{ob.name} has wrong arity for n_x={n_x}")
        if isinstance(ob, ReciprocalExp):
            if ob.index >= n_x:
                raise DictionarySpecError(f"{ob.name} indexes beyond the state")
            if state_box is not None and ob.singular_on(state_box) and not allow_singular:
                raise DictionarySpecError(
                    f"{ob.name} is singular inside the state box; "
                    "pass allow_singular=True to acknowledge"
                )
    digest = hashlib.sha256(
        ";".join(ob.descriptor for ob in obs).encode()
    ).hexdigest()[:12]
    return Dictionary(n_x=n_x, observables=obs, dict_id=f"custom-{digest}")
