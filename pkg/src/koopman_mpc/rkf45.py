"""Adaptive Runge-Kutta-Fehlberg 4(5) integration with PI step-size control.

The embedded pair shares six stage evaluations; the fifth-order solution is
propagated and the fourth-order defect drives step acceptance. Error control
follows the usual mixed absolute/relative weighting with a PI controller on
the step size, so repeated calls with identical inputs are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import IntegrationError

# Classic Fehlberg tableau. Stage nodes, stage weights, fifth-order
# propagation weights and the (b5 - b4) defect coefficients.
_C = np.array([0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2])
_A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
_A_ROWS = tuple(np.array(row) for row in _A)
_B5 = np.array([16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55])
_E = np.array([1 / 360, 0.0, -128 / 4275, -2197 / 75240, 1 / 50, 2 / 55])

_ORDER = 5.0
_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
# PI controller exponents (integral/proportional) for the embedded order.
_K_I = 0.7 / _ORDER
_K_P = 0.4 / _ORDER


@dataclass(frozen=True)
class IntegratorConfig:
    """Tolerances and step limits for the adaptive integrator."""

    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = math.inf
    initial_step: float | None = None

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ValueError("initial_step must be positive")


def _error_norm(defect, y_old, y_new, rel_tol, abs_tol) -> float:
    scale = abs_tol + rel_tol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.sqrt(np.mean((defect / scale) ** 2)))


def _initial_step(f, y0, f0, span, rel_tol, abs_tol) -> float:
    """Standard curvature-probing guess for the first step size."""
    scale = abs_tol + rel_tol * np.abs(y0)
    d0 = float(np.sqrt(np.mean((y0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + h0 * f0
    f1 = f(y1)
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / _ORDER)
    return min(100 * h0, h1, span)


def integrate(
    field: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    span: float,
    config: IntegratorConfig = IntegratorConfig(),
) -> np.ndarray:
    """Integrate ``dx/dt = field(x)`` over ``[0, span]`` and return the endpoint.

    The field must be autonomous; time-dependent inputs are expected to be
    frozen into the callable by the caller (zero-order hold). Raises
    :class:`IntegrationError` when the step size underflows, which is the
    usual symptom of a finite-time blow-up or excessive stiffness.
    """
    y = np.array(x0, dtype=float, copy=True)
    if y.ndim != 1:
        raise ValueError("integrate expects a flat state vector")
    if span < 0:
        raise ValueError("span must be nonnegative")
    if span == 0:
        return y

    rtol, atol = config.rel_tol, config.abs_tol
    f0 = np.asarray(field(y), dtype=float)
    if f0.shape != y.shape:
        raise ValueError("field output shape does not match the state")
    h = config.initial_step or _initial_step(field, y, f0, span, rtol, atol)
    h = min(h, config.max_step, span)

    t = 0.0
    err_prev = 1.0
    k = np.empty((6, y.size))
    h_floor = 1e-14 * span

    while t < span:
        h = min(h, span - t, config.max_step)
        if h < h_floor:
            raise IntegrationError(
                f"step size underflow at t={t:.6e} (h={h:.3e})", t_last=t
            )

        k[0] = field(y)
        for i in range(1, 6):
            yi = y + h * (_A_ROWS[i] @ k[:i])
            k[i] = field(yi)
        y_new = y + h * (_B5 @ k)
        defect = h * (_E @ k)

        err = _error_norm(defect, y, y_new, rtol, atol)
        if not math.isfinite(err):
            raise IntegrationError(
                f"non-finite state encountered at t={t:.6e}", t_last=t
            )

        if err <= 1.0:
            t += h
            y = y_new
            base = err if err > 0 else 1e-10
            factor = _SAFETY * base ** (-_K_I) * err_prev ** _K_P
            err_prev = base
            h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
        else:
            h *= max(0.1, _SAFETY * err ** (-1.0 / _ORDER))
    return y
