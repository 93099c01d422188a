"""Fixed-step RK4 with step-halving control for linear-affine systems.

All the deterministic solvers in this package integrate y' = A y + f(t)
with A constant. The control loop halves the step until two successive
refinements agree at every requested output time, so the returned
trajectory carries no tuning knob beyond the agreement tolerance.
"""

from __future__ import annotations

import numpy as np

DEFAULT_TOL = 1e-8
MAX_HALVINGS = 16


class StepControlError(RuntimeError):
    def __init__(self, tol: float, reached: float, suggested_h: float):
        super().__init__(
            f"RK4 refinement stalled: successive-step agreement {reached:.3e} "
            f"did not reach {tol:.3e}; try fixed step <= {suggested_h:.3e}"
        )
        self.suggested_h = suggested_h


def _source_at(source, t: float, dim: int):
    if source is None:
        return 0.0
    if callable(source):
        return np.asarray(source(t), dtype=np.float64)
    return source


def _run_fixed(A: np.ndarray, source, y0: np.ndarray, times: np.ndarray,
               h: float) -> np.ndarray:
    dim = y0.size
    out = np.empty((times.size, dim))
    y = y0.astype(np.float64).copy()
    t = 0.0
    idx = 0
    if times[0] == 0.0:
        out[0] = y
        idx = 1
    while idx < times.size:
        t_target = times[idx]
        n_steps = max(1, int(np.ceil((t_target - t) / h - 1e-12)))
        dt = (t_target - t) / n_steps
        for _ in range(n_steps):
            f0 = _source_at(source, t, dim)
            fm = _source_at(source, t + 0.5 * dt, dim)
            f1 = _source_at(source, t + dt, dim)
            k1 = A @ y + f0
            k2 = A @ (y + 0.5 * dt * k1) + fm
            k3 = A @ (y + 0.5 * dt * k2) + fm
            k4 = A @ (y + dt * k3) + f1
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += dt
        t = t_target
        out[idx] = y
        idx += 1
    return out


def default_step(A: np.ndarray) -> float:
    # Gershgorin bound on the spectral radius keeps RK4 inside its
    # stability region; the halving loop then drives accuracy.
    rho = float(np.max(np.sum(np.abs(A), axis=1)))
    return 1.0 if rho == 0.0 else min(1.0, 1.0 / rho)


def integrate_affine(A: np.ndarray, source, y0, times, tol: float = DEFAULT_TOL,
                     initial_step: float | None = None) -> np.ndarray:
    """Trajectory of y' = A y + f(t) at the requested times (t >= 0, sorted).

    ``source`` is None, a constant vector, or a callable t -> vector.
    Returns an array of shape (len(times), dim). Raises StepControlError
    when halving stops improving before the tolerance is met.
    """
    A = np.asarray(A, dtype=np.float64)
    y0 = np.atleast_1d(np.asarray(y0, dtype=np.float64))
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if times.size == 0:
        return np.empty((0, y0.size))
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("output times must be sorted and nonnegative")
    h = initial_step if initial_step is not None else default_step(A)
    # overflow on an unstable trial step is expected; the halving loop
    # recovers, so keep the float warnings quiet
    with np.errstate(over="ignore", invalid="ignore"):
        coarse = _run_fixed(A, source, y0, times, h)
        for _ in range(MAX_HALVINGS):
            h *= 0.5
            fine = _run_fixed(A, source, y0, times, h)
            diff = float(np.max(np.abs(fine - coarse))) if fine.size else 0.0
            if diff < tol:
                return fine
            coarse = fine
    raise StepControlError(tol, diff, h * 0.25)
