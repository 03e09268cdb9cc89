"""Initial value problem solvers.

Two routes with distinct jobs:

* :func:`solve_fixed` -- classical RK4 with a fixed number of sub-steps per
  requested interval, built from tape ops so gradients flow through every
  stage ("discretize, then differentiate").  Used for training and for
  acquisition gradients.
* :func:`solve_adaptive` -- Dormand-Prince 5(4) with PI step-size control and
  a quartic dense-output interpolant, pure numpy.  The ground-truth
  generator and the oracle the fixed-step route is checked against.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

Array = np.ndarray

# A vector field maps (state, t) -> dstate/dt with matching dimension.  Tape
# fields take and return Nodes; numpy fields take and return arrays and must
# be vectorized over a leading batch axis.
VectorField = Callable


class SolveStatus(enum.Enum):
    Ok = "ok"
    StepLimit = "step_limit"
    NonFinite = "non_finite"


@dataclass
class SolveResult:
    times: Array
    states: list  # Nodes (fixed-step) or arrays (adaptive), aligned with times
    steps_taken: int
    status: SolveStatus

    def states_array(self) -> Array:
        return np.stack([ad.value_of(s) for s in self.states])


# ---------------------------------------------------------------------------
# fixed-step RK4 (differentiable)
# ---------------------------------------------------------------------------

def rk4_step(field: VectorField, state, t, h) -> Node:
    """One classical 4-stage Runge-Kutta step from ``t`` with size ``h``.

    ``state``, ``t`` and ``h`` may be Nodes or plain values; the update is
    differentiable w.r.t. all of them whenever the field is built from tape
    ops.
    """
    if not isinstance(h, Node) and h <= 0.0:
        raise ValueError("step size must be positive")
    half = ad.scale(0.5, h) if isinstance(h, Node) else 0.5 * h
    k1 = field(ad.as_node(state), t)
    k2 = field(ad.axpy(state, half, k1), _t_plus(t, half))
    k3 = field(ad.axpy(state, half, k2), _t_plus(t, half))
    k4 = field(ad.axpy(state, h, k3), _t_plus(t, h))
    ksum = ad.lincomb([(1.0, k1), (2.0, k2), (2.0, k3), (1.0, k4)])
    sixth = ad.scale(1.0 / 6.0, h) if isinstance(h, Node) else h / 6.0
    return ad.axpy(state, sixth, ksum)


def _t_plus(t, dt):
    if isinstance(t, Node) or isinstance(dt, Node):
        return ad.add(t, dt)
    return t + dt


def solve_fixed(field: VectorField, x0, t_grid: Sequence, substeps_per_interval: int = 4) -> SolveResult:
    """Integrate through ``t_grid`` with ``substeps_per_interval`` RK4 steps
    per consecutive pair of grid times.

    Grid entries may be Nodes (gradients then flow into the times through the
    step sizes).  States are returned at every grid time, on the tape.  A
    non-finite state stops the solve with status ``NonFinite``; the returned
    states cover the grid times reached so far.
    """
    if substeps_per_interval < 1:
        raise ValueError("substeps_per_interval must be >= 1")
    t_values = [float(ad.value_of(t)) for t in t_grid]
    if any(b < a for a, b in zip(t_values, t_values[1:])):
        raise ValueError("t_grid must be non-decreasing")

    state = ad.as_node(x0)
    states = [state]
    steps = 0
    status = SolveStatus.Ok
    for i in range(len(t_grid) - 1):
        t_a, t_b = t_grid[i], t_grid[i + 1]
        if isinstance(t_a, Node) or isinstance(t_b, Node):
            h = ad.scale(1.0 / substeps_per_interval, ad.sub(t_b, t_a))
            h_is_zero = abs(ad.value_of(h)) == 0.0
        else:
            h = (t_b - t_a) / substeps_per_interval
            h_is_zero = h == 0.0
        if h_is_zero:
            states.append(state)
            continue
        for k in range(substeps_per_interval):
            t_cur = _t_plus(t_a, ad.scale(float(k), h) if isinstance(h, Node) else k * h)
            state = rk4_step(field, state, t_cur, h)
            steps += 1
            if not np.all(np.isfinite(state.value)):
                status = SolveStatus.NonFinite
                break
        if status is not SolveStatus.Ok:
            break
        states.append(state)
    reached = np.array(t_values[: len(states)])
    return SolveResult(reached, states, steps, status)


# ---------------------------------------------------------------------------
# adaptive Dormand-Prince 5(4)
# ---------------------------------------------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th-order minus embedded 4th-order weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# dense-output polynomial (Dormand-Prince quartic interpolant)
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
# PI controller exponents for a 5th/4th order pair
_ALPHA = 0.7 / 5.0
_BETA = 0.4 / 5.0


def _error_norm(err: Array, y0: Array, y1: Array, rtol: float, atol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(field, t0, y0, f0, t_end, rtol, atol) -> float:
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = field(y1, t0 + h0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1, t_end - t0)


def solve_adaptive(
    field: VectorField,
    x0: Array,
    t_eval: Sequence[float],
    rtol: float = 1e-5,
    atol: float = 1e-5,
    max_steps: int = 10_000,
) -> SolveResult:
    """Dormand-Prince 5(4) with PI step control and dense output at ``t_eval``.

    ``x0`` may be a single state ``(d,)`` or a batch ``(B, d)`` sharing the
    field; for a batch the error norm is taken over the whole array, so every
    trajectory is kept within tolerance.  Returns status ``StepLimit`` when
    ``max_steps`` is exhausted and ``NonFinite`` when the solution diverges;
    states computed before the failure are returned.
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("rtol and atol must be positive")
    t_eval = np.asarray(t_eval, dtype=float)
    if t_eval.ndim != 1 or np.any(np.diff(t_eval) < 0):
        raise ValueError("t_eval must be a non-decreasing 1-D sequence")
    y = np.array(x0, dtype=float)
    t = float(t_eval[0])
    t_end = float(t_eval[-1])

    out: list[Array] = []
    i_eval = 0
    while i_eval < len(t_eval) and t_eval[i_eval] <= t:
        out.append(y.copy())
        i_eval += 1
    if t_end <= t:
        return SolveResult(t_eval[: len(out)], out, 0, SolveStatus.Ok)

    f = field(y, t)
    if not np.all(np.isfinite(f)):
        return SolveResult(t_eval[: len(out)], out, 0, SolveStatus.NonFinite)
    h = _initial_step(field, t, y, f, t_end, rtol, atol)
    h_min = 16 * np.finfo(float).eps * max(abs(t), abs(t_end), 1.0)
    err_prev = 1.0
    steps = 0
    K = np.empty((7,) + y.shape)

    while t < t_end:
        if steps >= max_steps:
            return SolveResult(t_eval[: len(out)], out, steps, SolveStatus.StepLimit)
        h = min(h, t_end - t)
        if h < h_min:
            return SolveResult(t_eval[: len(out)], out, steps, SolveStatus.NonFinite)

        K[0] = f
        failed = False
        for s in range(1, 7):
            ys = y + h * np.tensordot(_A[s - 1], K[:s], axes=(0, 0))
            K[s] = field(ys, t + _C[s] * h)
            if not np.all(np.isfinite(K[s])):
                failed = True
                break
        if not failed:
            y_new = y + h * np.tensordot(_B, K, axes=(0, 0))
            failed = not np.all(np.isfinite(y_new))
        if failed:
            steps += 1
            h *= 0.25
            continue

        err_arr = h * np.tensordot(_E, K, axes=(0, 0))
        err = _error_norm(err_arr, y, y_new, rtol, atol)
        steps += 1
        if err <= 1.0:
            t_new = t + h
            # dense output over (t, t_new] for requested times
            while i_eval < len(t_eval) and t_eval[i_eval] <= t_new + 1e-14 * max(1.0, abs(t_new)):
                theta = (t_eval[i_eval] - t) / h
                theta = min(max(theta, 0.0), 1.0)
                powers = np.array([theta, theta**2, theta**3, theta**4])
                q = np.tensordot(_P @ powers, K, axes=(0, 0))
                out.append(y + h * q)
                i_eval += 1
            f = K[6]  # FSAL: last stage is f(t_new, y_new)
            y = y_new
            t = t_new
            err = max(err, 1e-10)
            factor = _SAFETY * err ** (-_ALPHA) * err_prev**_BETA
            h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            err_prev = err
        else:
            h *= max(_MIN_FACTOR, _SAFETY * err ** (-_ALPHA))

    return SolveResult(t_eval[: len(out)], out, steps, SolveStatus.Ok)
