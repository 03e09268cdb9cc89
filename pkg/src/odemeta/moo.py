"""Delay-constrained two-stage multi-objective Bayesian optimization.

The bi-objective problem trades the aggregated state value g(x(t)) against
the (negated) measurement time.  The loop:

1. *Initial-condition identification*: jointly optimize the initial
   condition and a full observation schedule whose first time is pinned to
   t0, under the minimum-delay constraint.
2. *Receding-horizon scheduling*: repeatedly optimize a schedule over the
   remaining window, execute only its first time, then re-optimize.

The acquisition is Monte-Carlo batch expected hypervolume improvement over
decoded-mean samples with common random numbers, which is monotone under
appending feasible times; that property lets the batch-size search space be
cut to the upper half-range without losing the maximum, verified exhaustively
in the test suite.

Schedules are parameterized by non-negative slack increments on top of the
minimum gaps, so every iterate of the projected-ascent search is feasible by
construction.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import odesolve, systems
from .autodiff import Node
from .errors import AcquisitionError, OptimizationError

logger = logging.getLogger(__name__)

Array = np.ndarray

_EPS_T = 1e-9  # safety margin keeping constructed gaps >= delta_t in floats


class ObjectivePoint(NamedTuple):
    g_value: float
    neg_time: float


# ---------------------------------------------------------------------------
# Pareto front and 2-D hypervolume (exact, maximize-maximize convention)
# ---------------------------------------------------------------------------

@dataclass
class ParetoFront:
    points: Array  # (m, 2), mutually non-dominated, sorted by g_value

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)


def pareto_front(points) -> ParetoFront:
    """Maximal non-dominated subset under coordinate-wise maximization,
    duplicates removed, sorted by the first objective."""
    pts = np.asarray([tuple(p) for p in points], dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return ParetoFront(np.empty((0, 2)))
    pts = np.unique(pts, axis=0)
    keep = np.ones(len(pts), dtype=bool)
    for i, p in enumerate(pts):
        if not keep[i]:
            continue
        dominated = np.all(pts >= p, axis=1) & np.any(pts > p, axis=1)
        if dominated.any():
            keep[i] = False
    front = pts[keep]
    return ParetoFront(front[np.argsort(front[:, 0])])


def hypervolume_2d(front, ref) -> float:
    """Exact dominated area relative to ``ref`` by a descending sweep over
    the first objective; points not dominating the reference contribute
    nothing (clipped)."""
    pts = front.points if isinstance(front, ParetoFront) else \
        np.asarray([tuple(p) for p in front], dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return 0.0
    r1, r2 = float(ref[0]), float(ref[1])
    if np.any((pts[:, 0] <= r1) | (pts[:, 1] <= r2)):
        logger.debug("hypervolume: clipping points that do not dominate the reference")
    order = np.argsort(-pts[:, 0])
    hv = 0.0
    level = r2
    for g, nt in pts[order]:
        if nt > level:
            hv += max(g - r1, 0.0) * (nt - level)
            level = nt
    return hv


def hvi(batch_points, front, ref) -> float:
    """Hypervolume improvement of a batch over the current front (>= 0)."""
    pts = front.points if isinstance(front, ParetoFront) else \
        np.asarray([tuple(p) for p in front], dtype=float).reshape(-1, 2)
    batch = np.asarray([tuple(p) for p in batch_points], dtype=float).reshape(-1, 2)
    merged = np.concatenate([pts, batch], axis=0) if len(pts) else batch
    return hypervolume_2d(merged, ref) - hypervolume_2d(pts, ref)


def hv_union_rows(g_rows: Array, neg_times: Array, front_pts: Array, ref) -> Array:
    """Vectorized union hypervolume per sample row.

    ``g_rows`` is (S, N): per-sample first objectives of N candidates whose
    shared second objectives are ``neg_times``.  Returns the (S,) hypervolume
    of front + candidates.  The second-objective sweep order is shared across
    samples, so the whole sweep is a handful of array ops.
    """
    g_rows = np.atleast_2d(np.asarray(g_rows, dtype=float))
    S, N = g_rows.shape
    r1, r2 = float(ref[0]), float(ref[1])
    obj2 = np.concatenate([front_pts[:, 1], np.asarray(neg_times, float)]) if len(front_pts) \
        else np.asarray(neg_times, float)
    order = np.argsort(-obj2, kind="stable")
    levels = np.maximum(obj2[order], r2)
    heights = np.concatenate([-np.diff(levels), [levels[-1] - r2]]) if len(levels) \
        else np.empty(0)
    hv = np.zeros(S)
    width = np.zeros(S)
    m = len(front_pts)
    for k, idx in enumerate(order):
        obj1 = np.full(S, front_pts[idx, 0]) if idx < m else g_rows[:, idx - m]
        width = np.maximum(width, np.maximum(obj1 - r1, 0.0))
        hv += width * heights[k]
    return hv


# ---------------------------------------------------------------------------
# qEHVI on the tape
# ---------------------------------------------------------------------------

def _hv_union_node(g_nodes: Sequence[Node], neg_time_nodes: Sequence, front_pts: Array,
                   ref, n_samples: int) -> Node:
    """Tape version of :func:`hv_union_rows`: per-sample union hypervolume of
    the front (constants) and candidate points (g per sample, shared times)."""
    r1, r2 = float(ref[0]), float(ref[1])
    items: list[tuple[object, object]] = [(float(g), float(nt)) for g, nt in front_pts]
    items += list(zip(g_nodes, neg_time_nodes))
    order = np.argsort([-float(ad.value_of(it[1])) for it in items], kind="stable")
    width = ad.constant(np.zeros(n_samples))
    hv = ad.constant(np.zeros(n_samples))
    prev_level = None
    for rank, idx in enumerate(order):
        obj1, obj2 = items[idx]
        level = ad.maximum(obj2, r2) if isinstance(obj2, Node) else max(float(obj2), r2)
        if prev_level is not None:
            # accumulated area of the slab between consecutive levels
            height = ad.sub(prev_level, level)
            hv = ad.add(hv, ad.mul(width, height))
        clipped = ad.maximum(ad.sub(obj1, r1), 0.0) if isinstance(obj1, Node) \
            else max(float(obj1) - r1, 0.0)
        width = ad.maximum(width, clipped)
        prev_level = level
    if prev_level is not None:
        hv = ad.add(hv, ad.mul(width, ad.sub(prev_level, r2)))
    return hv


def qehvi_node(adapter, g_ops: Callable[[Node], Node], x0, time_nodes: Sequence,
               front: ParetoFront, ref, noise: dict[str, Array]) -> Node:
    """Monte-Carlo batch expected hypervolume improvement as a scalar node,
    differentiable w.r.t. ``x0`` and any time passed as a node."""
    try:
        paths = adapter.mean_paths(x0, list(time_nodes), noise)
    except Exception as exc:  # surrogate failure surfaces as acquisition error
        raise AcquisitionError(f"surrogate evaluation failed: {exc}") from exc
    n_samples = paths[0].value.shape[0]
    g_nodes = [g_ops(p) for p in paths]
    neg_ts = [ad.neg(t) if isinstance(t, Node) else -float(t) for t in time_nodes]
    hv_rows = _hv_union_node(g_nodes, neg_ts, front.points, ref, n_samples)
    hv_front = hypervolume_2d(front, ref)
    return ad.add(ad.mean_axis(hv_rows, 0), -hv_front)


def qehvi(surrogate, g_ops, x0, schedule_times, front: ParetoFront, ref,
          n_mc: int = 32, rng: np.random.Generator | None = None,
          noise: dict[str, Array] | None = None) -> float:
    """Acquisition value with fresh (or supplied) common random numbers.

    Supplying ``noise`` fixes the MC draws so repeated evaluations within one
    inner optimization are deterministic and monotone under appending times.
    """
    if noise is None:
        rng = ad.make_rng(0) if rng is None else rng
        noise = surrogate.draw_noise(n_mc, rng)
    node = qehvi_node(surrogate, g_ops, x0, list(schedule_times), front, ref, noise)
    return float(node.value)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    times: Array

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)

    @property
    def n(self) -> int:
        return len(self.times)


def validate_schedule(times: Array, t_lb: float, t_max: float, delta_t: float,
                      tol: float = 1e-9) -> None:
    times = np.asarray(times, dtype=float)
    if len(times) == 0:
        return
    if times[0] < t_lb - tol or times[-1] > t_max + tol:
        raise ValueError(f"schedule leaves [{t_lb}, {t_max}]")
    gaps = np.diff(times)
    if len(gaps) and gaps.min() < delta_t - tol:
        raise ValueError(f"schedule gap {gaps.min()} violates minimum delay {delta_t}")


def _times_from_slacks(start: float, slacks: Array, delta_t: float,
                       first_fixed: float | None = None) -> Array:
    """Feasible-by-construction times: each gap is delta_t plus a
    non-negative slack (tiny nextafter bumps absorb rounding)."""
    times = [] if first_fixed is None else [float(first_fixed)]
    prev = None if first_fixed is None else times[0]
    for i, s in enumerate(slacks):
        t = (start + float(s)) if i == 0 else (prev + delta_t + float(s))
        if prev is not None:
            while t - prev < delta_t:
                t = np.nextafter(t, np.inf)
        times.append(t)
        prev = t
    return np.asarray(times)


def _project_slacks(slacks: Array, total: float) -> Array:
    """Euclidean projection onto {s >= 0, sum(s) <= total}."""
    s = np.maximum(np.asarray(slacks, dtype=float), 0.0)
    if total <= 0.0:
        return np.zeros_like(s)
    if s.sum() <= total:
        return s
    # project onto the simplex {s >= 0, sum = total} (sorted threshold rule)
    u = np.sort(s)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, len(s) + 1) > (css - total))[0][-1]
    theta = (css[rho] - total) / (rho + 1.0)
    return np.maximum(s - theta, 0.0)


def reduced_batch_range(n_max: int) -> range:
    """Upper half-range of batch sizes; for set-inclusion-monotone
    acquisitions the maximum over {1..n_max} is attained here."""
    return range(math.ceil(n_max / 2), n_max + 1)


@dataclass
class AcquisitionOptions:
    n_mc: int = 32
    n_restarts: int = 10
    max_iters: int = 100
    step: float = 0.05
    backtrack: int = 6
    grid_cells: int = 100  # surrogate solve grid for the acquisition path
    # Desk-scale shortcut: evaluate only the largest k batch sizes of the
    # reduced range (monotone acquisitions prefer larger batches anyway).
    # None = the full reduced range.
    n_batch_values: int | None = None


def _ascend(build_value, project, x0_vars: dict[str, Array], scales: dict[str, Array],
            options: AcquisitionOptions):
    """Projected gradient ascent with backtracking on a dict of variables.

    ``build_value`` maps {name: leaf Node} to a scalar node; ``project`` maps
    raw arrays back to the feasible set.  Returns (best_vars, best_value).
    """
    cur = project({k: v.copy() for k, v in x0_vars.items()})
    leaves = {k: ad.constant(v) for k, v in cur.items()}
    node = build_value(leaves)
    cur_val = float(node.value)
    step = options.step
    for _ in range(options.max_iters):
        ad.backward(node)
        grads = {k: (leaves[k].adjoint if leaves[k].adjoint is not None
                     else np.zeros_like(cur[k])) for k in cur}
        gmax = max((np.abs(g).max() for g in grads.values()), default=0.0)
        if gmax < 1e-12:
            break
        improved = False
        for _try in range(options.backtrack):
            cand = {k: cur[k] + step * scales[k] * grads[k] / gmax for k in cur}
            cand = project(cand)
            cand_leaves = {k: ad.constant(v) for k, v in cand.items()}
            cand_node = build_value(cand_leaves)
            cand_val = float(cand_node.value)
            if cand_val > cur_val + 1e-14:
                cur, cur_val = cand, cand_val
                leaves, node = cand_leaves, cand_node
                step = min(step * 1.3, 1.0)
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return cur, cur_val


def optimize_schedule(
    acq: Callable[[Sequence], Node],
    t_lb: float,
    t_max: float,
    delta_t: float,
    fix_first_at: float | None = None,
    options: AcquisitionOptions | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Schedule, float] | None:
    """Optimize observation times under the minimum-delay constraint.

    ``acq`` maps a list of time values/nodes to a scalar acquisition node.
    The batch size is enumerated over the reduced upper half-range; times are
    searched by projected ascent in the slack parameterization, so every
    returned schedule is feasible by construction.  Returns None when not
    even one observation fits (the empty-schedule signal).
    """
    options = options or AcquisitionOptions()
    rng = ad.make_rng(0) if rng is None else rng
    fixed = fix_first_at is not None
    n_max = int(math.floor((t_max - t_lb) / delta_t + 1e-12)) + (1 if fixed else 0)
    if n_max < 1:
        return None

    def schedule_for(slacks: Array) -> Array:
        start = (fix_first_at + delta_t) if fixed else t_lb
        return _times_from_slacks(start, slacks, delta_t,
                                  first_fixed=fix_first_at if fixed else None)

    candidates = list(reduced_batch_range(n_max))
    if options.n_batch_values is not None:
        candidates = candidates[-options.n_batch_values:]
    best: tuple[Schedule, float] | None = None
    for n_total in candidates:
        n_free = n_total - 1 if fixed else n_total
        if n_free == 0:
            sched = Schedule(np.array([fix_first_at]))
            val = float(acq(list(sched.times)).value)
            if best is None or val > best[1]:
                best = (sched, val)
            continue
        start = (fix_first_at + delta_t) if fixed else t_lb
        slack_total = max(t_max - start - (n_free - 1) * delta_t - _EPS_T * n_free, 0.0)

        def project(vars_):
            return {"slacks": _project_slacks(vars_["slacks"], slack_total)}

        def build(leaves):
            s = leaves["slacks"]
            times: list = [fix_first_at] if fixed else []
            t_prev = None
            for i in range(n_free):
                si = ad.reshape(ad.select_cols(ad.reshape(s, (1, n_free)), i, i + 1), ())
                if t_prev is None:
                    t_i = ad.add(start, si)
                else:
                    t_i = ad.add(t_prev, ad.add(delta_t, si))
                times.append(t_i)
                t_prev = t_i
            return acq(times)

        starts = [np.zeros(n_free)]  # minimum-gap packing from the window start
        if n_free > 1:
            spread = np.zeros(n_free)
            spread[1:] = slack_total / (n_free - 1)
            starts.append(spread)  # uniform spread across the window
        n_random = max(0, min(2, options.n_restarts - len(starts)))
        for _ in range(n_random):
            raw = rng.uniform(0, 1, size=n_free)
            starts.append(raw / max(raw.sum(), 1e-12) * slack_total * rng.uniform())

        for s0 in starts:
            vars0 = {"slacks": s0}
            scales = {"slacks": np.full(n_free, max(slack_total, delta_t))}
            sol, val = _ascend(build, project, vars0, scales, options)
            times = schedule_for(sol["slacks"])
            validate_schedule(times, t_lb, t_max, delta_t)
            if best is None or val > best[1]:
                best = (Schedule(times), val)
    return best


def optimize_initial_condition(
    acq: Callable[[Node, Sequence], Node],
    design_lower: Array,
    design_upper: Array,
    t0: float,
    t_max: float,
    delta_t: float,
    n_restarts: int = 10,
    options: AcquisitionOptions | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Array, Schedule, float]:
    """Joint search over the design variables and an observation schedule
    whose first time is pinned to t0 (the initial condition is measured the
    moment the experiment starts)."""
    options = options or AcquisitionOptions()
    rng = ad.make_rng(0) if rng is None else rng
    lo = np.asarray(design_lower, dtype=float)
    hi = np.asarray(design_upper, dtype=float)
    if np.any(hi <= lo):
        raise ValueError("design box must be non-degenerate")
    n_max = int(math.floor((t_max - t0) / delta_t + 1e-12)) + 1
    candidates = list(reduced_batch_range(n_max))
    if options.n_batch_values is not None:
        candidates = candidates[-options.n_batch_values:]
    best = None
    failures = []
    for n_total in candidates:
        n_free = n_total - 1
        start = t0 + delta_t
        slack_total = max(t_max - start - (n_free - 1) * delta_t - _EPS_T * max(n_free, 1), 0.0)

        def project(vars_):
            out = {"z": np.clip(vars_["z"], lo, hi)}
            if n_free:
                out["slacks"] = _project_slacks(vars_["slacks"], slack_total)
            return out

        def build(leaves):
            times: list = [t0]
            if n_free:
                s = leaves["slacks"]
                t_prev = None
                for i in range(n_free):
                    si = ad.reshape(ad.select_cols(ad.reshape(s, (1, n_free)), i, i + 1),
                                    ())
                    t_i = ad.add(start, si) if t_prev is None else \
                        ad.add(t_prev, ad.add(delta_t, si))
                    times.append(t_i)
                    t_prev = t_i
            return acq(leaves["z"], times)

        for r in range(n_restarts):
            z0 = (lo + hi) / 2.0 if r == 0 else rng.uniform(lo, hi)
            vars0 = {"z": z0}
            scales = {"z": hi - lo}
            if n_free:
                spread = np.zeros(n_free)
                if n_free > 1:
                    spread[1:] = slack_total / (n_free - 1)
                vars0["slacks"] = spread if r % 2 == 0 else \
                    rng.uniform(0, 1, n_free) / n_free * slack_total
                scales["slacks"] = np.full(n_free, max(slack_total, delta_t))
            try:
                sol, val = _ascend(build, project, vars0, scales, options)
            except AcquisitionError as exc:
                failures.append(str(exc))
                continue
            times = _times_from_slacks(start, sol.get("slacks", np.empty(0)), delta_t,
                                       first_fixed=t0)
            validate_schedule(times, t0, t_max, delta_t)
            if best is None or val > best[2]:
                best = (sol["z"], Schedule(times), val)
    if best is None:
        raise OptimizationError(
            f"all initial-condition restarts failed: {failures[:3]}")
    return best


# ---------------------------------------------------------------------------
# benchmark problems
# ---------------------------------------------------------------------------

def _g_first_coordinate(states: Node) -> Node:
    return ad.reshape(ad.select_cols(states, 0, 1), (states.value.shape[0],))


def _g_second_coordinate(states: Node) -> Node:
    return ad.reshape(ad.select_cols(states, 1, 2), (states.value.shape[0],))


def _g_susceptible_tradeoff(states: Node) -> Node:
    # x1 / sum(x1..x3) - 0.05 * sum(x1..x3), summed over the first three states
    x1 = ad.reshape(ad.select_cols(states, 0, 1), (states.value.shape[0],))
    total = ad.sum_axis(ad.select_cols(states, 0, 3), -1)
    return ad.sub(ad.div(x1, total), ad.scale(0.05, total))


@dataclass
class ProblemSpec:
    """One benchmark optimization instance: the hidden true system, the
    scalarization g, the design box and its mapping into the full initial
    state, the time window, the delay, and the hypervolume reference."""

    name: str
    family: str
    true_params: Array
    g_ops: Callable[[Node], Node]
    design_lower: Array
    design_upper: Array
    x0_matrix: Array  # full initial state = x0_matrix @ design
    t0: float
    t_max: float
    delta_t: float
    ref_g: float
    ref_t: float
    budget: int = 10

    def __post_init__(self):
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")

    @property
    def reference(self) -> ObjectivePoint:
        # the table stores (g, t); hypervolume runs in (g, -t) space
        return ObjectivePoint(self.ref_g, -self.ref_t)

    def x0_from_design(self, z):
        if isinstance(z, Node):
            return ad.matmul(self.x0_matrix, z)
        return self.x0_matrix @ np.asarray(z, dtype=float)

    def g_np(self, states: Array) -> Array:
        return self.g_ops(ad.constant(np.atleast_2d(states))).value

    def true_system(self) -> systems.SystemSample:
        fam = systems.get_family(self.family)
        return systems.SystemSample(fam, self.true_params, fam.rhs_np(self.true_params))


def _problem_registry() -> dict[str, ProblemSpec]:
    eye2, eye3 = np.eye(2), np.eye(3)
    sir_map = np.array([[1.0], [0.1], [0.0]])
    sird_map = np.array([[1.0], [0.1], [0.0], [0.0]])
    return {
        "lv2": ProblemSpec("lv2", "lv2", np.array([0.5, 1.2, 1.0, 1.5]),
                           _g_first_coordinate, np.array([0.1, 0.1]), np.array([2.0, 2.0]),
                           eye2, 0.0, 15.0, 1.5, -1.771, 12.686),
        "brusselator": ProblemSpec("brusselator", "brusselator", np.array([0.8, 1.5]),
                                   _g_first_coordinate, np.array([0.1, 0.1]),
                                   np.array([2.0, 2.0]), eye2, 0.0, 15.0, 1.5,
                                   -1.467, 3.887),
        "selkov": ProblemSpec("selkov", "selkov", np.array([0.25, 0.45]),
                              _g_second_coordinate, np.array([0.1, 0.1]),
                              np.array([0.5, 0.5]), eye2, 0.0, 10.0, 1.0,
                              -0.474, 5.440),
        "sir": ProblemSpec("sir", "sir", np.array([1.5, 5.0]),
                           _g_susceptible_tradeoff, np.array([10.0]), np.array([30.0]),
                           sir_map, 0.0, 1.0, 0.1, 0.51151, 0.79646),
        "lv3": ProblemSpec("lv3", "lv3",
                           np.array([0.5, 1.2, 1.0, 1.5, 0.5, 1.2, 1.0, 1.5]),
                           _g_first_coordinate, np.array([0.0, 0.0, 0.0]),
                           np.array([2.0, 2.0, 2.0]), eye3, 0.0, 15.0, 1.5,
                           -1.7557, 13.1687),
        "sird": ProblemSpec("sird", "sird", np.array([1.0, 0.5, 1.0]),
                            _g_susceptible_tradeoff, np.array([10.0]), np.array([30.0]),
                            sird_map, 0.0, 1.0, 0.1, 0.52198, 1.04),
    }


PROBLEMS = _problem_registry()


def benchmark_problem(name: str) -> ProblemSpec:
    try:
        return PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown benchmark problem {name!r}; known: {sorted(PROBLEMS)}") from None


def _advance_lower_bound(t_last: float, delta_t: float) -> float:
    """Next admissible observation time after ``t_last``; bumped by ulps so
    the delay bound holds under float comparison."""
    t_lb = t_last + delta_t
    while t_lb - t_last < delta_t:
        t_lb = np.nextafter(t_lb, np.inf)
    return t_lb


def make_observer(problem: ProblemSpec, rtol: float = 1e-8, atol: float = 1e-8):
    """Measurement of the hidden true system: evolve x0 to time t."""
    system = problem.true_system()

    def observer(x0: Array, t: float) -> Array:
        if t <= problem.t0:
            return np.asarray(x0, dtype=float)
        res = odesolve.solve_adaptive(system.field, np.asarray(x0, float),
                                      [problem.t0, t], rtol, atol)
        if res.status is not odesolve.SolveStatus.Ok or len(res.states) < 2:
            raise AcquisitionError(f"observer failed to evolve to t={t}")
        return res.states[-1]

    return observer


# ---------------------------------------------------------------------------
# the optimization loop
# ---------------------------------------------------------------------------

@dataclass
class BOState:
    """Everything the loop carries between decisions."""

    trajectories: list[dict] = field(default_factory=list)  # {x0, times, states}
    objective_points: list[ObjectivePoint] = field(default_factory=list)
    front: ParetoFront = field(default_factory=lambda: ParetoFront(np.empty((0, 2))))
    t_lb: float = 0.0
    remaining_budget: int = 0
    trajectory_counter: int = 0

    def known_triples(self):
        return [(tr["x0"], np.asarray(tr["times"]), np.asarray(tr["states"]))
                for tr in self.trajectories]


def run_bo(
    problem: ProblemSpec,
    surrogate_factory,
    observer,
    budget: int | None = None,
    rng: np.random.Generator | None = None,
    options: AcquisitionOptions | None = None,
    policy: str = "qehvi",
) -> list[dict]:
    """Two-stage delay-constrained BO over ``budget`` queried trajectories.

    Starts from one random trajectory with uniformly spaced observations,
    then per trajectory: identify the initial condition jointly with a full
    schedule (first observation at t0), and schedule the remaining
    observations receding-horizon style, executing only the first time of
    each re-optimized schedule.  ``policy='random'`` replaces both decisions
    with uniform draws (the non-adaptive baseline); the surrogate factory may
    then be None.

    Returns one history record per observation with the running hypervolume
    of all observed objective points.
    """
    options = options or AcquisitionOptions()
    rng = ad.make_rng(0) if rng is None else rng
    budget = problem.budget if budget is None else budget
    if policy not in ("qehvi", "random"):
        raise ValueError("policy must be 'qehvi' or 'random'")
    if policy == "qehvi" and surrogate_factory is None:
        raise ValueError("qehvi policy requires a surrogate factory")

    state = BOState(t_lb=problem.t0, remaining_budget=budget)
    history: list[dict] = []

    def record(traj_id, q_idx, t, x, acq_value):
        g_val = float(problem.g_np(np.asarray(x))[0])
        point = ObjectivePoint(g_val, -float(t))
        state.objective_points.append(point)
        state.front = pareto_front(state.objective_points)
        entry = {
            "trajectory_id": traj_id,
            "query_index": q_idx,
            "t": float(t),
            "state": [float(v) for v in np.asarray(x)],
            "g_value": g_val,
            "neg_time": -float(t),
            "running_hypervolume": hypervolume_2d(state.front, problem.reference),
            "acq_value": None if acq_value is None else float(acq_value),
            "wall_ms": (time.perf_counter() - t_start) * 1e3,
        }
        history.append(entry)

    t_start = time.perf_counter()

    # seed trajectory: random x0, uniformly spaced observations
    n_seed = int(math.floor((problem.t_max - problem.t0) / problem.delta_t + 1e-12)) + 1
    seed_times = problem.t0 + problem.delta_t * np.arange(n_seed)
    z0 = rng.uniform(problem.design_lower, problem.design_upper)
    x0 = problem.x0_from_design(z0)
    traj = {"x0": x0, "times": [], "states": []}
    state.trajectories.append(traj)
    for qi, t in enumerate(seed_times):
        x = observer(x0, float(t))
        traj["times"].append(float(t))
        traj["states"].append(x)
        record(0, qi, t, x, None)

    for n in range(1, budget + 1):
        known = state.known_triples()
        if policy == "qehvi":
            adapter = surrogate_factory(known, None, None)
            noise = adapter.draw_noise(options.n_mc, rng)

            def acq_stage1(z_node, times):
                x0_node = problem.x0_from_design(z_node)
                return qehvi_node(adapter, problem.g_ops, x0_node, times,
                                  state.front, problem.reference, noise)

            z_star, sched, acq_val = optimize_initial_condition(
                acq_stage1, problem.design_lower, problem.design_upper,
                problem.t0, problem.t_max, problem.delta_t,
                n_restarts=options.n_restarts, options=options, rng=rng)
        else:
            z_star = rng.uniform(problem.design_lower, problem.design_upper)
            acq_val = None
        x0_star = problem.x0_from_design(z_star)

        traj = {"x0": x0_star, "times": [], "states": []}
        state.trajectories.append(traj)
        try:
            x = observer(x0_star, problem.t0)
        except AcquisitionError as exc:
            logger.warning("observer failed on trajectory %d: %s", n, exc)
            continue
        traj["times"].append(problem.t0)
        traj["states"].append(x)
        record(n, 0, problem.t0, x, acq_val)

        t_lb = _advance_lower_bound(problem.t0, problem.delta_t)
        q_idx = 1
        while int(math.floor((problem.t_max - t_lb) / problem.delta_t + 1e-12)) >= 1:
            n_traj = int(math.floor((problem.t_max - t_lb) / problem.delta_t + 1e-12))
            if policy == "qehvi":
                adapter = surrogate_factory(known, np.asarray(traj["times"]),
                                            np.asarray(traj["states"]))
                noise = adapter.draw_noise(options.n_mc, rng)

                def acq_inner(times):
                    return qehvi_node(adapter, problem.g_ops, x0_star, times,
                                      state.front, problem.reference, noise)

                result = optimize_schedule(acq_inner, t_lb, problem.t_max,
                                           problem.delta_t, options=options, rng=rng)
                if result is None:
                    break
                sched, acq_val = result
                t_next = float(sched.times[0])
            else:
                t_next = float(rng.uniform(t_lb, problem.t_max))
                acq_val = None
            try:
                x = observer(x0_star, t_next)
            except AcquisitionError as exc:
                logger.warning("observer failed at t=%g: %s", t_next, exc)
                break
            traj["times"].append(t_next)
            traj["states"].append(x)
            record(n, q_idx, t_next, x, acq_val)
            q_idx += 1
            t_lb = _advance_lower_bound(t_next, problem.delta_t)
        state.trajectory_counter = n
        state.remaining_budget = budget - n
        state.t_lb = t_lb

    return history
