"""Task distributions over ODE systems.

Each family bundles its kinetic equations, the uniform priors its parameters
are drawn from, and the box its initial conditions are drawn from.  Two
evaluation routes exist for every parametric family: a vectorized numpy
right-hand side (ground-truth solves) and a tape right-hand side (used when
gradients must flow through the kinetics, e.g. the physics-informed model).

The non-parametric family draws vector fields from a GP prior via random
Fourier features, one independent feature set per output dimension.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import odesolve
from .autodiff import Node
from .errors import DimensionError, SolverFailure

logger = logging.getLogger(__name__)

Array = np.ndarray


# ---------------------------------------------------------------------------
# kinetic right-hand sides
# ---------------------------------------------------------------------------

def _lv2_np(p):
    a, b, d_, g = p

    def rhs(x, t):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([a * x1 - b * x1 * x2, d_ * x1 * x2 - g * x2], axis=-1)

    return rhs


def _lv2_ops(x: Node, t, u: Node) -> Node:
    x1, x2 = ad.select_cols(x, 0, 1), ad.select_cols(x, 1, 2)
    a, b = ad.select_cols(u, 0, 1), ad.select_cols(u, 1, 2)
    d_, g = ad.select_cols(u, 2, 3), ad.select_cols(u, 3, 4)
    x12 = ad.mul(x1, x2)
    return ad.concat_cols([
        ad.sub(ad.mul(a, x1), ad.mul(b, x12)),
        ad.sub(ad.mul(d_, x12), ad.mul(g, x2)),
    ])


def _lv3_np(p):
    a, b, d_, g, e, z, eta, th = p

    def rhs(x, t):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([
            a * x1 - b * x1 * x2 - e * x1 * x3,
            d_ * x2 * x1 - g * x2 - z * x2 * x3,
            eta * x3 * x2 - th * x3,
        ], axis=-1)

    return rhs


def _lv3_ops(x: Node, t, u: Node) -> Node:
    x1, x2, x3 = (ad.select_cols(x, i, i + 1) for i in range(3))
    a, b, d_, g, e, z, eta, th = (ad.select_cols(u, i, i + 1) for i in range(8))
    return ad.concat_cols([
        ad.sub(ad.sub(ad.mul(a, x1), ad.mul(b, ad.mul(x1, x2))), ad.mul(e, ad.mul(x1, x3))),
        ad.sub(ad.sub(ad.mul(d_, ad.mul(x2, x1)), ad.mul(g, x2)), ad.mul(z, ad.mul(x2, x3))),
        ad.sub(ad.mul(eta, ad.mul(x3, x2)), ad.mul(th, x3)),
    ])


def _brusselator_np(p):
    a, b = p

    def rhs(x, t):
        x1, x2 = x[..., 0], x[..., 1]
        sq = x1 * x1 * x2
        return np.stack([a + sq - (b + 1.0) * x1, b * x1 - sq], axis=-1)

    return rhs


def _brusselator_ops(x: Node, t, u: Node) -> Node:
    x1, x2 = ad.select_cols(x, 0, 1), ad.select_cols(x, 1, 2)
    a, b = ad.select_cols(u, 0, 1), ad.select_cols(u, 1, 2)
    sq = ad.mul(ad.square(x1), x2)
    return ad.concat_cols([
        ad.sub(ad.add(a, sq), ad.mul(ad.add(b, 1.0), x1)),
        ad.sub(ad.mul(b, x1), sq),
    ])


def _selkov_np(p):
    a, b = p

    def rhs(x, t):
        x1, x2 = x[..., 0], x[..., 1]
        sq = x1 * x1 * x2
        return np.stack([-x1 + a * x2 + sq, b - a * x2 - sq], axis=-1)

    return rhs


def _selkov_ops(x: Node, t, u: Node) -> Node:
    x1, x2 = ad.select_cols(x, 0, 1), ad.select_cols(x, 1, 2)
    a, b = ad.select_cols(u, 0, 1), ad.select_cols(u, 1, 2)
    sq = ad.mul(ad.square(x1), x2)
    ax2 = ad.mul(a, x2)
    return ad.concat_cols([
        ad.add(ad.sub(ax2, x1), sq),
        ad.sub(ad.sub(b, ax2), sq),
    ])


def _sir_np(p):
    beta, gamma = p

    def rhs(x, t):
        s, i = x[..., 0], x[..., 1]
        inf = beta * s * i
        rec = gamma * i
        return np.stack([-inf, inf - rec, rec], axis=-1)

    return rhs


def _sir_ops(x: Node, t, u: Node) -> Node:
    s, i = ad.select_cols(x, 0, 1), ad.select_cols(x, 1, 2)
    beta, gamma = ad.select_cols(u, 0, 1), ad.select_cols(u, 1, 2)
    inf = ad.mul(beta, ad.mul(s, i))
    rec = ad.mul(gamma, i)
    return ad.concat_cols([ad.neg(inf), ad.sub(inf, rec), rec])


def _sird_np(p):
    beta, gamma, mu = p

    def rhs(x, t):
        s, i = x[..., 0], x[..., 1]
        inf = beta * s * i
        rec = gamma * i
        dth = mu * i
        return np.stack([-inf, inf - rec - dth, rec, dth], axis=-1)

    return rhs


def _sird_ops(x: Node, t, u: Node) -> Node:
    s, i = ad.select_cols(x, 0, 1), ad.select_cols(x, 1, 2)
    beta, gamma, mu = (ad.select_cols(u, k, k + 1) for k in range(3))
    inf = ad.mul(beta, ad.mul(s, i))
    rec = ad.mul(gamma, i)
    dth = ad.mul(mu, i)
    return ad.concat_cols([ad.neg(inf), ad.sub(inf, ad.add(rec, dth)), rec, dth])


# ---------------------------------------------------------------------------
# family registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemFamily:
    """A parametric distribution over dynamical systems."""

    name: str
    state_dim: int
    parameter_names: tuple[str, ...]
    parameter_support: Array  # (2, P): [lower; upper]
    x0_lower: Array
    x0_upper: Array
    t0: float
    t_max: float
    rhs_np: Callable | None = None
    rhs_ops: Callable | None = None

    def __post_init__(self):
        lo, hi = self.parameter_support
        if self.parameter_names and not np.all(lo < hi):
            raise ValueError("parameter support bounds must satisfy lower < upper")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("parameter support bounds must be finite")

    @property
    def n_params(self) -> int:
        return len(self.parameter_names)


def _family(name, names, lo, hi, x0_lo, x0_hi, t_max, rhs_np, rhs_ops, state_dim):
    return SystemFamily(
        name=name,
        state_dim=state_dim,
        parameter_names=tuple(names),
        parameter_support=np.array([lo, hi], dtype=float),
        x0_lower=np.asarray(x0_lo, dtype=float),
        x0_upper=np.asarray(x0_hi, dtype=float),
        t0=0.0,
        t_max=float(t_max),
        rhs_np=rhs_np,
        rhs_ops=rhs_ops,
    )


FAMILIES: dict[str, SystemFamily] = {
    "lv2": _family(
        "lv2", ("alpha", "beta", "delta", "gamma"),
        [1 / 3, 1.0, 0.5, 0.5], [1.0, 2.0, 1.5, 1.5],
        [0.1, 0.1], [3.0, 3.0], 15.0, _lv2_np, _lv2_ops, 2),
    "lv3": _family(
        "lv3", ("alpha", "beta", "delta", "gamma", "epsilon", "zeta", "eta", "theta"),
        [1 / 3, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        [1.0, 2.0, 1.5, 1.5, 1.5, 1.5, 1.5, 1.5],
        [0.1, 0.1, 0.1], [3.0, 3.0, 3.0], 15.0, _lv3_np, _lv3_ops, 3),
    "brusselator": _family(
        "brusselator", ("A", "B"),
        [0.0, 0.1], [1.0, 3.0],
        [0.1, 0.1], [2.0, 2.0], 15.0, _brusselator_np, _brusselator_ops, 2),
    # Training ranges for this family are package defaults, chosen around the
    # benchmark instance (a=0.25, b=0.45); see config docs.
    "selkov": _family(
        "selkov", ("a", "b"),
        [0.05, 0.3], [0.3, 0.7],
        [0.1, 0.1], [0.5, 0.5], 10.0, _selkov_np, _selkov_ops, 2),
    "sir": _family(
        "sir", ("beta", "gamma"),
        [0.1, 0.1], [2.0, 10.0],
        [1.0, 0.01, 0.0], [3.0, 0.01, 0.0], 1.0, _sir_np, _sir_ops, 3),
    "sird": _family(
        "sird", ("beta", "gamma", "mu"),
        [0.5, 0.1, 0.1], [2.0, 10.0, 5.0],
        [10.0, 0.01, 0.0, 0.0], [30.0, 0.01, 0.0, 0.0], 1.0, _sird_np, _sird_ops, 4),
    "gp_field": SystemFamily(
        name="gp_field", state_dim=2, parameter_names=(),
        parameter_support=np.zeros((2, 0)),
        x0_lower=np.array([-2.0, -2.0]), x0_upper=np.array([2.0, 2.0]),
        t0=0.0, t_max=5.0),
}

GP_FIELD_LENGTHSCALE = 0.8
GP_FIELD_SIGNAL_VARIANCE = 1.0
GP_FIELD_N_FEATURES = 128


def get_family(name: str) -> SystemFamily:
    try:
        return FAMILIES[name]
    except KeyError:
        raise KeyError(f"unknown system family {name!r}; known: {sorted(FAMILIES)}") from None


# ---------------------------------------------------------------------------
# sampled systems
# ---------------------------------------------------------------------------

@dataclass
class RFFField:
    """A draw from a GP vector-field prior via random Fourier features.

    Output dimension ``d`` has its own feature set (no cross-output
    correlation): ``f_d(x) = sum_j w_dj sqrt(2 s2 / J) cos(w_dj . x + b_dj)``.
    """

    frequencies: Array  # (d_out, J, d_in)
    phases: Array       # (d_out, J)
    amplitudes: Array   # (d_out, J) -- standard-normal weights
    lengthscale: float
    signal_variance: float

    def __call__(self, x: Array, t: float = 0.0) -> Array:
        x = np.asarray(x, dtype=float)
        d_out, n_feat, _ = self.frequencies.shape
        coef = np.sqrt(2.0 * self.signal_variance / n_feat)
        proj = np.einsum("...i,dji->...dj", x, self.frequencies) + self.phases
        return coef * np.einsum("...dj,dj->...d", np.cos(proj), self.amplitudes)


def sample_rff_field(
    state_dim: int,
    n_features: int,
    lengthscale: float,
    signal_variance: float,
    rng: np.random.Generator,
) -> RFFField:
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    freqs = rng.normal(scale=1.0 / lengthscale, size=(state_dim, n_features, state_dim))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(state_dim, n_features))
    weights = rng.normal(size=(state_dim, n_features))
    return RFFField(freqs, phases, weights, float(lengthscale), float(signal_variance))


@dataclass
class SystemSample:
    """One realization of a family: parameters plus the evaluable field."""

    family: SystemFamily
    parameters: Array
    field: Callable  # (x, t) -> dx/dt, numpy, batch-vectorized
    rff: RFFField | None = None


def sample_system(family: SystemFamily | str, rng: np.random.Generator) -> SystemSample:
    fam = get_family(family) if isinstance(family, str) else family
    if fam.name == "gp_field":
        rff = sample_rff_field(fam.state_dim, GP_FIELD_N_FEATURES,
                               GP_FIELD_LENGTHSCALE, GP_FIELD_SIGNAL_VARIANCE, rng)
        return SystemSample(fam, np.zeros(0), rff, rff=rff)
    lo, hi = fam.parameter_support
    params = rng.uniform(lo, hi)
    return SystemSample(fam, params, fam.rhs_np(params))


def eval_field(system: SystemSample, x: Array, t: float = 0.0) -> Array:
    """Exact kinetic right-hand side of a sampled system."""
    return system.field(np.asarray(x, dtype=float), t)


def ops_field(system_or_family, u: Node) -> Callable[[Node, object], Node]:
    """Tape right-hand side of a parametric family with per-row parameters
    ``u`` of shape (batch, n_params)."""
    fam = system_or_family.family if isinstance(system_or_family, SystemSample) else (
        get_family(system_or_family) if isinstance(system_or_family, str) else system_or_family)
    if fam.rhs_ops is None:
        raise ValueError(f"family {fam.name!r} has no parametric kinetic form")
    return lambda x, t: fam.rhs_ops(x, t, u)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Ordered observations of one initial condition."""

    x0: Array
    times: Array
    states: Array  # (len(times), state_dim)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape[0] != self.times.shape[0]:
            raise DimensionError("times and states must align")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.allclose(self.states[0], self.x0):
            raise ValueError("first state must equal x0")


def default_grid(family: SystemFamily, n_grid: int = 100) -> Array:
    return np.linspace(family.t0, family.t_max, n_grid)


def sample_x0(family: SystemFamily, rng: np.random.Generator, n: int = 1) -> Array:
    return rng.uniform(family.x0_lower, family.x0_upper, size=(n, family.state_dim))


def generate_trajectories(
    system: SystemSample,
    n_x0: int,
    t_grid: Array | None = None,
    rng: np.random.Generator | None = None,
    rtol: float = 1e-5,
    atol: float = 1e-5,
    max_resample: int = 20,
) -> list[Trajectory]:
    """Solve ``n_x0`` initial conditions of one system on a shared time grid.

    Initial conditions are drawn from the family's box.  All solves share
    adaptive steps (error controlled over the whole batch); a diverging batch
    falls back to per-trajectory solves where failed draws are replaced by a
    fresh initial condition (counted in the log).
    """
    fam = system.family
    rng = ad.make_rng(0) if rng is None else rng
    grid = default_grid(fam) if t_grid is None else np.asarray(t_grid, dtype=float)
    x0s = sample_x0(fam, rng, n_x0)

    result = odesolve.solve_adaptive(system.field, x0s, grid, rtol, atol)
    if result.status is odesolve.SolveStatus.Ok and len(result.states) == len(grid):
        stacked = np.stack(result.states)  # (G, n_x0, d)
        return [Trajectory(x0s[i], grid, stacked[:, i]) for i in range(n_x0)]

    trajectories = []
    resampled = 0
    for i in range(n_x0):
        x0 = x0s[i]
        for attempt in range(max_resample + 1):
            res = odesolve.solve_adaptive(system.field, x0, grid, rtol, atol)
            if res.status is odesolve.SolveStatus.Ok and len(res.states) == len(grid):
                trajectories.append(Trajectory(x0, grid, np.stack(res.states)))
                break
            resampled += 1
            x0 = sample_x0(fam, rng, 1)[0]
        else:
            raise SolverFailure(
                f"could not generate a finite trajectory for {fam.name} "
                f"after {max_resample} resamples")
    if resampled:
        logger.info("resampled %d divergent initial conditions (%s)", resampled, fam.name)
    return trajectories


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class EpisodeConfig:
    m_known_min: int = 0
    m_known_max: int = 10
    ctx_points_min: int = 1
    ctx_points_max: int = 10
    extra_target_min: int = 0
    extra_target_max: int = 45
    forecast_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.forecast_prob <= 1.0:
            raise ValueError("forecast_prob must lie in [0, 1]")


@dataclass
class EpisodeTrajectory:
    """One trajectory's role in an episode, as masks over its grid."""

    x0: Array
    times: Array
    states: Array
    context_mask: Array  # bool, observed points
    target_mask: Array   # bool, superset of context_mask

    def __post_init__(self):
        if np.any(self.context_mask & ~self.target_mask):
            raise ValueError("context mask must be a subset of the target mask")


@dataclass
class Episode:
    """One meta-learning task instance (the unit the loss is computed on)."""

    context_trajectories: list[EpisodeTrajectory]
    new_trajectory: EpisodeTrajectory
    forecast: bool

    def __post_init__(self):
        if self.forecast:
            ctx = np.flatnonzero(self.new_trajectory.context_mask)
            if len(ctx) != 1 or ctx[0] != 0:
                raise ValueError("forecast episodes observe exactly the initial point")


def _draw_masks(rng, n_grid, n_ctx, n_extra, include_initial):
    ctx = np.zeros(n_grid, dtype=bool)
    pool = np.arange(1, n_grid) if include_initial else np.arange(n_grid)
    if include_initial:
        ctx[0] = True
    n_ctx = min(n_ctx, len(pool))
    picked = rng.choice(pool, size=n_ctx, replace=False) if n_ctx else np.empty(0, int)
    ctx[picked] = True
    tgt = ctx.copy()
    remaining = np.flatnonzero(~tgt)
    n_extra = min(n_extra, len(remaining))
    extra = rng.choice(remaining, size=n_extra, replace=False) if n_extra else np.empty(0, int)
    tgt[extra] = True
    return ctx, tgt


def sample_episode(
    trajectory_set: Sequence[Trajectory],
    config: EpisodeConfig,
    rng: np.random.Generator,
) -> Episode:
    """Draw one episode from a set of trajectories of a single system.

    The number of known trajectories, per-trajectory context/target sizes and
    the forecast indicator are all sampled; requested sizes larger than the
    grid are clamped (logged at debug level).  Requires at least
    ``m_known_max + 1`` trajectories so the new trajectory is always distinct
    from the known ones.
    """
    cfg = config
    if len(trajectory_set) < cfg.m_known_max + 1:
        raise ValueError("trajectory_set must hold at least m_known_max + 1 trajectories")
    n_grid = len(trajectory_set[0].times)
    m = int(rng.integers(cfg.m_known_min, cfg.m_known_max + 1))
    chosen = rng.choice(len(trajectory_set), size=m + 1, replace=False)
    known_idx, new_idx = chosen[:m], chosen[m]

    known = []
    for idx in known_idx:
        traj = trajectory_set[idx]
        n_ctx = int(rng.integers(cfg.ctx_points_min, cfg.ctx_points_max + 1))
        n_extra = int(rng.integers(cfg.extra_target_min, cfg.extra_target_max + 1))
        if n_ctx + n_extra > n_grid:
            logger.debug("clamping episode sizes to grid length %d", n_grid)
        ctx, tgt = _draw_masks(rng, n_grid, n_ctx, n_extra, include_initial=False)
        known.append(EpisodeTrajectory(traj.x0, traj.times, traj.states, ctx, tgt))

    forecast = bool(rng.uniform() < cfg.forecast_prob)
    traj = trajectory_set[new_idx]
    n_ctx = int(rng.integers(cfg.ctx_points_min, cfg.ctx_points_max + 1))
    n_extra = int(rng.integers(cfg.extra_target_min, cfg.extra_target_max + 1))
    ctx, tgt = _draw_masks(rng, n_grid, n_ctx, n_ctx + n_extra if forecast else n_extra,
                           include_initial=True)
    if forecast:
        # all sampled points become prediction-only targets
        ctx = np.zeros(n_grid, dtype=bool)
        ctx[0] = True
    new = EpisodeTrajectory(traj.x0, traj.times, traj.states, ctx, tgt)
    return Episode(known, new, forecast)


# ---------------------------------------------------------------------------
# dataset serialization
# ---------------------------------------------------------------------------

DATASET_FORMAT = 1


def save_trajectories(path, family: SystemFamily, seed: int, trajectories: Sequence[Trajectory]) -> None:
    """Columnar cache file: a JSON header line, then one CSV row per
    observation: trajectory_id, t, x_1..x_d (full double precision)."""
    header = {
        "format": DATASET_FORMAT,
        "family": family.name,
        "seed": int(seed),
        "state_dim": family.state_dim,
        "n_grid": len(trajectories[0].times) if trajectories else 0,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for tid, traj in enumerate(trajectories):
            for t, x in zip(traj.times, traj.states):
                cols = [str(tid), repr(float(t))] + [repr(float(v)) for v in x]
                fh.write(",".join(cols) + "\n")


def load_trajectories(path) -> tuple[dict, list[Trajectory]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"unsupported dataset format {header.get('format')!r}")
        rows: dict[int, list[list[float]]] = {}
        for line in fh:
            parts = line.strip().split(",")
            rows.setdefault(int(parts[0]), []).append([float(v) for v in parts[1:]])
    trajectories = []
    for tid in sorted(rows):
        arr = np.array(rows[tid])
        trajectories.append(Trajectory(arr[0, 1:], arr[:, 0], arr[:, 1:]))
    return header, trajectories
