"""Probabilistic trajectory surrogates sharing one predictive interface.

Four model kinds:

``multi_nodep``
    Latent-ODE process conditioned on a *set* of trajectories.  Every context
    observation is embedded together with its trajectory's initial condition
    so trajectories with crossing states stay distinguishable; mean pooling
    over all observations of all trajectories yields the posterior over a
    time-invariant dynamics code, while the latent initial state is inferred
    from the new trajectory's initial observation alone.
``nodep``
    The single-trajectory latent-ODE process: unaugmented context pooling,
    both latents from the same pooled representation.
``np``
    A plain neural process over (initial condition, time) inputs -- same
    encoder and pooling but the decoder maps [x0, t, z] directly, no solver.
``pi_nodep``
    Physics-informed variant: the latent ODE is replaced by the family's
    known kinetic form, the latent state *is* the physical state, the encoder
    emits a log-normal posterior over the kinetic parameters, and the decoder
    only predicts the observation scale.

All decoders and posterior scale heads use ``sigma_lb + 0.9 * softplus(.)``
so standard deviations stay bounded away from zero, and every activation is
continuously differentiable so model outputs can be differentiated w.r.t.
both time and the initial condition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import odesolve, systems
from .autodiff import DiagonalGaussian, Node
from .errors import DimensionError, EvaluationError

logger = logging.getLogger(__name__)

Array = np.ndarray

MODEL_KINDS = ("np", "nodep", "multi_nodep", "pi_nodep")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelHyperparams:
    state_dim: int
    enc_width: int = 50
    hidden: int = 50
    latent_dim: int = 10
    dynamics_dim: int = 45
    ode_hidden: int = 50
    decoder_hidden: int = 50
    sigma_lb: float = 0.1
    augment_x0: bool = True  # disable for the no-initial-condition ablation
    n_kinetic_params: int = 0  # pi_nodep only

    def __post_init__(self):
        if self.sigma_lb <= 0:
            raise ValueError("sigma_lb must be positive")


@dataclass
class ModelParameters:
    """Named weight collection; immutable snapshot (updates build new dicts)."""

    kind: str
    hyper: ModelHyperparams
    weights: dict[str, Array]
    family: str | None = None  # required for pi_nodep
    version: int = CHECKPOINT_VERSION
    train_seed: int | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}")
        if self.kind == "pi_nodep" and self.family is None:
            raise ValueError("pi_nodep parameters must name their kinetic family")
        for name, w in self.weights.items():
            if not np.all(np.isfinite(w)):
                raise ValueError(f"non-finite weights in {name!r}")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _xavier(rng, n_out, n_in):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def _init_block(weights, rng, name, widths):
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        weights[f"{name}.{i}.w"] = _xavier(rng, n_out, n_in)
        weights[f"{name}.{i}.b"] = np.zeros(n_out)


def init_parameters(
    kind: str,
    state_dim: int,
    rng: np.random.Generator,
    hyper: ModelHyperparams | None = None,
    family: str | None = None,
) -> ModelParameters:
    if kind not in MODEL_KINDS:
        raise ValueError(f"kind must be one of {MODEL_KINDS}")
    if hyper is None:
        hyper = ModelHyperparams(state_dim=state_dim)
    elif hyper.state_dim != state_dim:
        raise ValueError("hyper.state_dim disagrees with state_dim")
    d, r, h = state_dim, hyper.enc_width, hyper.hidden
    lat, dyn = hyper.latent_dim, hyper.dynamics_dim

    if kind == "pi_nodep":
        fam = systems.get_family(family)
        hyper = replace(hyper, n_kinetic_params=fam.n_params)
        dyn = fam.n_params

    w: dict[str, Array] = {}
    ctx_in = (2 * d + 1) if (hyper.augment_x0 and kind != "nodep") else (d + 1)
    _init_block(w, rng, "ctx_enc", [ctx_in, r, r, r])
    _init_block(w, rng, "sys_hidden", [r, h])
    if kind == "np":
        z_dim = lat + dyn  # total latent parity with the ODE-based kinds
        _init_block(w, rng, "u_mean", [h, z_dim])
        _init_block(w, rng, "u_sigma", [h, z_dim])
        _init_block(w, rng, "dec_hidden", [d + 1 + z_dim, hyper.decoder_hidden])
    else:
        _init_block(w, rng, "u_mean", [h, dyn])
        _init_block(w, rng, "u_sigma", [h, dyn])
    if kind == "multi_nodep":
        _init_block(w, rng, "init_enc", [d + 1, r, r, r])
        _init_block(w, rng, "init_hidden", [r, h])
    if kind in ("multi_nodep", "nodep"):
        _init_block(w, rng, "l0_mean", [h, lat])
        _init_block(w, rng, "l0_sigma", [h, lat])
        _init_block(w, rng, "ode", [lat + dyn + 1, hyper.ode_hidden, hyper.ode_hidden, lat])
        _init_block(w, rng, "dec_hidden", [lat + dyn + 1, hyper.decoder_hidden])
        _init_block(w, rng, "dec_mean", [hyper.decoder_hidden, d])
    if kind == "np":
        _init_block(w, rng, "dec_mean", [hyper.decoder_hidden, d])
    if kind == "pi_nodep":
        _init_block(w, rng, "dec_hidden", [d + dyn + 1, hyper.decoder_hidden])
    _init_block(w, rng, "dec_sigma", [hyper.decoder_hidden, d])
    return ModelParameters(kind, hyper, w, family=family)


# ---------------------------------------------------------------------------
# context containers
# ---------------------------------------------------------------------------

@dataclass
class ContextSet:
    """Observed data the model conditions on.

    ``known`` holds (x0, times, states) triples for previously observed
    trajectories.  ``new_times``/``new_states`` are the observed points of
    the trajectory being predicted; the first entry is its initial
    observation (t0, x0).
    """

    known: list[tuple[Array, Array, Array]]
    new_times: Array
    new_states: Array

    def __post_init__(self):
        self.new_times = np.atleast_1d(np.asarray(self.new_times, dtype=float))
        self.new_states = np.atleast_2d(np.asarray(self.new_states, dtype=float))
        if len(self.new_times) != len(self.new_states):
            raise DimensionError("new_times and new_states must align")
        if len(self.new_times) == 0:
            raise ValueError("the new trajectory always contributes its initial observation")

    @property
    def new_x0(self) -> Array:
        return self.new_states[0]

    @property
    def t0(self) -> float:
        return float(self.new_times[0])


def make_context(
    known: Sequence | None = None,
    x0_new: Array | None = None,
    t0: float = 0.0,
    new_times: Array | None = None,
    new_states: Array | None = None,
) -> ContextSet:
    """Build a :class:`ContextSet` from trajectories and/or a bare initial
    condition (forecast conditioning)."""
    known_triples = []
    for traj in known or []:
        if isinstance(traj, systems.Trajectory):
            known_triples.append((traj.x0, traj.times, traj.states))
        else:
            x0, ts, xs = traj
            known_triples.append((np.asarray(x0, float), np.asarray(ts, float),
                                  np.asarray(xs, float)))
    if new_times is None:
        if x0_new is None:
            raise ValueError("either x0_new or explicit new observations are required")
        new_times = np.array([t0])
        new_states = np.asarray(x0_new, dtype=float).reshape(1, -1)
    return ContextSet(known_triples, new_times, new_states)


@dataclass
class EncoderOutput:
    r_sys: Node
    h_sys: Node
    q_u: DiagonalGaussian
    r_init: Node | None = None
    h_init: Node | None = None
    q_l0: DiagonalGaussian | None = None


@dataclass
class PredictiveSamples:
    """Decoded Gaussians for each latent sample at each target time."""

    target_times: Array
    means: Array  # (S, T, d)
    stds: Array   # (S, T, d)
    u_samples: Array
    l0_samples: Array | None = None

    def point_prediction(self) -> Array:
        return self.means.mean(axis=0)

    def mixture_nll(self, true_states: Array) -> Array:
        """Per-target-point negative log density of the equally weighted
        Gaussian mixture over samples (joint over state dimensions)."""
        x = np.asarray(true_states, dtype=float)[None]  # (1, T, d)
        log_comp = (-0.5 * ((x - self.means) / self.stds) ** 2
                    - np.log(self.stds) - 0.5 * np.log(2 * np.pi)).sum(axis=-1)  # (S, T)
        m = log_comp.max(axis=0)
        lme = m + np.log(np.mean(np.exp(log_comp - m), axis=0))
        return -lme


# ---------------------------------------------------------------------------
# graph builder
# ---------------------------------------------------------------------------

class ModelGraph:
    """Materializes a parameter set as tape leaves and exposes the graph
    fragments losses and predictions are assembled from.  One instance per
    tape; leaves are shared across fragments so parameter gradients
    accumulate correctly."""

    def __init__(self, kind: str, hyper: ModelHyperparams, weight_nodes: dict[str, Node],
                 family: str | None = None):
        self.kind = kind
        self.hyper = hyper
        self.nodes = weight_nodes
        self.family = systems.get_family(family) if family else None

    @classmethod
    def from_params(cls, params: ModelParameters) -> "ModelGraph":
        nodes = {name: Node(w) for name, w in params.weights.items()}
        return cls(params.kind, params.hyper, nodes, params.family)

    def leaf_nodes(self) -> dict[str, Node]:
        return dict(self.nodes)

    # -- building blocks ----------------------------------------------------

    def _mlp(self, x, name: str, n_layers: int, act: str):
        out = x
        for i in range(n_layers):
            layer_act = act if i < n_layers - 1 else "identity"
            out = ad.dense_op(out, self.nodes[f"{name}.{i}.w"], self.nodes[f"{name}.{i}.b"],
                              layer_act)
        return out

    def _head(self, h, name: str):
        return ad.dense_op(h, self.nodes[f"{name}.0.w"], self.nodes[f"{name}.0.b"], "identity")

    def _sigma_head(self, h, name: str):
        raw = self._head(h, name)
        return ad.add(self.hyper.sigma_lb, ad.scale(0.9, ad.softplus(raw)))

    def embed_context(self, rows) -> Node:
        """Per-element embeddings of context rows (already augmented)."""
        return self._mlp(rows, "ctx_enc", 3, "silu")

    def u_posterior(self, pooled: Node) -> tuple[Node, DiagonalGaussian]:
        h = ad.dense_op(pooled, self.nodes["sys_hidden.0.w"], self.nodes["sys_hidden.0.b"], "silu")
        return h, DiagonalGaussian(self._head(h, "u_mean"), self._sigma_head(h, "u_sigma"))

    def l0_posterior_from_init(self, init_rows) -> tuple[Node, Node, DiagonalGaussian]:
        r = self._mlp(init_rows, "init_enc", 3, "silu")
        h = ad.dense_op(r, self.nodes["init_hidden.0.w"], self.nodes["init_hidden.0.b"], "silu")
        return r, h, DiagonalGaussian(self._head(h, "l0_mean"), self._sigma_head(h, "l0_sigma"))

    def l0_posterior_from_hidden(self, h: Node) -> DiagonalGaussian:
        return DiagonalGaussian(self._head(h, "l0_mean"), self._sigma_head(h, "l0_sigma"))

    def ode_field(self, u_rows: Node):
        """Latent vector field ``dl/dt = mlp([l, u, t])`` (tanh layers)."""
        n_rows = u_rows.value.shape[0]

        def field(l, t):
            t_col = (ad.broadcast_to(ad.reshape(t, (1, 1)), (n_rows, 1))
                     if isinstance(t, Node)
                     else np.full((n_rows, 1), float(t)))
            inp = ad.concat_cols([l, u_rows, t_col])
            return self._mlp(inp, "ode", 3, "tanh")

        return field

    def decode_rows(self, l_rows, u_rows, t_col) -> DiagonalGaussian:
        inp = ad.concat_cols([l_rows, u_rows, t_col])
        h = ad.dense_op(inp, self.nodes["dec_hidden.0.w"], self.nodes["dec_hidden.0.b"], "silu")
        if self.kind == "pi_nodep":
            return DiagonalGaussian(l_rows, self._sigma_head(h, "dec_sigma"))
        return DiagonalGaussian(self._head(h, "dec_mean"), self._sigma_head(h, "dec_sigma"))

    def np_decode_rows(self, x0_rows, t_col, z_rows) -> DiagonalGaussian:
        inp = ad.concat_cols([x0_rows, t_col, z_rows])
        h = ad.dense_op(inp, self.nodes["dec_hidden.0.w"], self.nodes["dec_hidden.0.b"], "silu")
        return DiagonalGaussian(self._head(h, "dec_mean"), self._sigma_head(h, "dec_sigma"))

    # -- context assembly ---------------------------------------------------

    def context_rows(self, context: ContextSet, x0_override=None) -> Node:
        """Stack augmented element rows [t, x0, x] over all trajectories.

        ``x0_override`` substitutes a tape node for the new trajectory's
        initial condition so gradients can flow into it (the new rows are
        then built on the tape)."""
        augment = self.hyper.augment_x0 and self.kind != "nodep"
        const_rows = []
        for x0, ts, xs in context.known:
            cols = [ts[:, None], np.broadcast_to(x0, xs.shape), xs] if augment \
                else [ts[:, None], xs]
            const_rows.append(np.concatenate(cols, axis=1))
        if x0_override is None:
            ts, xs = context.new_times, context.new_states
            x0 = context.new_x0
            cols = [ts[:, None], np.broadcast_to(x0, xs.shape), xs] if augment \
                else [ts[:, None], xs]
            const_rows.append(np.concatenate(cols, axis=1))
            return ad.constant(np.concatenate(const_rows, axis=0))
        # forecast conditioning: the only new-trajectory row is (t0, x0, x0)
        x0_node = ad.as_node(x0_override)
        x0_row = ad.reshape(x0_node, (1, x0_node.value.shape[-1]))
        t0_col = np.array([[context.t0]])
        parts = [t0_col, x0_row, x0_row] if augment else [t0_col, x0_row]
        new_row = ad.concat_cols(parts)
        if const_rows:
            return ad.concat_rows([np.concatenate(const_rows, axis=0), new_row])
        return new_row


def encode_context(params: ModelParameters, context: ContextSet,
                   x0_override=None) -> EncoderOutput:
    """Posteriors over the dynamics code (and, per kind, the latent initial
    state) given a context set.

    Pooling is a plain mean over every element of every trajectory, so the
    representation is exactly invariant to permutation and duplication of
    context elements.
    """
    graph = ModelGraph.from_params(params)
    return _encode(graph, context, x0_override)


def _encode(graph: ModelGraph, context: ContextSet, x0_override=None) -> EncoderOutput:
    if graph.kind == "nodep" and context.known:
        raise ValueError("nodep conditions on a single trajectory only")
    rows = graph.context_rows(context, x0_override)
    if rows.value.shape[0] == 0:
        raise ValueError("context must contain at least one observation")
    emb = graph.embed_context(rows)
    r_sys = ad.mean_axis(emb, 0)
    h_sys, q_u = graph.u_posterior(r_sys)
    out = EncoderOutput(r_sys=r_sys, h_sys=h_sys, q_u=q_u)
    if graph.kind == "multi_nodep":
        x0 = ad.as_node(x0_override) if x0_override is not None else ad.constant(context.new_x0)
        init_row = ad.concat_cols([np.array([context.t0]), x0])
        out.r_init, out.h_init, out.q_l0 = graph.l0_posterior_from_init(init_row)
    elif graph.kind == "nodep":
        out.q_l0 = graph.l0_posterior_from_hidden(h_sys)
    return out


# ---------------------------------------------------------------------------
# spec-level single ops
# ---------------------------------------------------------------------------

def latent_solve(params: ModelParameters, l0_sample, u_sample, target_times,
                 substeps: int = 4) -> list[Node]:
    """Integrate the latent ODE from t0 through ascending target times."""
    graph = ModelGraph.from_params(params)
    return _latent_states_at(graph, l0_sample, u_sample, target_times, substeps)


def _latent_states_at(graph: ModelGraph, l0, u, target_times, substeps=4) -> list[Node]:
    times = list(target_times)
    values = [float(ad.value_of(t)) for t in times]
    if any(b < a for a, b in zip(values, values[1:])):
        raise ValueError("target_times must be ascending")
    field = graph.ode_field(ad.as_node(u))
    result = odesolve.solve_fixed(field, l0, times, substeps)
    if result.status is not odesolve.SolveStatus.Ok:
        raise EvaluationError("latent ODE solve produced non-finite states")
    return result.states


def decode(params: ModelParameters, latent_state, u_sample, t) -> DiagonalGaussian:
    """Decoded Gaussian over the physical state at time ``t``."""
    graph = ModelGraph.from_params(params)
    return _decode_at(graph, ad.as_node(latent_state), ad.as_node(u_sample), t)


def _decode_at(graph: ModelGraph, l_rows: Node, u_rows: Node, t) -> DiagonalGaussian:
    n = l_rows.value.shape[0] if l_rows.value.ndim == 2 else 1
    if l_rows.value.ndim == 1:
        l_rows = ad.reshape(l_rows, (1, -1))
    if u_rows.value.ndim == 1:
        u_rows = ad.reshape(u_rows, (1, -1))
    if isinstance(t, Node):
        t_col = ad.broadcast_to(ad.reshape(t, (1, 1)), (n, 1))
    else:
        t_col = np.full((n, 1), float(t))
    return graph.decode_rows(l_rows, u_rows, t_col)


def clip_to_support(u_sample, support: Array) -> Node:
    """Clamp sampled kinetic parameters into their training support (interval
    bounds per parameter); gradient 1 inside, 0 outside."""
    lo, hi = np.asarray(support, dtype=float)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("support bounds must be finite")
    return ad.clip(u_sample, lo, hi)


def pi_vector_field(u_f_sample: Array, x: Array, t: float, family) -> Array:
    """Known kinetic right-hand side evaluated at sampled parameters."""
    fam = systems.get_family(family) if isinstance(family, str) else family
    out = fam.rhs_np(np.asarray(u_f_sample, dtype=float))(np.asarray(x, dtype=float), t)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("kinetic field returned non-finite derivatives")
    return out


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def _draw_latents(graph: ModelGraph, enc: EncoderOutput, n_samples: int,
                  rng: np.random.Generator):
    du = enc.q_u.dim
    u_noise = rng.standard_normal((n_samples, du))
    u = ad.sample_gaussian_reparam(
        DiagonalGaussian(ad.reshape(enc.q_u.mean, (1, du)),
                         ad.reshape(enc.q_u.std, (1, du))), u_noise)
    l0 = None
    if enc.q_l0 is not None:
        dl = enc.q_l0.dim
        l0_noise = rng.standard_normal((n_samples, dl))
        l0 = ad.sample_gaussian_reparam(
            DiagonalGaussian(ad.reshape(enc.q_l0.mean, (1, dl)),
                             ad.reshape(enc.q_l0.std, (1, dl))), l0_noise)
    return u, l0


def predict(params: ModelParameters, context: ContextSet, target_times,
            n_samples: int = 32, rng: np.random.Generator | None = None) -> PredictiveSamples:
    """Sampled predictive distribution at the target times.

    Draws ``n_samples`` latent pairs, integrates (for the ODE-based kinds)
    and decodes each; the point prediction is the average of decoded means
    and the likelihood metric is the equally weighted mixture density.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if params.kind == "np":
        return np_predict(params, context, target_times, n_samples, rng)
    if params.kind == "nodep":
        return nodep_predict(params, context, target_times, n_samples, rng)
    rng = ad.make_rng(0) if rng is None else rng
    target_times = np.asarray(target_times, dtype=float)
    graph = ModelGraph.from_params(params)
    enc = _encode(graph, context)
    u, l0 = _draw_latents(graph, enc, n_samples, rng)

    if params.kind == "pi_nodep":
        u_clipped = clip_to_support(ad.exp(u), graph.family.parameter_support)
        states = _solve_kinetic_rows(graph, context.new_x0, u_clipped,
                                     context.t0, target_times, n_samples)
        means, stds = _decode_series(graph, states, u_clipped, target_times)
        return PredictiveSamples(target_times, means, stds, u_clipped.value)

    order, solve_times = _solve_schedule(context.t0, target_times)
    states = _latent_states_at(graph, l0, u, solve_times)
    picked = [states[i] for i in order]
    means, stds = _decode_series(graph, picked, u, target_times)
    return PredictiveSamples(target_times, means, stds, u.value, l0.value)


def _solve_schedule(t0: float, target_times: Array):
    """Sorted union of t0 and the target times, plus the index of each target
    time within it."""
    uniq = np.unique(np.concatenate([[t0], target_times]))
    if target_times.min() < t0:
        raise ValueError("target times must not precede t0")
    order = np.searchsorted(uniq, target_times)
    return order, uniq


def _decode_series(graph: ModelGraph, state_rows: list, u_rows, times: Array):
    means, stds = [], []
    for state, t in zip(state_rows, times):
        dist = _decode_at(graph, state, u_rows, float(t))
        means.append(dist.mean_value())
        stds.append(dist.std_value())
    return np.stack(means, axis=1), np.stack(stds, axis=1)


def _solve_kinetic_rows(graph: ModelGraph, x0: Array, u_rows: Node, t0: float,
                        target_times: Array, n_samples: int, substeps: int = 4):
    order, solve_times = _solve_schedule(t0, target_times)
    x0_rows = np.broadcast_to(np.asarray(x0, float), (n_samples, len(x0))).copy()
    field = systems.ops_field(graph.family, u_rows)
    result = odesolve.solve_fixed(field, x0_rows, solve_times, substeps)
    if result.status is not odesolve.SolveStatus.Ok:
        raise EvaluationError("kinetic solve produced non-finite states")
    return [result.states[i] for i in order]


def np_predict(params: ModelParameters, context: ContextSet, target_times,
               n_samples: int = 32, rng: np.random.Generator | None = None) -> PredictiveSamples:
    """Neural-process prediction: decode [x0, t, z] directly per target time."""
    if params.kind != "np":
        raise ValueError("np_predict requires np parameters")
    rng = ad.make_rng(0) if rng is None else rng
    target_times = np.asarray(target_times, dtype=float)
    graph = ModelGraph.from_params(params)
    enc = _encode(graph, context)
    z, _ = _draw_latents(graph, enc, n_samples, rng)
    x0_rows = np.broadcast_to(context.new_x0, (n_samples, len(context.new_x0)))
    means, stds = [], []
    for t in target_times:
        t_col = np.full((n_samples, 1), float(t))
        dist = graph.np_decode_rows(x0_rows, t_col, z)
        means.append(dist.mean_value())
        stds.append(dist.std_value())
    return PredictiveSamples(target_times, np.stack(means, 1), np.stack(stds, 1), z.value)


def nodep_predict(params: ModelParameters, context: ContextSet, target_times,
                  n_samples: int = 32, rng: np.random.Generator | None = None) -> PredictiveSamples:
    """Single-trajectory latent-ODE prediction (known trajectories rejected)."""
    if params.kind != "nodep":
        raise ValueError("nodep_predict requires nodep parameters")
    if context.known:
        raise ValueError("nodep conditions on a single trajectory only")
    rng = ad.make_rng(0) if rng is None else rng
    target_times = np.asarray(target_times, dtype=float)
    graph = ModelGraph.from_params(params)
    enc = _encode(graph, context)
    u, l0 = _draw_latents(graph, enc, n_samples, rng)
    order, solve_times = _solve_schedule(context.t0, target_times)
    states = _latent_states_at(graph, l0, u, solve_times)
    picked = [states[i] for i in order]
    means, stds = _decode_series(graph, picked, u, target_times)
    return PredictiveSamples(target_times, means, stds, u.value, l0.value)


# ---------------------------------------------------------------------------
# acquisition adapter: differentiable sampled mean predictions
# ---------------------------------------------------------------------------

@dataclass
class SurrogateAdapter:
    """Differentiable sampled-mean predictions for acquisition optimization.

    Latent (or kinetic) states are integrated once per evaluation over a
    fixed grid spanning [t0, t_max] and linearly interpolated at the query
    times.  Because the grid never depends on the schedule, appending a query
    time cannot perturb the predictions at the existing times -- with shared
    noise this makes improvement-based acquisitions exactly monotone under
    set inclusion, at the price of grid-level interpolation error.
    """

    params: ModelParameters
    known: list
    t0: float
    t_max: float
    new_times: Array | None = None
    new_states: Array | None = None
    grid_cells: int = 100
    substeps: int = 1

    def __post_init__(self):
        self.grid = np.linspace(self.t0, self.t_max, self.grid_cells + 1)

    def draw_noise(self, n_mc: int, rng: np.random.Generator) -> dict[str, Array]:
        hyper = self.params.hyper
        if self.params.kind == "np":
            return {"u": rng.standard_normal((n_mc, hyper.latent_dim + hyper.dynamics_dim))}
        if self.params.kind == "pi_nodep":
            return {"u": rng.standard_normal((n_mc, hyper.n_kinetic_params))}
        return {"u": rng.standard_normal((n_mc, hyper.dynamics_dim)),
                "l0": rng.standard_normal((n_mc, hyper.latent_dim))}

    def _context(self, x0_value: Array | None) -> ContextSet:
        known = [] if self.params.kind == "nodep" else self.known
        if self.new_times is not None:
            return ContextSet(known, self.new_times, self.new_states)
        placeholder = np.zeros(self.params.hyper.state_dim) if x0_value is None else x0_value
        return make_context(known, x0_new=placeholder, t0=self.t0)

    def mean_paths(self, x0, times: Sequence, noise: dict[str, Array]) -> list[Node]:
        """Decoded mean states at each query time, one row per MC sample;
        differentiable w.r.t. ``x0`` and any query time passed as a node."""
        graph = ModelGraph.from_params(self.params)
        n_mc = noise["u"].shape[0]
        x0_node = ad.as_node(x0)
        conditioning_on_new_obs = self.new_times is not None
        ctx = self._context(ad.value_of(x0))
        enc = _encode(graph, ctx, x0_override=None if conditioning_on_new_obs else x0_node)

        du = enc.q_u.dim
        u = ad.sample_gaussian_reparam(
            DiagonalGaussian(ad.reshape(enc.q_u.mean, (1, du)),
                             ad.reshape(enc.q_u.std, (1, du))), noise["u"])

        if self.params.kind == "np":
            x0_rows = ad.broadcast_to(ad.reshape(x0_node, (1, -1)), (n_mc, x0_node.value.shape[-1]))
            out = []
            for t in times:
                t_col = (ad.broadcast_to(ad.reshape(t, (1, 1)), (n_mc, 1))
                         if isinstance(t, Node) else np.full((n_mc, 1), float(t)))
                out.append(graph.np_decode_rows(x0_rows, t_col, u).mean)
            return out

        if self.params.kind == "pi_nodep":
            u_clipped = clip_to_support(ad.exp(u), graph.family.parameter_support)
            start = ad.broadcast_to(ad.reshape(x0_node, (1, -1)), (n_mc, x0_node.value.shape[-1]))
            field = systems.ops_field(graph.family, u_clipped)
            result = odesolve.solve_fixed(field, start, self.grid, self.substeps)
            if result.status is not odesolve.SolveStatus.Ok:
                raise EvaluationError("kinetic solve diverged during acquisition")
            return [_interp_states(self.grid, result.states, t) for t in times]

        l0 = ad.sample_gaussian_reparam(
            DiagonalGaussian(ad.reshape(enc.q_l0.mean, (1, enc.q_l0.dim)),
                             ad.reshape(enc.q_l0.std, (1, enc.q_l0.dim))), noise["l0"])
        field = graph.ode_field(u)
        result = odesolve.solve_fixed(field, l0, self.grid, self.substeps)
        if result.status is not odesolve.SolveStatus.Ok:
            raise EvaluationError("latent solve diverged during acquisition")
        out = []
        for t in times:
            l_t = _interp_states(self.grid, result.states, t)
            out.append(_decode_at(graph, l_t, u, t).mean)
        return out


def _interp_states(grid: Array, states: list[Node], t) -> Node:
    """Linear interpolation between grid states; differentiable in t."""
    tv = float(ad.value_of(t))
    k = int(np.clip(np.searchsorted(grid, tv, side="right") - 1, 0, len(grid) - 2))
    width = grid[k + 1] - grid[k]
    if isinstance(t, Node):
        w = ad.scale(1.0 / width, ad.add(t, -grid[k]))
    else:
        w = (tv - grid[k]) / width
    return ad.axpy(states[k], w, ad.sub(states[k + 1], states[k]))
