"""Episode losses, the meta-training loop and checkpoint persistence.

The loss on one episode has three terms (all computed on the tape):

* reconstruction -- expected log-likelihood of the new trajectory's target
  states under the decoded Gaussians, with one reparameterized latent draw
  from the target-conditioned posteriors;
* a KL between the dynamics-code posterior conditioned on targets and the
  one conditioned on context only;
* a KL anchoring the latent initial state (to a standard normal for the
  set-conditioned model, to its context posterior for the single-trajectory
  model).

The physics-informed variant adds the negative log-density of the true
kinetic parameters under the encoder's log-normal head, and every parameter
sample entering a solve is clamped into the family's training support.

Batches of episodes are pushed through one graph using rectangular buffers
and 0/1 pooling matrices, so the per-step cost is a handful of matrix ops
regardless of how sizes were sampled.
"""

from __future__ import annotations

import base64
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import odesolve, systems
from .autodiff import DiagonalGaussian, Node
from .errors import CheckpointError
from .models import (
    CHECKPOINT_VERSION,
    ModelGraph,
    ModelHyperparams,
    ModelParameters,
    clip_to_support,
    init_parameters,
)
from .systems import Episode, EpisodeConfig

logger = logging.getLogger(__name__)

Array = np.ndarray

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class TrainingConfig:
    lam: float = 0.5  # forecast-episode probability
    epochs: int = 30
    steps_per_epoch: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 10.0
    n_systems: int = 20
    n_trajectories: int = 100
    n_grid: int = 100
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    solver_rtol: float = 1e-5
    solver_atol: float = 1e-5
    substeps: int = 2  # latent-solve RK4 sub-steps per grid cell
    seed: int = 0
    hyper: ModelHyperparams | None = None
    log_path: str | None = None
    checkpoint_every: int = 0  # epochs; 0 disables
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.episode = (self.episode if isinstance(self.episode, EpisodeConfig)
                        else EpisodeConfig(**self.episode))
        self.episode.forecast_prob = self.lam


@dataclass
class LossBreakdown:
    reconstruction: float
    kl_u: float
    kl_l0: float
    param_nll: float
    total: float

    def __post_init__(self):
        if self.kl_u < -1e-9 or self.kl_l0 < -1e-9:
            raise ValueError("KL terms must be non-negative")


@dataclass
class ElboGraph:
    """Per-episode loss rows plus the scalar training objective."""

    total: Node  # mean over episodes of (-recon + kl_u + kl_l0 + param_nll)
    recon_rows: Array
    kl_u_rows: Array
    kl_l0_rows: Array
    param_nll_rows: Array


# ---------------------------------------------------------------------------
# row-wise Gaussian machinery
# ---------------------------------------------------------------------------

def _kl_rows(q: DiagonalGaussian, p: DiagonalGaussian) -> Node:
    var_q = ad.square(ad.as_node(q.std))
    var_p = ad.square(ad.as_node(p.std))
    term = ad.add(ad.add(ad.div(var_q, var_p),
                         ad.div(ad.square(ad.sub(p.mean, q.mean)), var_p)),
                  ad.add(ad.sub(ad.log(var_p), ad.log(var_q)), -1.0))
    return ad.scale(0.5, ad.sum_axis(term, -1))


def _kl_rows_std_normal(q: DiagonalGaussian) -> Node:
    var_q = ad.square(ad.as_node(q.std))
    term = ad.sub(ad.add(var_q, ad.square(ad.as_node(q.mean))),
                  ad.add(ad.log(var_q), 1.0))
    return ad.scale(0.5, ad.sum_axis(term, -1))


def _gaussian_loglik_rows(x_const: Array, mean: Node, std: Node) -> Node:
    z = ad.div(ad.sub(x_const, mean), std)
    ll = ad.sub(ad.scale(-0.5, ad.square(z)), ad.add(ad.log(std), 0.5 * _LOG_2PI))
    return ad.sum_axis(ll, -1)


def _reparam_rows(q: DiagonalGaussian, noise: Array) -> Node:
    return ad.add(q.mean, ad.mul(q.std, noise))


# ---------------------------------------------------------------------------
# batched episode graph
# ---------------------------------------------------------------------------

def _episode_elements(graph: ModelGraph, ep: Episode):
    """Element rows for one episode plus its context/target pooling weights."""
    augment = graph.hyper.augment_x0 and graph.kind != "nodep"

    def rows_for(x0, times, states, idx):
        cols = ([times[idx, None], np.broadcast_to(x0, states[idx].shape), states[idx]]
                if augment else [times[idx, None], states[idx]])
        return np.concatenate(cols, axis=1)

    blocks, ctx_w = [], []
    if graph.kind != "nodep":
        for et in ep.context_trajectories:
            idx = np.flatnonzero(et.context_mask)
            if len(idx) == 0:
                continue
            blocks.append(rows_for(et.x0, et.times, et.states, idx))
            ctx_w.append(np.ones(len(idx)))
    et = ep.new_trajectory
    tidx = np.flatnonzero(et.target_mask)
    blocks.append(rows_for(et.x0, et.times, et.states, tidx))
    ctx_w.append(et.context_mask[tidx].astype(float))
    return np.concatenate(blocks, axis=0), np.concatenate(ctx_w)


def build_elbo_graph(
    graph: ModelGraph,
    episodes: Sequence[Episode],
    noise: dict[str, Array],
    u_true: Array | None = None,
    support: Array | None = None,
    substeps: int = 2,
) -> ElboGraph:
    """Assemble the training objective for a batch of episodes of one system
    family (episodes must share the generation grid)."""
    B = len(episodes)
    grid = episodes[0].new_trajectory.times
    for ep in episodes:
        if not np.array_equal(ep.new_trajectory.times, grid):
            raise ValueError("batched episodes must share one time grid")
    G = len(grid)
    kind = graph.kind

    # --- encoder inputs ----------------------------------------------------
    blocks, ctx_weights = zip(*(_episode_elements(graph, ep) for ep in episodes))
    counts = np.array([b.shape[0] for b in blocks])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    elements = np.concatenate(blocks, axis=0)
    n_rows = elements.shape[0]
    pool_ctx = np.zeros((B, n_rows))
    pool_tgt = np.zeros((B, n_rows))
    for b in range(B):
        lo, hi = offsets[b], offsets[b + 1]
        w = ctx_weights[b]
        pool_ctx[b, lo:hi] = w / w.sum()
        pool_tgt[b, lo:hi] = 1.0 / counts[b]

    emb = graph.embed_context(ad.constant(elements))
    r_ctx = ad.matmul(pool_ctx, emb)
    r_tgt = ad.matmul(pool_tgt, emb)
    h_ctx, q_u_ctx = graph.u_posterior(r_ctx)
    h_tgt, q_u_tgt = graph.u_posterior(r_tgt)
    kl_u = _kl_rows(q_u_tgt, q_u_ctx)
    u = _reparam_rows(q_u_tgt, noise["u"])

    # --- latent initial state ----------------------------------------------
    x0_new = np.stack([ep.new_trajectory.x0 for ep in episodes])
    if kind == "multi_nodep":
        init_rows = np.concatenate([np.full((B, 1), grid[0]), x0_new], axis=1)
        _, _, q_l0 = graph.l0_posterior_from_init(ad.constant(init_rows))
        kl_l0 = _kl_rows_std_normal(q_l0)
        l0 = _reparam_rows(q_l0, noise["l0"])
    elif kind == "nodep":
        q_l0_ctx = graph.l0_posterior_from_hidden(h_ctx)
        q_l0_tgt = graph.l0_posterior_from_hidden(h_tgt)
        kl_l0 = _kl_rows(q_l0_tgt, q_l0_ctx)
        l0 = _reparam_rows(q_l0_tgt, noise["l0"])
    else:
        kl_l0 = ad.constant(np.zeros(B))
        l0 = None

    # --- trajectories of decoded means over the full grid -------------------
    if kind in ("multi_nodep", "nodep"):
        field = graph.ode_field(u)
        result = odesolve.solve_fixed(field, l0, grid, substeps)
        if result.status is not odesolve.SolveStatus.Ok:
            raise FloatingPointError("latent solve diverged")
        states = result.states
    elif kind == "pi_nodep":
        log_u = u
        u = clip_to_support(ad.exp(log_u),
                            graph.family.parameter_support if support is None else support)
        start = ad.constant(x0_new)
        field = systems.ops_field(graph.family, u)
        result = odesolve.solve_fixed(field, start, grid, substeps)
        if result.status is not odesolve.SolveStatus.Ok:
            raise FloatingPointError("kinetic solve diverged")
        states = result.states
    else:  # np: no solve
        states = None

    t_col = np.repeat(grid, B)[:, None]
    if states is not None:
        l_all = ad.concat_rows(states)  # (G*B, .), time-major
        u_all = ad.concat_rows([u] * G)
        dec = graph.decode_rows(l_all, u_all, t_col)
    else:
        x0_all = np.tile(x0_new, (G, 1))
        z_all = ad.concat_rows([u] * G)
        dec = graph.np_decode_rows(ad.constant(x0_all), t_col, z_all)

    # --- masked reconstruction ----------------------------------------------
    truth = np.stack([ep.new_trajectory.states for ep in episodes])  # (B, G, d)
    truth_all = truth.transpose(1, 0, 2).reshape(G * B, -1)
    mask = np.stack([ep.new_trajectory.target_mask for ep in episodes])  # (B, G)
    mask_all = mask.T.reshape(G * B).astype(float)
    # per-episode sum of masked log-likelihoods via a constant selector
    select = np.zeros((B, G * B))
    for b in range(B):
        select[b, b::B] = 1.0
    ll_rows = _gaussian_loglik_rows(truth_all, dec.mean, dec.std)
    recon = ad.matmul(select, ad.mul(ll_rows, mask_all))

    loss_rows = ad.add(ad.sub(kl_u, recon), kl_l0)

    # --- parameter likelihood (physics-informed only) -----------------------
    if kind == "pi_nodep" and u_true is not None:
        log_true = np.log(np.asarray(u_true, dtype=float))
        ll = _gaussian_loglik_rows(log_true, q_u_tgt.mean, q_u_tgt.std)
        # log-normal density includes the change-of-variables term -log(u)
        param_nll = ad.sub(log_true.sum(axis=1), ll)
        loss_rows = ad.add(loss_rows, param_nll)
        param_nll_rows = param_nll.value.copy()
    else:
        param_nll_rows = np.zeros(B)

    total = ad.mean_axis(loss_rows, 0)
    return ElboGraph(total, recon.value.copy(), kl_u.value.copy(),
                     kl_l0.value.copy(), param_nll_rows)


def _episode_noise(kind: str, hyper: ModelHyperparams, n: int, rng) -> dict[str, Array]:
    if kind == "np":
        return {"u": rng.standard_normal((n, hyper.latent_dim + hyper.dynamics_dim))}
    if kind == "pi_nodep":
        return {"u": rng.standard_normal((n, hyper.n_kinetic_params))}
    return {"u": rng.standard_normal((n, hyper.dynamics_dim)),
            "l0": rng.standard_normal((n, hyper.latent_dim))}


def elbo_loss(params: ModelParameters, episode: Episode,
              rng: np.random.Generator, substeps: int = 2) -> LossBreakdown:
    """Loss terms for one episode with one reparameterized latent draw."""
    graph = ModelGraph.from_params(params)
    noise = _episode_noise(params.kind, params.hyper, 1, rng)
    res = build_elbo_graph(graph, [episode], noise, substeps=substeps)
    return LossBreakdown(float(res.recon_rows[0]), float(res.kl_u_rows[0]),
                         float(res.kl_l0_rows[0]), 0.0, float(res.total.value))


def pi_elbo_loss(params: ModelParameters, episode: Episode, u_true: Array,
                 support: Array, rng: np.random.Generator,
                 substeps: int = 2) -> LossBreakdown:
    """Physics-informed loss: the episode ELBO plus the negative log-density
    of the true kinetic parameters under the target-conditioned posterior."""
    if params.kind != "pi_nodep":
        raise ValueError("pi_elbo_loss requires pi_nodep parameters")
    support = np.asarray(support, dtype=float)
    u_true = np.asarray(u_true, dtype=float).reshape(1, -1)
    if np.any(u_true < support[0]) or np.any(u_true > support[1]):
        raise ValueError("u_true must lie inside the training support")
    graph = ModelGraph.from_params(params)
    noise = _episode_noise(params.kind, params.hyper, 1, rng)
    res = build_elbo_graph(graph, [episode], noise, u_true=u_true,
                           support=support, substeps=substeps)
    return LossBreakdown(float(res.recon_rows[0]), float(res.kl_u_rows[0]),
                         float(res.kl_l0_rows[0]), float(res.param_nll_rows[0]),
                         float(res.total.value))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class _AdamState:
    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0


def _adam_update(weights, grads, state: _AdamState, lr, b1, b2, eps, clip_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    factor = clip_norm / norm if (clip_norm > 0 and norm > clip_norm) else 1.0
    state.step += 1
    t = state.step
    new = {}
    for name, w in weights.items():
        g = grads[name] * factor
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**t)
        v_hat = state.v[name] / (1 - b2**t)
        new[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(model_kind: str, family_name: str, config: TrainingConfig,
          ) -> tuple[ModelParameters, list[dict]]:
    """Meta-train a model on a system family.

    Per step: draw ``n_systems`` fresh systems, ``n_trajectories`` solved
    initial conditions each, one episode per trajectory, then a single
    clipped Adam update on the batch-averaged loss.  Non-finite steps are
    skipped; after three consecutive skips the learning rate is halved.
    Returns the trained parameters and one trace record per step.
    """
    fam = systems.get_family(family_name)
    rng = ad.make_rng(config.seed)
    params = init_parameters(model_kind, fam.state_dim, rng, hyper=config.hyper,
                             family=family_name if model_kind == "pi_nodep" else None)
    params.train_seed = config.seed
    weights = params.weights
    adam = _AdamState({k: np.zeros_like(v) for k, v in weights.items()},
                      {k: np.zeros_like(v) for k, v in weights.items()})
    lr = config.learning_rate
    grid = np.linspace(fam.t0, fam.t_max, config.n_grid)
    trace: list[dict] = []
    log_fh = open(config.log_path, "w", encoding="utf-8") if config.log_path else None
    consecutive_skips = 0

    try:
        for epoch in range(config.epochs):
            for step in range(config.steps_per_epoch):
                t_start = time.perf_counter()
                episodes: list[Episode] = []
                u_true_rows = []
                for _ in range(config.n_systems):
                    system = systems.sample_system(fam, rng)
                    trajs = systems.generate_trajectories(
                        system, config.n_trajectories, grid, rng,
                        rtol=config.solver_rtol, atol=config.solver_atol)
                    for _ in range(config.n_trajectories):
                        episodes.append(systems.sample_episode(trajs, config.episode, rng))
                        u_true_rows.append(system.parameters)
                noise = _episode_noise(model_kind, params.hyper, len(episodes), rng)
                u_true = np.stack(u_true_rows) if model_kind == "pi_nodep" else None

                graph = ModelGraph.from_params(
                    ModelParameters(model_kind, params.hyper, weights,
                                    family=params.family, train_seed=config.seed))
                skipped = False
                try:
                    res = build_elbo_graph(graph, episodes, noise, u_true=u_true,
                                           substeps=config.substeps)
                    loss_val = float(res.total.value)
                    if not np.isfinite(loss_val):
                        raise FloatingPointError("non-finite loss")
                    grads = ad.gradients(res.total, graph.leaf_nodes())
                    if not all(np.all(np.isfinite(g)) for g in grads.values()):
                        raise FloatingPointError("non-finite gradient")
                    weights = _adam_update(weights, grads, adam, lr, config.beta1,
                                           config.beta2, config.adam_eps,
                                           config.grad_clip_norm)
                    consecutive_skips = 0
                except FloatingPointError as exc:
                    skipped = True
                    consecutive_skips += 1
                    logger.warning("skipping step (%s); consecutive skips: %d",
                                   exc, consecutive_skips)
                    if consecutive_skips >= 3:
                        lr *= 0.5
                        consecutive_skips = 0
                        logger.warning("halving learning rate to %g", lr)

                record = {
                    "epoch": epoch,
                    "step": epoch * config.steps_per_epoch + step,
                    "skipped": skipped,
                    "forecast_fraction": float(np.mean([e.forecast for e in episodes])),
                    "loss": None if skipped else loss_val,
                    "reconstruction": None if skipped else float(res.recon_rows.mean()),
                    "kl_u": None if skipped else float(res.kl_u_rows.mean()),
                    "kl_l0": None if skipped else float(res.kl_l0_rows.mean()),
                    "param_nll": None if skipped else float(res.param_nll_rows.mean()),
                    "learning_rate": lr,
                    "wall_ms": (time.perf_counter() - t_start) * 1e3,
                }
                trace.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if (config.checkpoint_every and config.checkpoint_dir
                    and (epoch + 1) % config.checkpoint_every == 0):
                snap = ModelParameters(model_kind, params.hyper, dict(weights),
                                       family=params.family, train_seed=config.seed)
                save_checkpoint(snap, f"{config.checkpoint_dir}/epoch_{epoch + 1:04d}.ckpt")
    finally:
        if log_fh:
            log_fh.close()

    final = ModelParameters(model_kind, params.hyper, weights,
                            family=params.family, train_seed=config.seed)
    return final, trace


def epoch_losses(trace: Sequence[dict], steps_per_epoch: int) -> list[float]:
    """Mean loss per epoch from a step trace (skipped steps excluded)."""
    by_epoch: dict[int, list[float]] = {}
    for rec in trace:
        if rec["loss"] is not None:
            by_epoch.setdefault(rec["epoch"], []).append(rec["loss"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParameters, path) -> None:
    """Single-file checkpoint: JSON manifest with named weight arrays stored
    as base64 row-major little-endian doubles.  Byte-deterministic, so
    save -> load -> save reproduces the file exactly."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "family": params.family,
        "train_seed": params.train_seed,
        "hyper": asdict(params.hyper),
        "weights": {
            name: {
                "shape": list(w.shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(w, dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, w in sorted(params.weights.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path, expect_kind: str | None = None) -> ModelParameters:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('format_version')!r} "
            f"!= supported {CHECKPOINT_VERSION}")
    kind = payload.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"checkpoint kind {kind!r} != expected {expect_kind!r}")
    weights = {}
    for name, spec in payload["weights"].items():
        raw = base64.b64decode(spec["data"])
        weights[name] = np.frombuffer(raw, dtype="<f8").reshape(spec["shape"]).copy()
    hyper = ModelHyperparams(**payload["hyper"])
    return ModelParameters(kind, hyper, weights, family=payload.get("family"),
                           train_seed=payload.get("train_seed"))
