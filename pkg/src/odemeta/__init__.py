"""Few-shot surrogate models and delay-constrained multi-objective Bayesian
optimization for unknown ODE systems.

Layers, bottom up: a reverse-mode autodiff core over dense arrays
(:mod:`odemeta.autodiff`), fixed-step and adaptive ODE solvers
(:mod:`odemeta.odesolve`), parametric/GP task distributions and episode
sampling (:mod:`odemeta.systems`), the latent-ODE process model family
(:mod:`odemeta.models`), episode losses and meta-training
(:mod:`odemeta.training`), an exact-GP reference surrogate
(:mod:`odemeta.gp`), the hypervolume acquisition and two-stage optimization
loop (:mod:`odemeta.moo`), and the benchmark runner/CLI
(:mod:`odemeta.bench`, :mod:`odemeta.cli`).
"""

from .autodiff import (
    DenseLayer,
    DiagonalGaussian,
    GradReport,
    Node,
    backward,
    dense_forward,
    grad_check,
    kl_diag_gaussians,
    make_rng,
    sample_gaussian_reparam,
    split_rng,
)
from .errors import OdemetaError
from .models import (
    MODEL_KINDS,
    ContextSet,
    ModelHyperparams,
    ModelParameters,
    PredictiveSamples,
    SurrogateAdapter,
    encode_context,
    init_parameters,
    make_context,
    predict,
)
from .moo import (
    AcquisitionOptions,
    ObjectivePoint,
    ParetoFront,
    ProblemSpec,
    Schedule,
    benchmark_problem,
    hypervolume_2d,
    hvi,
    make_observer,
    optimize_initial_condition,
    optimize_schedule,
    pareto_front,
    qehvi,
    run_bo,
)
from .odesolve import SolveResult, SolveStatus, rk4_step, solve_adaptive, solve_fixed
from .systems import (
    Episode,
    EpisodeConfig,
    SystemFamily,
    SystemSample,
    Trajectory,
    generate_trajectories,
    get_family,
    sample_episode,
    sample_rff_field,
    sample_system,
)
from .training import (
    LossBreakdown,
    TrainingConfig,
    elbo_loss,
    load_checkpoint,
    pi_elbo_loss,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
