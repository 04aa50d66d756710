"""Parallel fixed-point sampling and inversion for denoising diffusion chains.

The sequential sampler is recast as a joint system over all intermediate
states; its strictly triangular structure lets Picard iteration terminate
in at most S steps and Anderson acceleration typically far earlier, with
every timestep's model call running in parallel.  Inversion recovers the
terminal state by cheap gradients taken at the fixed point.
"""

from .chain import (
    ChainCoefficients,
    chain_coefficients,
    ddim_step,
    h_tilde,
    h_tilde_vjp,
    init_stack,
    residual,
    sequential_rollout,
)
from .errors import (
    AdjointError,
    ConfigError,
    DivergenceError,
    InsufficientDataError,
    NumericDomainError,
    ParseError,
    SchemaError,
    ShapeError,
)
from .gradients import (
    Adam,
    adjoint_solve,
    central_difference_grad,
    exact_ift_grad,
    loss_and_seed,
    phantom_grad,
    rollout_backprop_grad,
    write_gradcheck_report,
)
from .invert import (
    InversionConfig,
    InversionRun,
    frobenius_loss,
    invert_deq,
    invert_deq_stochastic,
    invert_naive,
    run_report,
)
from .metrics import MomentSummary, gaussian_w2, sample_moments
from .predictors import (
    ConstantPredictor,
    GaussianOptimalPredictor,
    MlpPredictor,
    NoisePredictor,
    ZeroPredictor,
    load_gaussian_params,
    load_mlp,
    random_mlp,
    save_gaussian,
    save_mlp,
)
from .rng import stream
from .sampling import draw_noise_stack, draw_x_T, sample_sequential, solve_stack
from .schedule import (
    DiffusionSchedule,
    TimestepSubsequence,
    identity_subsequence,
    make_linear_beta_schedule,
    schedule_config,
    schedule_from_config,
    select_subsequence,
)
from .solvers import (
    FixedPointResult,
    SolverConfig,
    anderson_solve,
    default_solver_config,
    picard_solve,
    solve,
)
from .stackio import (
    read_stack,
    stack_t_labels,
    write_residual_csv,
    write_stack,
    write_stack_csv,
    write_trace_csv,
)

__version__ = "0.1.0"
