"""Multirate momentum SGD: partitioned update schedules and their analysis.

The library splits a network's parameters into rate tiers (fast blocks update
every step, slow blocks every k-th with a proportionally larger stepsize),
exploits the split to truncate most backward passes, and ships the
accounting, convergence-bound, and dataset tooling used to study the scheme.
"""
from .analysis import (
    BoundInputs,
    LogisticRegressionProblem,
    QuadraticProblem,
    make_logistic_problem,
    multirate_bound,
    sgd_bound,
    speedup_limit,
    speedup_ratio,
    verify_bound,
)
from .config import ExperimentConfig, load_config, parse_config_text
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    FormatError,
    MultirateError,
    ShapeError,
    StateError,
)
from .linalg import CostCounters, RngStream
from .model import (
    AffineLayer,
    ConvLayer,
    Network,
    accuracy,
    backward_full,
    backward_truncated,
    forward,
    load_network,
    loss_value,
    mlp,
    numeric_gradient,
    save_network,
)
from .optimizer import (
    MultirateConfig,
    NoiseConfig,
    OptState,
    composite_average_step,
    init_state,
    macro_step,
    macro_step_wd,
    multi_tier_cycle,
    noise_step,
    random_subset_cycle,
    rate_tiers,
    remask_step,
    vanilla_step,
)
from .partition import (
    Partition,
    RateTier,
    all_fast,
    bias_slow,
    layerwise,
    multi_tier,
    sample_random_subset,
    slow_fraction,
)
from .runner import run_experiment

__version__ = "0.1.0"
