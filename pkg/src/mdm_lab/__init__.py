"""Desk-scale masked-diffusion decoding laboratory.

Exactly solvable oracle denoisers, a reverse-process strategy zoo,
entropy-guided path search (best-of-N and sequential Monte Carlo), and an
experiment harness for correlation and ablation studies.
"""

from .core import (
    NoiseSchedule,
    RngStream,
    SeqState,
    TimeGrid,
    Vocab,
    corrupt_forward,
    make_time_grid,
)
from .denoiser import (
    CapacityError,
    DataModel,
    DenoiserBackend,
    IIDOracle,
    JointConditional,
    MarkovOracle,
    PerturbedOracle,
    PredictiveDistribution,
    epsilon_of,
    kl_divergence,
    oracle_joint_conditional,
    predict,
)
from .metrics import (
    EntropyReport,
    EvalScore,
    approximate_nelbo,
    diversity,
    evaluate_nll,
    oracle_state_uncertainty,
    path_entropy,
    pearson,
    shannon_entropy,
    state_entropy,
)
from .remote import Endpoint, RemoteClient, RemoteDenoiserError
from .reverse import (
    PathRecord,
    StrategyConfig,
    run_path,
    scheduled_counts,
    select_positions,
    step,
    unmask_probability,
)
from .search import (
    ParticleSet,
    SearchConfig,
    e_bon,
    e_smc,
    find_lambda_star,
    greedy_search,
    majority_vote,
    potential,
    potential_weights,
    resample_expected_entropy,
    reward,
)
from .harness import (
    ExperimentConfig,
    RunSummary,
    default_config,
    default_data_model,
    persist,
    run_ablation,
    run_correlation_study,
    sharpened_markov_model,
)
from .invariants import InvariantReport, run_invariant_suite

__version__ = "0.1.0"
