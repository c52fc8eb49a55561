"""Softmax-bandit laboratory for offline preference optimization and reward hacking."""

from .bandit import (
    BanditInstance,
    EmpiricalStats,
    PreferenceDataset,
    PreferenceSample,
    SoftmaxPolicy,
    UnobservedPairError,
    bt_prob,
    empirical_stats,
    performance,
    policy_probs,
    sample_dataset,
    trial_rng,
)
from .objectives import (
    LossContext,
    MethodSpec,
    MissingHyperparameterError,
    TiePreferenceError,
    grad,
    loss,
    stationary_label,
    update_labels,
)
from .dynamics import DynamicsConfig, check_theorem3, integrate_dynamics
from .hard_instances import (
    force_event,
    make_bundle,
    make_type1_instance,
    make_type2_instance,
    reproduce_proposition,
    suboptimality,
)
from .oracle import estimate_concentrability, finite_diff_grad, gradcheck, grid_search_optimum
from .trainer import TrainConfig, TrainResult, suggest_learning_rate, train
from .wer import WeightScheme, solve_wer_policy, weighted_entropy

__version__ = "0.1.0"
