"""Direct preference optimization and its surrounding theory on finite worlds."""

from ._validation import (
    DegenerateSamplerError,
    DivergenceError,
    InstanceMismatchError,
    WrongKindError,
)
from .estimators import BradleyTerryRewardModel, PreferencePolicy
from .exact import (
    FrontierPoint,
    frontier_point,
    kl_to_ref,
    log_partition,
    optimal_policy,
    project_reward,
    reward_from_policy,
    rl_objective,
)
from .objectives import (
    LossReport,
    ParametricPolicy,
    ParametricReward,
    ac_objective,
    dpo_grad_direct,
    dpo_loss,
    implicit_reward,
    pl_dpo_loss,
    rm_nll,
    shaped_reward,
    sft_nll,
    unlikelihood_loss,
)
from .prefmodel import bt_prob, normalize_reward, pl_prob, shift_reward
from .taskgen import (
    Instance,
    PreferenceDataset,
    enumerate_soft_dataset,
    gen_instance,
    sample_pairs,
    sample_rankings,
)
from .train import (
    RunTrace,
    TrainConfig,
    best_of_n,
    fit_reward_model,
    rm_then_rl,
    sample_completion,
    train,
    train_reinforce,
    win_rate,
)

__version__ = "0.1.0"

__all__ = [
    "ac_objective",
    "best_of_n",
    "BradleyTerryRewardModel",
    "bt_prob",
    "DegenerateSamplerError",
    "DivergenceError",
    "dpo_grad_direct",
    "dpo_loss",
    "enumerate_soft_dataset",
    "fit_reward_model",
    "frontier_point",
    "FrontierPoint",
    "gen_instance",
    "implicit_reward",
    "Instance",
    "InstanceMismatchError",
    "kl_to_ref",
    "log_partition",
    "LossReport",
    "normalize_reward",
    "optimal_policy",
    "ParametricPolicy",
    "ParametricReward",
    "pl_dpo_loss",
    "pl_prob",
    "PreferenceDataset",
    "PreferencePolicy",
    "project_reward",
    "reward_from_policy",
    "rl_objective",
    "rm_nll",
    "rm_then_rl",
    "RunTrace",
    "sample_completion",
    "sample_pairs",
    "sample_rankings",
    "sft_nll",
    "shaped_reward",
    "shift_reward",
    "train",
    "train_reinforce",
    "TrainConfig",
    "unlikelihood_loss",
    "win_rate",
    "WrongKindError",
]
