"""prunerl: reinforcement-learning filter pruning with learned fine-tuning budgets.

An agent learns, per layer, which convolutional filters to prune (independent
Bernoulli units) and how many fine-tuning epochs each pruning attempt deserves
(a Normal action), trained with a Monte-Carlo score-function gradient against
a pluggable environment.
"""

from .core import (
    ActionSet,
    LayerSpec,
    ModelTopology,
    PruneMask,
    TopologyError,
    WeightTensor,
    layer_cr,
    model_cr,
)
from .environment import EnvError, Environment, SyntheticEnvConfig, SyntheticEnvironment
from .orchestrator import (
    PruneSession,
    RunReport,
    ScheduleConfig,
    plan_units,
    run_schedule,
    run_unit,
    select_best_mask,
)
from .policy import (
    PolicyOutput,
    PolicyParams,
    SigmaSchedule,
    load_checkpoint,
    policy_backward,
    policy_forward,
    sample_actions,
    save_checkpoint,
    update_sigma,
)
from .protocol import BackendError, ExternalEnvironment, ProtocolError, TransportError, serve
from .reinforce import (
    EpisodeBatch,
    OptimizerState,
    apply_update,
    bernoulli_score,
    estimate_gradient,
    normal_score,
)
from .rewards import (
    RewardConfig,
    RewardRecord,
    acc_term,
    eff_term,
    epochs_from_action,
    normalize_rewards,
    prune_reward,
    retrain_reward,
)

__version__ = "0.1.0"

__all__ = [
    "ActionSet",
    "BackendError",
    "EnvError",
    "Environment",
    "EpisodeBatch",
    "ExternalEnvironment",
    "LayerSpec",
    "ModelTopology",
    "OptimizerState",
    "PolicyOutput",
    "PolicyParams",
    "ProtocolError",
    "PruneMask",
    "PruneSession",
    "RewardConfig",
    "RewardRecord",
    "RunReport",
    "ScheduleConfig",
    "SigmaSchedule",
    "SyntheticEnvConfig",
    "SyntheticEnvironment",
    "TopologyError",
    "TransportError",
    "WeightTensor",
    "acc_term",
    "apply_update",
    "bernoulli_score",
    "eff_term",
    "epochs_from_action",
    "estimate_gradient",
    "layer_cr",
    "load_checkpoint",
    "model_cr",
    "normal_score",
    "normalize_rewards",
    "plan_units",
    "policy_backward",
    "policy_forward",
    "prune_reward",
    "retrain_reward",
    "run_schedule",
    "run_unit",
    "sample_actions",
    "save_checkpoint",
    "select_best_mask",
    "serve",
    "update_sigma",
]
