"""Tree-structured policy optimisation for masked diffusion language models, at toy scale."""

from .autograd import NumericError, Tensor
from .estimator import (
    BoundReport,
    OrderDistribution,
    check_bounds,
    confidence_gap,
    exact_transition_prob,
    single_pass_log_prob,
)
from .objective import MODES, ObjectiveConfig, ScheduleConfig, lambda_schedule, tau_schedule, total_loss
from .policy import PolicyConfig, PolicyModel, SequenceState, Vocabulary, generate, load_checkpoint, save_checkpoint
from .tasks import VOCAB, TaskSpec, sample_instance
from .trainer import TrainConfig, ablate, evaluate, train, verify_bounds
from .tree import TreeConfig, build_tree, compute_advantages, propagate_rewards, tree_cost, validate_block_alignment

__version__ = "0.1.0"
