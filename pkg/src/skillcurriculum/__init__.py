"""Continual skill learning with transfer-cost curricula and product-of-experts mixing."""
from .curriculum import SCRATCH, CurriculumTree, TaskGraph, build_graph, max_arborescence, min_arborescence, \
    remove_edge_and_replan, to_dot, traversal
from .envs import TASK_NAMES, TaskSpec, make_task_space, rollout
from .policy import GaussianPolicy, MixerFunction, MixturePolicy, ValueFunction, poe_compose
from .trainer import BCConfig, PpoConfig, TrainCurve, behavioral_clone, gae, train, value_warmup
from .transfer import CostMatrix, RejectionRule, build_cost_matrix, evaluate, rejection_check
from .continual import CurriculumMode, SkillLibrary, run_continual, frontier
from .mixture import MixturePolicySet, adapt, pretrain, select_pretrain_tasks

__version__ = "0.1.0"
