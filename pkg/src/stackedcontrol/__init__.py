"""Deep stacked-network solver for finite-horizon stochastic control."""
from .control import (ControlProblem, EvaluationReport, RolloutResult, StackedPolicy, TrainingConfig,
                      apply_penalties, evaluate, gradient_check, relative_metric, rollout_batch, train)
from .estimator import StackedControlSolver

__version__ = "0.1.0"

__all__ = [
    "ControlProblem", "EvaluationReport", "RolloutResult", "StackedControlSolver", "StackedPolicy",
    "TrainingConfig", "apply_penalties", "evaluate", "gradient_check", "relative_metric", "rollout_batch",
    "train",
]
