"""scikit-learn style front end to the stacked-network solver."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .control import (ControlProblem, StackedPolicy, TrainingConfig, evaluate, rollout_batch, train)


def check_problem(problem) -> ControlProblem:
    """Reject objects that do not satisfy the ControlProblem contract."""
    if not isinstance(problem, ControlProblem):
        raise TypeError(f"expected a ControlProblem, got {type(problem).__name__}")
    if problem.state_dim <= 0 or problem.control_dim <= 0 or problem.horizon <= 0:
        raise ValueError("problem dimensions and horizon must be positive")
    s0 = np.asarray(problem.initial_state)
    if s0.shape != (problem.state_dim,) or not np.isfinite(s0).all():
        raise ValueError("initial state must be a finite vector of length state_dim")
    if (np.asarray(problem.eq_weights) < 0).any() or (np.asarray(problem.ineq_weights) < 0).any():
        raise ValueError("penalty coefficients must be nonnegative")
    if (np.asarray(problem.input_scale) <= 0).any():
        raise ValueError("input scales must be positive")
    return problem


def check_states(X, state_dim: int) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != state_dim:
        raise ValueError(f"states have {X.shape[1]} features, expected {state_dim}")
    return X


class StackedControlSolver(BaseEstimator):
    """Fit one subnetwork per timestep by Adam on sampled noise paths.

    ``fit(problem)`` trains; ``predict(states, t)`` gives the raw network
    control at step ``t``; ``score(problem)`` is the projected objective,
    signed so that larger is better.
    """

    def __init__(self, hidden_sizes=(32, 32), batch_size=64, n_iter=1000, learning_rate=1e-3,
                 validation_size=4096, validation_every=100, use_batchnorm=True, penalty=None,
                 random_state=0):
        self.hidden_sizes = hidden_sizes
        self.batch_size = batch_size
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.validation_size = validation_size
        self.validation_every = validation_every
        self.use_batchnorm = use_batchnorm
        self.penalty = penalty
        self.random_state = random_state

    def _config(self) -> TrainingConfig:
        return TrainingConfig(batch_size=self.batch_size, iterations=self.n_iter, learning_rate=self.learning_rate,
                              validation_size=self.validation_size, validation_every=self.validation_every,
                              seed=int(self.random_state or 0), hidden=tuple(self.hidden_sizes),
                              use_batchnorm=self.use_batchnorm, penalty=self.penalty)

    def fit(self, problem, y=None):
        problem = check_problem(problem)
        result = train(problem, self._config())
        self.policy_ = result.policy
        self.curve_ = result.curve
        self.n_iter_ = self.n_iter
        self.problem_ = problem.with_penalty(self.penalty)
        return self

    def _check_fitted(self):
        if not hasattr(self, "policy_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit(problem) first")

    def predict(self, states, t: int = 0, project: bool = False) -> np.ndarray:
        self._check_fitted()
        X = check_states(states, self.problem_.state_dim)
        if not 0 <= t < self.policy_.horizon:
            raise ValueError(f"timestep {t} outside [0, {self.policy_.horizon})")
        forced = self.problem_.forced_control(t, X)
        a = forced if forced is not None else self.policy_.act(t, X, mode="eval")
        if project:
            a = self.problem_.project(t, X, a)
        return np.asarray(a)

    def rollout(self, noise, project: bool = True):
        self._check_fitted()
        return rollout_batch(self.problem_, self.policy_, noise, mode="eval", penalized=not project,
                             project=project)

    def evaluate(self, problem=None, n_samples: int = 10_000, random_state=None):
        self._check_fitted()
        problem = self.problem_ if problem is None else check_problem(problem)
        seed = self.random_state if random_state is None else random_state
        return evaluate(problem, self.policy_, n_samples, int(seed or 0))

    def score(self, problem=None, y=None, n_samples: int = 10_000):
        report = self.evaluate(problem, n_samples)
        return report.mean if report.sense == "max" else -report.mean

    @classmethod
    def from_policy(cls, policy: StackedPolicy, problem: ControlProblem, **params):
        est = cls(**params)
        est.policy_ = policy
        est.problem_ = check_problem(problem)
        est.curve_ = []
        est.n_iter_ = 0
        return est
