"""Feedforward subnetworks with batch normalization, and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffgraph as dg

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"dense layer shapes disagree: W {self.W.shape}, b {self.b.shape}")


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, width: int, epsilon: float = BN_EPSILON, momentum: float = BN_MOMENTUM):
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width), epsilon, momentum)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("batch-norm epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("batch-norm momentum must lie in (0, 1)")


class Subnetwork:
    """Affine layers with ReLU between them; optional batch norm before each ReLU.

    The output layer is linear, or passed through a ReLU when
    ``output_head == "nonnegative"``.
    """

    def __init__(self, dense: List[DenseLayer], bn: List[BatchNormLayer], output_head: str = "linear"):
        if output_head not in ("linear", "nonnegative"):
            raise ValueError(f"unknown output head {output_head!r}")
        if len(bn) != len(dense) - 1:
            raise ValueError("need one batch-norm layer per hidden layer")
        for prev, nxt in zip(dense, dense[1:]):
            if nxt.W.shape[1] != prev.W.shape[0]:
                raise ValueError("consecutive layer widths disagree")
        self.dense = dense
        self.bn = bn
        self.output_head = output_head

    @property
    def input_dim(self) -> int:
        return self.dense[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.dense[-1].W.shape[0]

    @property
    def hidden_count(self) -> int:
        return len(self.dense) - 1

    @property
    def widths(self) -> List[int]:
        return [layer.W.shape[0] for layer in self.dense[:-1]]

    def parameters(self, use_batchnorm: bool = True) -> Dict[str, np.ndarray]:
        """Trainable arrays keyed by name; the arrays are the live storage."""
        params = {}
        for k, layer in enumerate(self.dense):
            params[f"dense{k}.W"] = layer.W
            params[f"dense{k}.b"] = layer.b
        if use_batchnorm:
            for k, layer in enumerate(self.bn):
                params[f"bn{k}.gamma"] = layer.gamma
                params[f"bn{k}.beta"] = layer.beta
        return params

    def forward(self, x, mode: str = "eval", use_batchnorm: bool = True,
                params: Optional[Dict[str, object]] = None, update_stats: bool = True):
        """Map a (batch, input_dim) state batch to a (batch, output_dim) action batch.

        ``params`` may hold tape leaves standing in for the stored arrays;
        anything missing falls back to the stored array.
        """
        return subnetwork_forward(self, x, mode, use_batchnorm, params, update_stats)


def init_subnetwork(input_dim: int, hidden: Sequence[int], output_dim: int,
                    output_head: str = "linear", seed=0) -> Subnetwork:
    """Normal init with std sqrt(2 / fan_in); zero biases; identity batch norm."""
    widths = [input_dim, *hidden, output_dim]
    if any(int(w) <= 0 for w in widths):
        raise ValueError(f"layer widths must be positive, got {widths}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dense = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        dense.append(DenseLayer(W, np.zeros(fan_out)))
    bn = [BatchNormLayer.fresh(w) for w in hidden]
    return Subnetwork(dense, bn, output_head)


def batchnorm_forward(x, layer: BatchNormLayer, mode: str = "train", gamma=None, beta=None,
                      update_stats: bool = True):
    """Normalize per feature; train mode uses batch statistics and updates the running ones."""
    gamma = layer.gamma if gamma is None else gamma
    beta = layer.beta if beta is None else beta
    if mode == "train":
        xv = dg.value(x)
        if xv.ndim != 2 or xv.shape[0] < 2:
            raise ValueError(f"train-mode batch norm needs a batch of at least 2 rows, got {xv.shape}")
        out = dg.batchnorm(x, gamma, beta, layer.epsilon)
        if update_stats:
            m = layer.momentum
            # in place so that parameter dicts keep pointing at live storage
            layer.moving_mean *= m
            layer.moving_mean += (1 - m) * xv.mean(axis=0)
            layer.moving_var *= m
            layer.moving_var += (1 - m) * xv.var(axis=0)
        return out
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    scale = 1.0 / np.sqrt(layer.moving_var + layer.epsilon)
    return dg.add(dg.mul(dg.mul(dg.sub(x, layer.moving_mean), scale), gamma), beta)


def subnetwork_forward(net: Subnetwork, x, mode: str = "eval", use_batchnorm: bool = True,
                       params: Optional[Dict[str, object]] = None, update_stats: bool = True):
    params = params or {}
    h = x
    last = len(net.dense) - 1
    for k, layer in enumerate(net.dense):
        W = params.get(f"dense{k}.W", layer.W)
        b = params.get(f"dense{k}.b", layer.b)
        h = dg.affine(h, W, b)
        if k < last:
            if use_batchnorm:
                bn = net.bn[k]
                h = batchnorm_forward(h, bn, mode, params.get(f"bn{k}.gamma"), params.get(f"bn{k}.beta"),
                                      update_stats)
            h = dg.relu(h)
    if net.output_head == "nonnegative":
        h = dg.relu(h)
    return h


@dataclass
class AdamState:
    first_moment: Dict[object, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[object, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8
    schedule: List[Tuple[int, float]] = field(default_factory=lambda: [(0, 1e-3)])

    def __post_init__(self):
        self.schedule = normalize_schedule(self.schedule)

    def learning_rate(self, step: Optional[int] = None) -> float:
        step = self.step if step is None else step
        rate = self.schedule[0][1]
        for start, r in self.schedule:
            if step >= start:
                rate = r
        return rate


def normalize_schedule(schedule) -> List[Tuple[int, float]]:
    """Accept a bare rate or a list of (start_iteration, rate) pairs."""
    if np.isscalar(schedule):
        schedule = [(0, float(schedule))]
    out = sorted((int(s), float(r)) for s, r in schedule)
    if not out or out[0][0] != 0:
        raise ValueError("learning-rate schedule must start at iteration 0")
    if any(r <= 0 for _, r in out):
        raise ValueError("learning rates must be positive")
    return out


def adam_step(params: Dict[object, np.ndarray], grads: Dict[object, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise dg.NonFiniteError(f"adam_step: non-finite gradient for parameter {key!r}")
        if g.shape != params[key].shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {params[key].shape} for {key!r}")
    lr = state.learning_rate()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for key, g in grads.items():
        m = state.first_moment.get(key)
        if m is None:
            m = state.first_moment[key] = np.zeros_like(g)
            state.second_moment[key] = np.zeros_like(g)
        v = state.second_moment[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[key] -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon_hat)
