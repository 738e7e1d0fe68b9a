"""Finite-state first-order Markov chains sampled by inverse CDF."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MarkovChain:
    levels: np.ndarray        # value of each state
    transition: np.ndarray    # row-stochastic (k, k)

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        P = np.asarray(self.transition, dtype=np.float64)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "transition", P)
        k = levels.size
        if P.shape != (k, k):
            raise ValueError(f"transition matrix shape {P.shape} does not match {k} levels")
        if (P < 0).any() or np.abs(P.sum(axis=1) - 1).max() > 1e-12:
            raise ValueError("transition matrix must be row-stochastic")
        object.__setattr__(self, "_cdf", np.cumsum(P, axis=1))

    @property
    def size(self) -> int:
        return self.levels.size

    def index_of(self, value) -> np.ndarray:
        """Index of the level nearest to each value."""
        value = np.asarray(value, dtype=np.float64)
        return np.abs(value[..., None] - self.levels).argmin(axis=-1)

    def stationary(self) -> np.ndarray:
        vals, vecs = np.linalg.eig(self.transition.T)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
        return v / v.sum()

    def step(self, index, u) -> np.ndarray:
        return markov_step(self, index, u)

    def simulate(self, start_index: int, uniforms: np.ndarray) -> np.ndarray:
        """Index paths of shape (batch, steps + 1) driven by (batch, steps) uniforms."""
        uniforms = np.atleast_2d(uniforms)
        batch, steps = uniforms.shape
        out = np.empty((batch, steps + 1), dtype=np.int64)
        out[:, 0] = start_index
        for k in range(steps):
            out[:, k + 1] = markov_step(self, out[:, k], uniforms[:, k])
        return out


def markov_step(chain: MarkovChain, index, u) -> np.ndarray:
    """Next state: first j with u < cumulative row probability up to j."""
    index = np.asarray(index)
    u = np.asarray(u, dtype=np.float64)
    if ((u < 0) | (u >= 1)).any():
        raise ValueError("uniform draws must lie in [0, 1)")
    cdf = chain._cdf[index]
    nxt = (cdf <= u[..., None]).sum(axis=-1)
    return np.minimum(nxt, chain.size - 1)


def persistent_chain(levels, stay: float = 0.5) -> MarkovChain:
    """Tridiagonal chain: stay put w.p. ``stay``, else move to a neighbor.

    Boundary states send the neighbor mass to their only neighbor.
    """
    levels = np.asarray(levels, dtype=np.float64)
    k = levels.size
    P = np.zeros((k, k))
    if k == 1:
        P[0, 0] = 1.0
        return MarkovChain(levels, P)
    move = (1 - stay) / 2
    for i in range(k):
        P[i, i] = stay
        if i == 0:
            P[i, 1] = 2 * move
        elif i == k - 1:
            P[i, k - 2] = 2 * move
        else:
            P[i, i - 1] = move
            P[i, i + 1] = move
    return MarkovChain(levels, P)


def frozen_chain(levels) -> MarkovChain:
    levels = np.asarray(levels, dtype=np.float64)
    return MarkovChain(levels, np.eye(levels.size))
