"""Finite-horizon discrete Riccati recursion for the LQ toy."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ..envs.lq import LQToy


@dataclass
class RiccatiSolution:
    gains: List[np.ndarray]      # a_t = -K_t s_t
    cost_to_go: List[np.ndarray] # P_0 .. P_T
    expected_cost: float

    def action(self, t: int, s: np.ndarray) -> np.ndarray:
        return -np.asarray(s) @ self.gains[t].T


def lq_riccati(problem: LQToy) -> RiccatiSolution:
    F, G, Q, R = problem.F, problem.G, problem.Q, problem.R
    if np.linalg.eigvalsh((R + R.T) / 2).min() <= 0:
        raise ValueError("R must be positive definite")
    T = problem.horizon
    P = problem.Q_T.copy()
    Ps = [P]
    gains = []
    noise_term = 0.0
    for _ in range(T):
        noise_term += np.trace(P @ problem.noise_cov)
        K = np.linalg.solve(R + G.T @ P @ G, G.T @ P @ F)
        P = Q + F.T @ P @ F - F.T @ P @ G @ K
        P = (P + P.T) / 2
        gains.append(K)
        Ps.append(P)
    gains.reverse()
    Ps.reverse()
    s0 = problem.initial_state
    return RiccatiSolution(gains, Ps, float(s0 @ Ps[0] @ s0 + noise_term))
