"""Backward induction for the price-impact execution model.

With z = diag(p~) w (dollar value still to buy) the value function is an
exact quadratic form in v = [z, x, 1], and the optimal dollar trade
y = diag(p~) a is linear in v.  The recursion propagates the quadratic form
through the expected one-period dynamics; the last period buys the
remainder.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ..envs.execution import ExecutionModel


@dataclass
class QuadraticValue:
    forms: List[np.ndarray]   # H_t, V_t(v) = v^T H_t v
    gains: List[np.ndarray]   # K_t, y*_t = K_t v
    n: int
    m: int

    def features(self, state: np.ndarray) -> np.ndarray:
        n, m = self.n, self.m
        state = np.asarray(state, dtype=np.float64)
        p, x, w = state[..., :n], state[..., n:n + m], state[..., n + m:2 * n + m]
        return np.concatenate([p * w, x, np.ones(state.shape[:-1] + (1,))], axis=-1)

    def value(self, t: int, state: np.ndarray) -> np.ndarray:
        v = self.features(state)
        return np.einsum("...i,ij,...j->...", v, self.forms[t], v)

    def action(self, t: int, state: np.ndarray) -> np.ndarray:
        """Optimal shares to buy at step t."""
        v = self.features(state)
        return (v @ self.gains[t].T) / np.asarray(state)[..., :self.n]


@dataclass
class ExecutionOracle:
    value: QuadraticValue
    expected_cost: float
    no_impact_cost: float

    def action(self, t, state):
        return self.value.action(t, state)


def _stage_form(model: ExecutionModel) -> np.ndarray:
    """Quadratic form of 1'y + y'Ay + y'Bx over [y, z, x, 1]."""
    n, m = model.n, model.m
    size = 2 * n + m + 1
    one = size - 1
    S = np.zeros((size, size))
    S[:n, :n] = model.A
    S[:n, 2 * n:2 * n + m] = model.B / 2
    S[2 * n:2 * n + m, :n] = model.B.T / 2
    S[:n, one] = 0.5
    S[one, :n] = 0.5
    return S


def _expected_next_form(H: np.ndarray, model: ExecutionModel) -> np.ndarray:
    """Form over [u, x, 1] equal to E V_{t+1}(diag(eps) u, C x + eta, 1)."""
    n, m = model.n, model.m
    zs, xs, o = slice(0, n), slice(n, n + m), n + m
    g = model.growth
    C = model.C
    out = np.zeros_like(H)
    out[zs, zs] = H[zs, zs] * model.price_second_moment
    out[zs, xs] = (g[:, None] * H[zs, xs]) @ C
    out[xs, zs] = out[zs, xs].T
    out[zs, o] = g * H[zs, o]
    out[o, zs] = out[zs, o]
    out[xs, xs] = C.T @ H[xs, xs] @ C
    out[xs, o] = C.T @ H[xs, o]
    out[o, xs] = out[xs, o]
    out[o, o] = H[o, o] + np.trace(H[xs, xs] @ model.factor_cov)
    return out


def execution_optimal(model: ExecutionModel, residual_tol: float = 1e-8, check_states: int = 64,
                      seed: int = 0) -> ExecutionOracle:
    n, m, T = model.n, model.m, model.horizon
    k = n + m + 1
    S = _stage_form(model)
    # [y, z, x, 1] -> [u = z - y, x, 1]
    L = np.zeros((k, n + k))
    L[:n, :n] = -np.eye(n)
    L[:n, n:2 * n] = np.eye(n)
    L[n:, 2 * n:] = np.eye(m + 1)
    # forced last trade y = z: [z, x, 1] -> [y, z, x, 1]
    E = np.zeros((n + k, k))
    E[:n, :n] = np.eye(n)
    E[n:, :] = np.eye(k)

    forms = [None] * T
    gains = [None] * T
    forms[T - 1] = E.T @ S @ E
    gains[T - 1] = np.hstack([np.eye(n), np.zeros((n, m + 1))])
    for t in range(T - 2, -1, -1):
        J = S + L.T @ _expected_next_form(forms[t + 1], model) @ L
        J = (J + J.T) / 2
        Jyy, Jyr, Jrr = J[:n, :n], J[:n, n:], J[n:, n:]
        if np.linalg.eigvalsh(Jyy).min() <= 0:
            raise ValueError(f"per-period problem not convex at t={t}")
        K = -np.linalg.solve(Jyy, Jyr)
        H = Jrr + Jyr.T @ K
        forms[t] = (H + H.T) / 2
        gains[t] = K
    for t, H in enumerate(forms):
        if np.linalg.eigvalsh(H[:n, :n]).min() <= 0:
            raise ValueError(f"value form not positive definite in the holdings block at t={t}")
    qv = QuadraticValue(forms, gains, n, m)
    _check_residual(qv, model, residual_tol, check_states, seed)
    s0 = np.concatenate([model.p0, model.x0, model.target])
    return ExecutionOracle(qv, float(qv.value(0, s0)), model.no_impact_cost())


def _check_residual(qv: QuadraticValue, model: ExecutionModel, tol: float, count: int, seed: int):
    """Bellman residual of the quadratic ansatz at random states, computed pointwise."""
    rng = np.random.default_rng(seed)
    n, m = model.n, model.m
    o = n + m
    g = model.growth
    Psi = model.price_second_moment
    for t in range(model.horizon - 1):
        H1 = qv.forms[t + 1]
        Hzz, Hzx, Hz1 = H1[:n, :n], H1[:n, n:o], H1[:n, o]
        Hxx, Hx1, H11 = H1[n:o, n:o], H1[n:o, o], H1[o, o]
        for _ in range(count):
            p = model.p0 * np.exp(0.1 * rng.standard_normal(n))
            x = rng.standard_normal(m)
            w = model.target * rng.uniform(-0.5, 1.5, n)
            state = np.concatenate([p, x, w])
            a = qv.action(t, state)
            y, z = p * a, p * w
            stage = np.sum((p + p * (model.A @ y + model.B @ x)) * a)
            u = z - y
            cx = model.C @ x
            nxt = (u @ (Hzz * Psi) @ u + 2 * (g * u) @ Hzx @ cx + 2 * (g * u) @ Hz1
                   + cx @ Hxx @ cx + np.trace(Hxx @ model.factor_cov) + 2 * cx @ Hx1 + H11)
            lhs = float(qv.value(t, state))
            rhs = stage + nxt
            if abs(lhs - rhs) > tol * max(1.0, abs(lhs)):
                raise ValueError(f"quadratic value ansatz residual {abs(lhs - rhs):.3e} at t={t}")
