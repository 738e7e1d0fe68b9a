"""Optimal execution of a block purchase under linear percentage price impact.

Executed price p = p~ + diag(p~) (A diag(p~) a + B x), where p~ follows a
geometric Brownian motion and the market factors x follow x' = C x + eta.
State layout: [p~ (n), x (m), w (n)] with w the shares still to buy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import diffgraph as dg
from ..control import ControlProblem


@dataclass
class ExecutionModel:
    A: np.ndarray             # (n, n) symmetric positive definite impact
    B: np.ndarray             # (n, m) factor impact
    C: np.ndarray             # (m, m) factor transition
    factor_cov: np.ndarray    # (m, m) covariance of eta
    price_drift: np.ndarray   # (n,) GBM drift per unit time
    price_cov: np.ndarray     # (n, n) GBM covariance per unit time
    target: np.ndarray        # (n,) shares to buy
    p0: np.ndarray            # (n,)
    x0: np.ndarray            # (m,)
    horizon: int
    dt: float = 1.0

    def __post_init__(self):
        for name in ("A", "B", "C", "factor_cov", "price_drift", "price_cov", "target", "p0", "x0"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n, m = self.n, self.m
        if self.A.shape != (n, n) or self.B.shape != (n, m) or self.C.shape != (m, m):
            raise ValueError("impact/factor matrices have inconsistent shapes")
        if self.factor_cov.shape != (m, m) or self.price_cov.shape != (n, n):
            raise ValueError("covariance matrices have inconsistent shapes")
        if self.price_drift.shape != (n,) or self.target.shape != (n,) or self.x0.shape != (m,):
            raise ValueError("vectors have inconsistent shapes")
        if not np.allclose(self.A, self.A.T, rtol=0, atol=1e-15 * max(1.0, np.abs(self.A).max())):
            raise ValueError("A must be symmetric")
        if np.linalg.eigvalsh(self.A).min() <= 0:
            raise ValueError("A must be positive definite")
        if m and np.abs(np.linalg.eigvals(self.C)).max() >= 1:
            raise ValueError("spectral radius of C must be below 1")
        if (self.p0 <= 0).any():
            raise ValueError("initial prices must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")

    @property
    def n(self) -> int:
        return self.target.size

    @property
    def m(self) -> int:
        return self.x0.size

    @property
    def growth(self) -> np.ndarray:
        """E[p~_{t+1} / p~_t] per stock."""
        return np.exp(self.price_drift * self.dt)

    @property
    def price_second_moment(self) -> np.ndarray:
        """E[eps eps^T] for the one-period gross return vector eps."""
        g = self.growth
        return np.outer(g, g) * np.exp(self.price_cov * self.dt)

    def no_impact_cost(self) -> float:
        return float(self.p0 @ self.target)

    def to_dict(self) -> dict:
        return {"kind": "execution", "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(),
                "factor_cov": self.factor_cov.tolist(), "price_drift": self.price_drift.tolist(),
                "price_cov": self.price_cov.tolist(), "target": self.target.tolist(),
                "p0": self.p0.tolist(), "x0": self.x0.tolist(), "horizon": self.horizon, "dt": self.dt}

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionModel":
        keys = ("A", "B", "C", "factor_cov", "price_drift", "price_cov", "target", "p0", "x0", "horizon")
        missing = [k for k in keys if k not in d]
        if missing:
            raise KeyError(f"execution model is missing fields: {missing}")
        return cls(**{k: d[k] for k in keys}, dt=d.get("dt", 1.0))


def canonical_execution_model(horizon: int = 5, n: int = 10, m: int = 3, seed: int = 20170502,
                              impact: float = 1e-9, factor_impact: float = 1e-3, vol: float = 0.02,
                              correlation: float = 0.3, shares: float = 1e5, price: float = 50.0) -> ExecutionModel:
    """Desk-scale parameter set: impact of a few cents per share at a 50-dollar price."""
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((n, n))
    U = L @ L.T / n
    U = U / np.linalg.eigvalsh(U).max()
    A = impact * (np.eye(n) + 0.5 * U)
    A = (A + A.T) / 2
    B = factor_impact * rng.standard_normal((n, m))
    C = rng.standard_normal((m, m))
    C = 0.5 * C / np.abs(np.linalg.eigvals(C)).max()
    factor_cov = (1 - 0.25) * np.eye(m)
    price_cov = vol ** 2 * (correlation * np.ones((n, n)) + (1 - correlation) * np.eye(n))
    return ExecutionModel(A, B, C, factor_cov, np.zeros(n), price_cov, np.full(n, shares),
                          np.full(n, price), np.zeros(m), horizon)


def _colmul(P, v):
    """Batched P @ v for P (..., n, n) and v (..., n)."""
    shape = dg.value(v).shape
    return dg.reshape(dg.matmul(P, dg.reshape(v, shape + (1,))), shape)


def execution_price(p_tilde, x, a, model: ExecutionModel):
    """p = p~ + P~ (A P~ a + B x) with P~ = diag(p~)."""
    if (dg.value(p_tilde) <= 0).any():
        raise ValueError("no-impact price must be positive")
    P = dg.diag(p_tilde)
    inner = dg.add(dg.matmul(_colmul(P, a), model.A.T), dg.matmul(x, model.B.T))
    return dg.add(p_tilde, _colmul(P, inner))


def execution_step(state: np.ndarray, a: np.ndarray, noise: np.ndarray, model: ExecutionModel, t: int):
    """Advance one period; returns (next state, period cost, traded shares)."""
    n, m = model.n, model.m
    p, x, w = state[..., :n], state[..., n:n + m], state[..., n + m:]
    if t == model.horizon - 1:
        a = w
    cost = np.sum(execution_price(p, x, a, model) * a, axis=-1)
    nxt = np.concatenate([p + noise[..., :n], x @ model.C.T + noise[..., n:n + m], w - a], axis=-1)
    return nxt, cost, a


def execution_relative_cost(policy_cost: float, oracle_cost: float, no_impact_cost: float) -> float:
    """Ratio of costs measured above the no-impact cost p_0^T a_bar."""
    denom = oracle_cost - no_impact_cost
    if abs(denom) <= 1e-12 * max(1.0, abs(no_impact_cost)):
        raise ValueError("oracle cost equals the no-impact cost; relative trading cost undefined")
    return (policy_cost - no_impact_cost) / denom


class ExecutionProblem(ControlProblem):
    name = "execution"

    def __init__(self, model: ExecutionModel):
        self.model = model
        n, m = model.n, model.m
        self.state_dim = 2 * n + m
        self.control_dim = n
        self.horizon = model.horizon
        super().__init__()
        self.initial_state = np.concatenate([model.p0, model.x0, model.target])
        vol = np.sqrt(np.diag(model.price_cov) * model.dt * model.horizon)
        fac_sd = np.sqrt(np.diag(_stationary_cov(model.C, model.factor_cov)))
        self.input_shift = np.concatenate([model.p0, np.zeros(m), np.zeros(n)])
        self.input_scale = np.concatenate([model.p0 * np.maximum(vol, 1e-3), np.maximum(fac_sd, 1e-12),
                                           np.maximum(np.abs(model.target), 1.0)])
        self.action_scale = np.maximum(np.abs(model.target), 1.0) / model.horizon
        self._chol = _psd_sqrt(model.price_cov * model.dt)
        self._fchol = _psd_sqrt(model.factor_cov)

    def sample_noise(self, batch, rng):
        model, T, n, m = self.model, self.horizon, self.model.n, self.model.m
        z = rng.standard_normal((batch, T, n)) @ self._chol.T
        drift = (model.price_drift - 0.5 * np.diag(model.price_cov)) * model.dt
        logp = np.log(model.p0) + np.concatenate([np.zeros((batch, 1, n)), np.cumsum(drift + z, axis=1)], axis=1)
        prices = np.exp(logp)
        eta = rng.standard_normal((batch, T, m)) @ self._fchol.T
        return np.concatenate([np.diff(prices, axis=1), eta, np.zeros((batch, T, n))], axis=-1)

    def _split(self, s):
        n, m = self.model.n, self.model.m
        return (dg.take(s, (Ellipsis, slice(0, n))), dg.take(s, (Ellipsis, slice(n, n + m))),
                dg.take(s, (Ellipsis, slice(n + m, 2 * n + m))))

    def drift(self, t, s, a):
        _, x, _ = self._split(s)
        p_shape = dg.value(a).shape
        return dg.concat([np.zeros(p_shape), dg.matmul(x, (self.model.C - np.eye(self.model.m)).T),
                          dg.mul(a, -1.0)], axis=-1)

    def cost(self, t, s, a):
        p, x, _ = self._split(s)
        return dg.sum(dg.mul(execution_price(p, x, a, self.model), a), axis=-1)

    def forced_control(self, t, s):
        if t == self.horizon - 1:
            return self._split(s)[2]
        return None

    def control_variate(self, states, actions, noise):
        n, m = self.model.n, self.model.m
        p = states[:, :, :n]
        w = states[:, :, n + m:]
        g = self.model.growth
        # martingale increments of p~ times shares held over the period: zero mean
        return np.einsum("btn,btn->b", p[:, 1:self.horizon] - g * p[:, :self.horizon - 1], w[:, 1:self.horizon])


def _psd_sqrt(M):
    vals, vecs = np.linalg.eigh((M + M.T) / 2)
    return vecs * np.sqrt(np.maximum(vals, 0.0))


def _stationary_cov(C, S, iters: int = 500):
    m = C.shape[0]
    if m == 0:
        return np.zeros((0, 0))
    P = np.zeros((m, m))
    for _ in range(iters):
        P = C @ P @ C.T + S
    return P
