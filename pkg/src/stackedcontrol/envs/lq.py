"""Linear-quadratic toy problem with a known Riccati solution."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .. import diffgraph as dg
from ..control import ControlProblem


class LQToy(ControlProblem):
    """s' = F s + G a + xi, cost s'Qs + a'Ra, terminal s'Q_T s, Gaussian xi.

    ``control_bound`` adds the box |a_i| <= bound as inequality constraints
    (penalized in training, clipped at evaluation).  The Riccati oracle
    ignores it.
    """

    name = "lq"

    def __init__(self, F, G, Q, R, Q_T, noise_cov, s0, horizon: int,
                 control_bound: Optional[float] = None, penalty: float = 100.0):
        F, G, Q, R, Q_T, noise_cov = (np.atleast_2d(np.asarray(x, dtype=np.float64))
                                      for x in (F, G, Q, R, Q_T, noise_cov))
        self.state_dim = F.shape[0]
        self.control_dim = G.shape[1]
        self.horizon = int(horizon)
        super().__init__()
        m, n = self.state_dim, self.control_dim
        if F.shape != (m, m) or G.shape != (m, n) or Q.shape != (m, m) or Q_T.shape != (m, m):
            raise ValueError("LQ matrices have inconsistent shapes")
        if R.shape != (n, n) or noise_cov.shape != (m, m):
            raise ValueError("LQ matrices have inconsistent shapes")
        for name, M in (("Q", Q), ("Q_T", Q_T)):
            if np.linalg.eigvalsh((M + M.T) / 2).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        if np.linalg.eigvalsh((R + R.T) / 2).min() <= 0:
            raise ValueError("R must be positive definite")
        self.F, self.G, self.Q, self.R, self.Q_T, self.noise_cov = F, G, Q, R, Q_T, noise_cov
        self.initial_state = np.asarray(s0, dtype=np.float64).reshape(m)
        vals, vecs = np.linalg.eigh((noise_cov + noise_cov.T) / 2)
        self._chol = vecs * np.sqrt(np.maximum(vals, 0.0))
        self.control_bound = control_bound
        if control_bound is not None:
            self.ineq_weights = np.full(2 * n, float(penalty))
        scale = np.maximum(np.abs(self.initial_state), np.sqrt(np.diag(noise_cov) * max(self.horizon, 1)))
        self.input_scale = np.where(scale > 0, scale, 1.0)

    def to_dict(self) -> dict:
        return {"kind": "lq", "F": self.F.tolist(), "G": self.G.tolist(), "Q": self.Q.tolist(),
                "R": self.R.tolist(), "Q_T": self.Q_T.tolist(), "noise_cov": self.noise_cov.tolist(),
                "s0": self.initial_state.tolist(), "horizon": self.horizon,
                "control_bound": self.control_bound}

    def sample_noise(self, batch, rng):
        z = rng.standard_normal((batch, self.horizon, self.state_dim))
        return z @ self._chol.T

    def drift(self, t, s, a):
        return dg.add(dg.matmul(s, (self.F - np.eye(self.state_dim)).T), dg.matmul(a, self.G.T))

    def cost(self, t, s, a):
        return dg.add(dg.sum(dg.mul(dg.matmul(s, self.Q), s), axis=-1),
                      dg.sum(dg.mul(dg.matmul(a, self.R), a), axis=-1))

    def terminal_cost(self, s):
        return dg.sum(dg.mul(dg.matmul(s, self.Q_T), s), axis=-1)

    def inequality(self, t, s, a):
        if self.control_bound is None:
            return []
        b = self.control_bound
        out = []
        for i in range(self.control_dim):
            ai = dg.take(a, (Ellipsis, i))
            out.append(dg.sub(b, ai))
            out.append(dg.add(ai, b))
        return out

    def project(self, t, s, a):
        if self.control_bound is None:
            return a
        return np.clip(a, -self.control_bound, self.control_bound)


def random_lq(seed: int = 0, state_dim: int = 2, control_dim: int = 2, horizon: int = 3,
              constrained: bool = True) -> LQToy:
    """Small random instance, used by the gradient checks."""
    rng = np.random.default_rng(seed)
    m, n = state_dim, control_dim
    F = np.eye(m) + 0.3 * rng.standard_normal((m, m))
    G = rng.standard_normal((m, n))
    L = rng.standard_normal((m, m))
    Q = L @ L.T / m + 0.1 * np.eye(m)
    Lr = rng.standard_normal((n, n))
    R = Lr @ Lr.T / n + 0.5 * np.eye(n)
    s0 = rng.normal(0, 1, m)
    return LQToy(F, G, Q, R, Q.copy(), 0.04 * np.eye(m), s0, horizon,
                 control_bound=0.5 if constrained else None, penalty=10.0)


def default_lq(horizon: int = 5) -> LQToy:
    """The two-dimensional instance used by the acceptance run."""
    F = np.array([[1.0, 0.1], [0.0, 1.0]])
    G = np.array([[0.5, 0.0], [0.1, 0.5]])
    Q = np.eye(2)
    R = 0.5 * np.eye(2)
    return LQToy(F, G, Q, R, Q.copy(), 0.01 * np.eye(2), [1.0, -1.0], horizon)
