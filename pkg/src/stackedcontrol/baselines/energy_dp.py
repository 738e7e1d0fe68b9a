"""Backward dynamic programming lookup table for single-device storage.

Given the charge from wind ``wr`` and the total discharge ``q = rd + rm``,
the rest of the control is fixed by dominance: wind goes to demand first
(``wd = min(w - wr, d)``), discharge serves demand before the market, and
the market covers what is left.  The reward is then ``p (wd + q)``, so the
table searches a two-dimensional mesh over (wr, q) at every grid state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..control import stream_rng, STREAM_TEST
from ..envs.energy import MD, RD, RM, WD, WR, EnergySingleModel

TABLE_FORMAT_VERSION = 1


@dataclass
class ValueTable:
    r_grid: np.ndarray
    wind_levels: np.ndarray
    price_levels: np.ndarray
    demand_levels: np.ndarray
    values: np.ndarray        # (T + 1, nr, nw, np, nd)
    charge: np.ndarray        # greedy wr, (T, nr, nw, np, nd)
    discharge: np.ndarray     # greedy q = rd + rm

    @property
    def horizon(self) -> int:
        return self.charge.shape[0]

    def r_index(self, r, tol: Optional[float] = None) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        idx = np.abs(r[..., None] - self.r_grid).argmin(axis=-1)
        if tol is not None and (np.abs(self.r_grid[idx] - r) > tol).any():
            raise ValueError("storage level is off the table grid beyond the snapping tolerance")
        return idx

    def indices(self, s, tol: Optional[float] = None):
        s = np.asarray(s, dtype=np.float64)
        out = [self.r_index(s[..., 0], tol)]
        for k, levels in ((1, self.wind_levels), (2, self.price_levels), (3, self.demand_levels)):
            idx = np.abs(s[..., k][..., None] - levels).argmin(axis=-1)
            if (np.abs(levels[idx] - s[..., k]) > 1e-9).any():
                raise ValueError("exogenous state is not a table level")
            out.append(idx)
        return tuple(out)

    def root_value(self, s0) -> float:
        return float(self.values[(0,) + self.indices(s0)])

    def action(self, t: int, s, model: EnergySingleModel, tol: Optional[float] = None) -> np.ndarray:
        """Full five-component greedy control at state(s) s."""
        idx = (t,) + self.indices(s, tol)
        return assemble_control(np.asarray(s, dtype=np.float64), self.charge[idx], self.discharge[idx])


def assemble_control(s: np.ndarray, wr, q) -> np.ndarray:
    w, d = s[..., 1], s[..., 3]
    wd = np.minimum(np.maximum(w - wr, 0.0), d)
    rd = np.minimum(q, d - wd)
    a = np.zeros(np.shape(w) + (5,))
    a[..., WD] = wd
    a[..., RD] = rd
    a[..., RM] = q - rd
    a[..., WR] = wr
    a[..., MD] = d - wd - rd
    return a


def _mesh(upper: np.ndarray, step: float, count: int) -> np.ndarray:
    """Candidates min(k * step, upper) for k = 0..count-1, upper included."""
    ks = np.arange(count) * step
    return np.minimum(ks, upper[..., None])


def energy_dp_lookup(model: EnergySingleModel, r_points: int = 51, action_step: Optional[float] = None) -> ValueTable:
    """Backward induction on the (r, w, p, d) grid; next r snapped to the nearest grid point."""
    if r_points < 2:
        raise ValueError("need at least two storage grid points")
    T = model.horizon
    r_grid = np.linspace(0.0, model.capacity, r_points)
    step = action_step or (r_grid[1] - r_grid[0])
    if step <= 0:
        raise ValueError("action step must be positive")
    W, P, D = model.wind.levels, model.price.levels, model.demand.levels
    nr, nw, np_, nd = r_points, W.size, P.size, D.size
    Pw, Pp, Pd = model.wind.transition, model.price.transition, model.demand.transition

    r = r_grid[:, None, None]
    w = W[None, :, None]
    d = D[None, None, :]
    # (nr, nw, nd) bounds; price does not enter feasibility
    wr_ub = np.minimum(np.minimum(w, model.capacity - r), model.charge_cap) + 0 * d
    q_ub = np.minimum(r, model.discharge_cap) + 0 * w + 0 * d
    ka = int(np.ceil(wr_ub.max() / step - 1e-9)) + 1
    kq = int(np.ceil(q_ub.max() / step - 1e-9)) + 1
    wr = _mesh(wr_ub, step, ka)[..., :, None]          # (nr, nw, nd, ka, 1)
    q = _mesh(q_ub, step, kq)[..., None, :]            # (nr, nw, nd, 1, kq)
    wd = np.minimum(np.maximum(w[..., None, None] - wr, 0.0), d[..., None, None])
    gain = wd + q                                      # reward per unit price
    r_next = np.clip(r[..., None, None] + wr - q, 0.0, model.capacity)
    nxt = np.abs(r_next[..., None] - r_grid).argmin(axis=-1)   # (nr, nw, nd, ka, kq)
    wi = np.arange(nw)[None, :, None, None, None]
    di = np.arange(nd)[None, None, :, None, None]
    gain = np.broadcast_to(gain, nxt.shape)

    values = np.zeros((T + 1, nr, nw, np_, nd))
    charge = np.zeros((T, nr, nw, np_, nd))
    discharge = np.zeros((T, nr, nw, np_, nd))
    wr_full = np.broadcast_to(wr, nxt.shape)
    q_full = np.broadcast_to(q, nxt.shape)
    flat = nxt.shape[:3] + (-1,)
    for t in range(T - 1, -1, -1):
        ev = np.einsum("wx,py,dz,rxyz->rwpd", Pw, Pp, Pd, values[t + 1])
        for pi in range(np_):
            total = P[pi] * gain + ev[nxt, wi, pi, di]
            best = total.reshape(flat).argmax(axis=-1)
            values[t, :, :, pi, :] = np.take_along_axis(total.reshape(flat), best[..., None], -1)[..., 0]
            charge[t, :, :, pi, :] = np.take_along_axis(wr_full.reshape(flat), best[..., None], -1)[..., 0]
            discharge[t, :, :, pi, :] = np.take_along_axis(q_full.reshape(flat), best[..., None], -1)[..., 0]
    if not np.isfinite(values).all():
        raise ValueError("value table contains non-finite entries")
    return ValueTable(r_grid, W.copy(), P.copy(), D.copy(), values, charge, discharge)


def table_policy_evaluate(table: ValueTable, model: EnergySingleModel, samples: int = 100_000, seed: int = 0,
                          noise: Optional[np.ndarray] = None, snap_tol: float = 1e-9):
    """Monte-Carlo reward of the greedy table policy: (mean, standard error)."""
    from ..envs.energy import EnergySingleProblem, energy_project
    problem = EnergySingleProblem(model)
    if noise is None:
        noise = problem.sample_noise(samples, stream_rng(seed, STREAM_TEST))
    s = np.broadcast_to(problem.initial_state, (noise.shape[0], 4)).copy()
    total = np.zeros(noise.shape[0])
    for t in range(table.horizon):
        a = table.action(t, s, model, snap_tol)
        if np.abs(energy_project(s, a, model) - a).max() > 1e-9:
            raise AssertionError("table action is not feasible")
        total += s[:, 2] * (s[:, 3] + a[:, RM] - a[:, MD])
        s = s + np.concatenate([(a @ np.array([0, 0, -1.0, 1.0, -1.0]))[:, None], np.zeros((len(s), 3))], 1)
        s = s + noise[:, t]
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(len(total)))
