"""Energy storage with a wind source, a spot market and (single device) demand.

Single device: state [r, w, p, d], control [wd, md, rd, wr, rm] where ``ij``
is energy moved from i to j (w wind, m market, r storage, d demand).

Multiple devices (pure arbitrage, d = 0): state [r_1..r_n, w, p], control
interleaved per device as [wr_i, rm_i, mr_i].

Both are posed as minimization of the negated reward.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import diffgraph as dg
from ..control import ControlProblem
from .markov import MarkovChain, persistent_chain

SINGLE_FLOW = np.array([0.0, 0.0, -1.0, 1.0, -1.0])
WD, MD, RD, WR, RM = range(5)


def default_chains():
    """Stand-in exogenous chains: wind, price, demand."""
    return (persistent_chain(np.linspace(0, 16, 9), stay=0.5),
            persistent_chain(np.linspace(10, 70, 11), stay=0.5),
            persistent_chain(np.linspace(0, 12, 7), stay=0.5))


def _chain_dict(chain: MarkovChain) -> dict:
    return {"levels": chain.levels.tolist(), "transition": chain.transition.tolist()}


def _chain_from(d) -> MarkovChain:
    return MarkovChain(np.asarray(d["levels"], float), np.asarray(d["transition"], float))


@dataclass
class EnergySingleModel:
    charge_cap: float = 5.0
    discharge_cap: float = 5.0
    capacity: float = 25.0
    wind: MarkovChain = None
    price: MarkovChain = None
    demand: MarkovChain = None
    horizon: int = 10
    r0: float = 10.0
    w0: float = 8.0
    p0: float = 40.0
    d0: float = 6.0

    def __post_init__(self):
        defaults = default_chains()
        self.wind = self.wind or defaults[0]
        self.price = self.price or defaults[1]
        self.demand = self.demand or defaults[2]
        if min(self.charge_cap, self.discharge_cap, self.capacity) < 0:
            raise ValueError("storage caps must be nonnegative")
        if not 0 <= self.r0 <= self.capacity:
            raise ValueError("initial storage must lie in [0, capacity]")
        if (self.wind.levels < 0).any() or (self.demand.levels < 0).any():
            raise ValueError("wind and demand levels must be nonnegative")
        for chain, v in ((self.wind, self.w0), (self.price, self.p0), (self.demand, self.d0)):
            if not np.isclose(chain.levels, v).any():
                raise ValueError(f"initial exogenous value {v} is not a chain level")

    def to_dict(self) -> dict:
        return {"kind": "energy_single", "charge_cap": self.charge_cap, "discharge_cap": self.discharge_cap,
                "capacity": self.capacity, "wind": _chain_dict(self.wind), "price": _chain_dict(self.price),
                "demand": _chain_dict(self.demand), "horizon": self.horizon, "r0": self.r0, "w0": self.w0,
                "p0": self.p0, "d0": self.d0}

    @classmethod
    def from_dict(cls, d: dict) -> "EnergySingleModel":
        kw = {k: d[k] for k in ("charge_cap", "discharge_cap", "capacity", "horizon", "r0", "w0", "p0", "d0")
              if k in d}
        for k in ("wind", "price", "demand"):
            if k in d:
                kw[k] = _chain_from(d[k])
        return cls(**kw)


@dataclass
class EnergyMultiModel:
    capacity: np.ndarray
    charge_cap: np.ndarray
    discharge_cap: np.ndarray
    eta_c: np.ndarray
    eta_d: np.ndarray
    holding: np.ndarray
    wind: MarkovChain = None
    price: MarkovChain = None
    horizon: int = 10
    r0: Optional[np.ndarray] = None
    w0: float = 8.0
    p0: float = 40.0
    seed: Optional[int] = None

    def __post_init__(self):
        defaults = default_chains()
        self.wind = self.wind or defaults[0]
        self.price = self.price or defaults[1]
        for k in ("capacity", "charge_cap", "discharge_cap", "eta_c", "eta_d", "holding"):
            setattr(self, k, np.asarray(getattr(self, k), dtype=np.float64).reshape(-1))
        n = self.capacity.size
        if any(getattr(self, k).size != n for k in ("charge_cap", "discharge_cap", "eta_c", "eta_d", "holding")):
            raise ValueError("device parameter vectors must all have length n")
        if ((self.eta_c <= 0) | (self.eta_c > 1) | (self.eta_d <= 0) | (self.eta_d > 1)).any():
            raise ValueError("efficiencies must lie in (0, 1]")
        if (self.holding < 0).any():
            raise ValueError("holding costs must be nonnegative")
        if self.r0 is None:
            self.r0 = 0.5 * self.capacity
        self.r0 = np.asarray(self.r0, dtype=np.float64).reshape(n)

    @property
    def n(self) -> int:
        return self.capacity.size

    @property
    def flows(self) -> np.ndarray:
        """Per-device flow vectors (eta_c, -1, eta_c), shape (n, 3)."""
        return np.stack([self.eta_c, -np.ones(self.n), self.eta_c], axis=1)

    def to_dict(self) -> dict:
        return {"kind": "energy_multi", "capacity": self.capacity.tolist(), "charge_cap": self.charge_cap.tolist(),
                "discharge_cap": self.discharge_cap.tolist(), "eta_c": self.eta_c.tolist(),
                "eta_d": self.eta_d.tolist(), "holding": self.holding.tolist(), "wind": _chain_dict(self.wind),
                "price": _chain_dict(self.price), "horizon": self.horizon, "r0": self.r0.tolist(),
                "w0": self.w0, "p0": self.p0, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyMultiModel":
        if "capacity" not in d:
            return generate_devices(int(d["n"]), seed=int(d.get("seed", 0)), horizon=int(d.get("horizon", 10)))
        kw = {k: d[k] for k in ("capacity", "charge_cap", "discharge_cap", "eta_c", "eta_d", "holding",
                                "horizon", "r0", "w0", "p0", "seed") if k in d}
        for k in ("wind", "price"):
            if k in d:
                kw[k] = _chain_from(d[k])
        return cls(**kw)


def generate_devices(n: int, seed: int = 0, horizon: int = 10, capacity_range=(20.0, 100.0),
                     rate_range=(2.0, 10.0), efficiency_range=(0.8, 0.99),
                     holding_range=(0.001, 0.02)) -> EnergyMultiModel:
    """Devices whose rates, efficiencies and holding costs fall as capacity rises."""
    if n < 1:
        raise ValueError("need at least one device")
    rng = np.random.default_rng(seed)
    capacity = np.linspace(*capacity_range, n) if n > 1 else np.array([np.mean(capacity_range)])

    def anti(lo, hi):
        return np.sort(rng.uniform(lo, hi, n))[::-1]

    rate = anti(*rate_range)
    eta = anti(*efficiency_range)
    return EnergyMultiModel(capacity=capacity, charge_cap=rate, discharge_cap=rate.copy(), eta_c=eta,
                            eta_d=eta.copy(), holding=anti(*holding_range), horizon=horizon, seed=seed)


def _exogenous_paths(chains, starts, batch, T, rng):
    """Value paths (batch, T + 1) for each chain, driven by one uniform per step."""
    u = rng.random((batch, T, len(chains)))
    paths = []
    for k, (chain, start) in enumerate(zip(chains, starts)):
        idx = chain.simulate(int(chain.index_of(start)), u[:, :, k])
        paths.append(chain.levels[idx])
    return paths


def energy_reward(s, a, model, variant: str = "single"):
    """Single: p (d + rm - md).  Multi: sum_i p (eta_d_i rm_i - mr_i) - beta_i r_i."""
    if variant == "single":
        p = dg.take(s, (Ellipsis, 2))
        d = dg.take(s, (Ellipsis, 3))
        return dg.mul(p, dg.sub(dg.add(d, dg.take(a, (Ellipsis, RM))), dg.take(a, (Ellipsis, MD))))
    if variant != "multi":
        raise ValueError(f"unknown variant {variant!r}")
    n = model.n
    r = dg.take(s, (Ellipsis, slice(0, n)))
    p = dg.take(s, (Ellipsis, slice(n + 1, n + 2)))
    rm = dg.take(a, (Ellipsis, slice(1, None, 3)))
    mr = dg.take(a, (Ellipsis, slice(2, None, 3)))
    sales = dg.mul(p, dg.sub(dg.mul(rm, model.eta_d), mr))
    return dg.sum(dg.sub(sales, dg.mul(r, model.holding)), axis=-1)


def energy_step(s: np.ndarray, a: np.ndarray, exo_next: np.ndarray, model, variant: str = "single",
                tol: float = 1e-9) -> np.ndarray:
    """Storage moves by the flow vector(s); exogenous components take ``exo_next``.

    ``exo_next`` holds the next (w, p, d) or (w, p) values, e.g. from
    :func:`stackedcontrol.envs.markov.markov_step` on the chains.
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if variant == "single":
        r = s[..., :1] + (a @ SINGLE_FLOW)[..., None]
        cap = model.capacity
    else:
        n = model.n
        ai = a.reshape(a.shape[:-1] + (n, 3))
        r = s[..., :n] + np.sum(ai * model.flows, axis=-1)
        cap = model.capacity
    if (r < -tol).any() or (r > cap + tol).any():
        raise ValueError("storage level left [0, capacity]; project the control first")
    return np.concatenate([r, np.asarray(exo_next, dtype=np.float64)], axis=-1)


def _scale_pair(x, y, limit):
    # a few ulps of slack keep the map idempotent: rescaling an already scaled
    # pair whose rounded sum lands just above the limit would otherwise move it
    total = x + y
    over = total > limit + 4 * np.finfo(np.float64).eps * np.maximum(limit, 1.0)
    with np.errstate(over="ignore", divide="ignore"):
        f = np.where(over, limit / np.where(over, total, 1.0), 1.0)
    return x * f, y * f


def energy_project(s: np.ndarray, a: np.ndarray, model, variant: str = "single") -> np.ndarray:
    """Deterministic three-stage map of a raw control onto the admissible set."""
    s = np.asarray(s, dtype=np.float64)
    a = np.array(a, dtype=np.float64)
    if variant == "single":
        r = np.clip(s[..., 0], 0.0, model.capacity)
        w, d = np.maximum(s[..., 1], 0.0), np.maximum(s[..., 3], 0.0)
        a = np.maximum(a, 0.0)
        a[..., WR] = np.minimum(a[..., WR], np.minimum(model.capacity - r, model.charge_cap))
        a[..., WR], a[..., WD] = _scale_pair(a[..., WR], a[..., WD], w)
        a[..., RD], a[..., RM] = _scale_pair(a[..., RD], a[..., RM], np.minimum(r, model.discharge_cap))
        a[..., WD], a[..., RD] = _scale_pair(a[..., WD], a[..., RD], d)
        a[..., MD] = np.maximum(d - a[..., WD] - a[..., RD], 0.0)
        return a
    if variant != "multi":
        raise ValueError(f"unknown variant {variant!r}")
    n = model.n
    r = np.clip(s[..., :n], 0.0, model.capacity)
    w = np.maximum(s[..., n], 0.0)
    a = np.maximum(a, 0.0).reshape(a.shape[:-1] + (n, 3))
    wr, rm, mr = a[..., 0], a[..., 1], a[..., 2]
    rm = np.minimum(rm, np.minimum(r, model.discharge_cap))
    total = wr.sum(axis=-1)
    over = total > w + 4 * np.finfo(np.float64).eps * np.maximum(w, 1.0)
    with np.errstate(over="ignore", divide="ignore"):
        f = np.where(over, w / np.where(over, total, 1.0), 1.0)
    wr = wr * f[..., None]
    headroom = np.maximum(np.minimum((model.capacity - r) / model.eta_c, model.charge_cap), 0.0)
    wr = np.minimum(wr, headroom)
    mr = np.minimum(mr, headroom - wr)
    return np.stack([wr, rm, mr], axis=-1).reshape(a.shape[:-2] + (3 * n,))


def single_constraints(s, a, model):
    """(equalities, inequalities >= 0) of the single-device admissible set."""
    r, w, d = (dg.take(s, (Ellipsis, k)) for k in (0, 1, 3))
    c = [dg.take(a, (Ellipsis, k)) for k in range(5)]
    eq = [dg.sub(dg.add(dg.add(c[WD], c[RD]), c[MD]), d)]
    ineq = [
        dg.sub(dg.sub(w, c[WR]), c[WD]),
        dg.sub(dg.sub(r, c[RD]), c[RM]),
        dg.sub(dg.sub(model.discharge_cap, c[RD]), c[RM]),
        dg.sub(dg.sub(model.capacity, r), c[WR]),
        dg.sub(model.charge_cap, c[WR]),
    ] + c
    return eq, ineq


def multi_constraints(s, a, model):
    n = model.n
    r = dg.take(s, (Ellipsis, slice(0, n)))
    w = dg.take(s, (Ellipsis, n))
    wr, rm, mr = (dg.take(a, (Ellipsis, slice(k, None, 3))) for k in range(3))
    charge = dg.add(wr, mr)
    per_device = [
        dg.sub(r, rm),
        dg.sub(model.discharge_cap, rm),
        dg.sub(model.charge_cap, charge),
        dg.sub(dg.sub(model.capacity, r), dg.mul(charge, model.eta_c)),
        wr, rm, mr,
    ]
    ineq = [dg.sub(w, dg.sum(wr, axis=-1))]
    for block in per_device:
        ineq.extend(dg.take(block, (Ellipsis, i)) for i in range(n))
    return [], ineq


def _check_head(head: str) -> str:
    if head not in ("linear", "nonnegative"):
        raise ValueError(f"output_head must be 'linear' or 'nonnegative', got {head!r}")
    return head


class EnergySingleProblem(ControlProblem):
    """Single-device storage as a maximization problem.

    The default ``linear`` head leaves negative outputs to the nonnegativity
    penalties and the projection.  A ReLU (``nonnegative``) head is available,
    but it can lose an output unit for good: at t = 0 the input is the fixed
    initial state, so a component driven below zero never gets a gradient back.
    """
    name = "energy_single"
    sense = "max"
    state_dim = 4
    control_dim = 5

    def __init__(self, model: EnergySingleModel, penalty: float = 100.0, output_head: str = "linear"):
        self.model = model
        self.output_head = _check_head(output_head)
        self.horizon = model.horizon
        super().__init__()
        self.initial_state = np.array([model.r0, model.w0, model.p0, model.d0])
        chains = (model.wind, model.price, model.demand)
        self.input_shift = np.array([model.capacity / 2] + [c.levels.mean() for c in chains])
        self.input_scale = np.array([max(model.capacity / 2, 1e-6)] +
                                    [max(np.ptp(c.levels) / 2, 1e-6) for c in chains])
        d_half = max(model.demand.levels.max() / 2, 1e-6)
        self.action_scale = np.array([d_half, d_half, max(model.discharge_cap, 1e-6) / 2,
                                      max(model.charge_cap, 1e-6) / 2, max(model.discharge_cap, 1e-6) / 2])
        self.eq_weights = np.full(1, float(penalty))
        self.ineq_weights = np.full(10, float(penalty))

    def sample_noise(self, batch, rng):
        m = self.model
        paths = _exogenous_paths((m.wind, m.price, m.demand), (m.w0, m.p0, m.d0), batch, self.horizon, rng)
        inc = [np.diff(p, axis=1) for p in paths]
        return np.stack([np.zeros_like(inc[0])] + inc, axis=-1)

    def drift(self, t, s, a):
        dr = dg.reshape(dg.matmul(a, SINGLE_FLOW), dg.value(a).shape[:-1] + (1,))
        return dg.concat([dr, np.zeros(dg.value(a).shape[:-1] + (3,))], axis=-1)

    def cost(self, t, s, a):
        return dg.mul(energy_reward(s, a, self.model, "single"), -1.0)

    def equality(self, t, s, a):
        return single_constraints(s, a, self.model)[0]

    def inequality(self, t, s, a):
        return single_constraints(s, a, self.model)[1]

    def project(self, t, s, a):
        return energy_project(s, a, self.model, "single")

    def check_state(self, t, s):
        r = s[:, 0]
        return np.maximum(np.maximum(-r, r - self.model.capacity), 0.0)


class EnergyMultiProblem(ControlProblem):
    name = "energy_multi"
    sense = "max"

    def __init__(self, model: EnergyMultiModel, penalty: float = 30.0, output_head: str = "linear"):
        self.model = model
        self.output_head = _check_head(output_head)
        n = model.n
        self.state_dim = n + 2
        self.control_dim = 3 * n
        self.horizon = model.horizon
        super().__init__()
        self.initial_state = np.concatenate([model.r0, [model.w0, model.p0]])
        self.input_shift = np.concatenate([model.capacity / 2, [model.wind.levels.mean(), model.price.levels.mean()]])
        self.input_scale = np.concatenate([np.maximum(model.capacity / 2, 1e-6),
                                           [max(np.ptp(model.wind.levels) / 2, 1e-6),
                                            max(np.ptp(model.price.levels) / 2, 1e-6)]])
        self.action_scale = np.stack([np.maximum(model.charge_cap, 1e-6) / 2,
                                      np.maximum(model.discharge_cap, 1e-6) / 2,
                                      np.maximum(model.charge_cap, 1e-6) / 2], axis=1).reshape(-1)
        self.ineq_weights = np.full(1 + 7 * n, float(penalty))

    def sample_noise(self, batch, rng):
        m = self.model
        paths = _exogenous_paths((m.wind, m.price), (m.w0, m.p0), batch, self.horizon, rng)
        inc = np.stack([np.diff(p, axis=1) for p in paths], axis=-1)
        return np.concatenate([np.zeros((batch, self.horizon, m.n)), inc], axis=-1)

    def drift(self, t, s, a):
        n = self.model.n
        wr, rm, mr = (dg.take(a, (Ellipsis, slice(k, None, 3))) for k in range(3))
        dr = dg.sub(dg.mul(dg.add(wr, mr), self.model.eta_c), rm)
        return dg.concat([dr, np.zeros(dg.value(a).shape[:-1] + (2,))], axis=-1)

    def cost(self, t, s, a):
        return dg.mul(energy_reward(s, a, self.model, "multi"), -1.0)

    def inequality(self, t, s, a):
        return multi_constraints(s, a, self.model)[1]

    def project(self, t, s, a):
        return energy_project(s, a, self.model, "multi")

    def check_state(self, t, s):
        r = s[:, :self.model.n]
        return np.maximum(np.maximum(-r, r - self.model.capacity), 0.0).max(axis=1)
