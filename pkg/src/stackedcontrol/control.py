"""Stacked-network solver for finite-horizon stochastic control.

The control at step ``t`` is a subnetwork of the state.  Chaining the T
subnetworks through the model dynamics and accumulating the (penalized)
cost gives one deep graph whose output is the total cost of a sampled noise
path; all subnetworks are trained together by Adam on Monte-Carlo batches.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import diffgraph as dg
from .nets import AdamState, Subnetwork, adam_step, init_subnetwork, normalize_schedule

log = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9

# Offsets into the run seed; keep training, validation and test noise disjoint.
STREAM_INIT = 0
STREAM_TRAIN = 1
STREAM_VALIDATION = 2
STREAM_TEST = 3


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


class RolloutError(RuntimeError):
    def __init__(self, message, timestep=None):
        super().__init__(message)
        self.timestep = timestep


class TrainingDiverged(RuntimeError):
    def __init__(self, message, curve):
        super().__init__(message)
        self.curve = curve


class ControlProblem:
    """Environment contract: s_{t+1} = s_t + drift_t(s_t, a_t) + xi_{t+1}.

    Subclasses set the dimension attributes and override the model hooks.
    Hooks receive either numpy arrays or tape ``Var`` objects of shape
    (batch, dim) and must only use :mod:`stackedcontrol.diffgraph`
    primitives (or operators) on them so both paths work.
    """

    name = "problem"
    state_dim: int = 0
    control_dim: int = 0
    horizon: int = 1
    sense = "min"
    output_head = "linear"

    def __init__(self):
        self.initial_state = np.zeros(self.state_dim)
        self.input_shift = np.zeros(self.state_dim)
        self.input_scale = np.ones(self.state_dim)
        self.action_scale = np.ones(self.control_dim)
        self.action_offset = np.zeros(self.control_dim)
        self.eq_weights = np.zeros(0)
        self.ineq_weights = np.zeros(0)

    # -- model hooks -----------------------------------------------------
    def sample_noise(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """Increments xi_1..xi_T, shape (batch, T, state_dim)."""
        raise NotImplementedError

    def drift(self, t: int, s, a):
        raise NotImplementedError

    def cost(self, t: int, s, a):
        raise NotImplementedError

    def terminal_cost(self, s):
        return None

    def equality(self, t: int, s, a) -> list:
        return []

    def inequality(self, t: int, s, a) -> list:
        return []

    def project(self, t: int, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return a

    def forced_control(self, t: int, s):
        return None

    def control_variate(self, states: np.ndarray, actions: np.ndarray, noise: np.ndarray):
        """Optional zero-mean per-sample term subtracted from the total cost."""
        return None

    def check_state(self, t: int, s: np.ndarray) -> np.ndarray:
        """Per-sample magnitude by which a state leaves its declared domain."""
        return np.zeros(s.shape[0])

    # -- helpers ---------------------------------------------------------
    def with_penalty(self, coefficient: Optional[float]) -> "ControlProblem":
        """Copy with every penalty coefficient replaced by ``coefficient``."""
        if coefficient is None:
            return self
        if coefficient < 0:
            raise ValueError("penalty coefficients must be nonnegative")
        out = copy.copy(self)
        out.eq_weights = np.full_like(self.eq_weights, coefficient, dtype=float)
        out.ineq_weights = np.full_like(self.ineq_weights, coefficient, dtype=float)
        return out

    def describe(self) -> dict:
        return {"name": self.name, "state_dim": self.state_dim, "control_dim": self.control_dim,
                "horizon": self.horizon, "sense": self.sense}


def apply_penalties(s, a, problem: ControlProblem, t: int = 0):
    """sum_i lambda_i g_i^2 + sum_j sigma_j min(0, h_j)^2, per sample."""
    eqs = problem.equality(t, s, a)
    ineqs = problem.inequality(t, s, a)
    return _penalty_from(eqs, ineqs, problem, s)


def _penalty_from(eqs, ineqs, problem, s):
    total = None
    for lam, g in zip(problem.eq_weights, eqs):
        term = dg.mul(dg.square(g), float(lam))
        total = term if total is None else dg.add(total, term)
    for sig, h in zip(problem.ineq_weights, ineqs):
        term = dg.mul(dg.square(dg.min0(h)), float(sig))
        total = term if total is None else dg.add(total, term)
    if total is None:
        return np.zeros(dg.value(s).shape[:-1]) if dg.value(s).ndim > 1 else np.float64(0.0)
    return total


def constraint_violation(eqs, ineqs) -> tuple:
    """(max, sum) absolute violation per sample from constraint values."""
    vals = [np.abs(dg.value(g)) for g in eqs] + [np.maximum(-dg.value(h), 0.0) for h in ineqs]
    if not vals:
        return None, None
    stacked = np.stack(vals, axis=-1)
    return stacked.max(axis=-1), stacked.sum(axis=-1)


class StackedPolicy:
    """T subnetworks plus the fixed input/output scaling taken from the problem."""

    def __init__(self, subnets: List[Subnetwork], use_batchnorm: bool = True, skip_first_bn: bool = True,
                 input_shift=None, input_scale=None, action_scale=None, action_offset=None):
        if not subnets:
            raise ValueError("a stacked policy needs at least one subnetwork")
        m, n = subnets[0].input_dim, subnets[0].output_dim
        if any(net.input_dim != m or net.output_dim != n for net in subnets):
            raise ValueError("all subnetworks must map the same dimensions")
        self.subnets = subnets
        self.use_batchnorm = use_batchnorm
        self.skip_first_bn = skip_first_bn
        self.input_shift = np.zeros(m) if input_shift is None else np.asarray(input_shift, float)
        self.input_scale = np.ones(m) if input_scale is None else np.asarray(input_scale, float)
        self.action_scale = np.ones(n) if action_scale is None else np.asarray(action_scale, float)
        self.action_offset = np.zeros(n) if action_offset is None else np.asarray(action_offset, float)

    @classmethod
    def for_problem(cls, problem: ControlProblem, hidden: Sequence[int], seed=0, use_batchnorm=True):
        rng = seed if isinstance(seed, np.random.Generator) else stream_rng(seed, STREAM_INIT)
        subnets = [init_subnetwork(problem.state_dim, hidden, problem.control_dim, problem.output_head, rng)
                   for _ in range(problem.horizon)]
        return cls(subnets, use_batchnorm, True, problem.input_shift, problem.input_scale,
                   problem.action_scale, problem.action_offset)

    @property
    def horizon(self) -> int:
        return len(self.subnets)

    def batchnorm_at(self, t: int) -> bool:
        return self.use_batchnorm and not (t == 0 and self.skip_first_bn)

    def parameters(self) -> Dict[tuple, np.ndarray]:
        out = {}
        for t, net in enumerate(self.subnets):
            for name, arr in net.parameters(self.batchnorm_at(t)).items():
                out[(t, name)] = arr
        return out

    def act(self, t: int, s, mode: str = "eval", params: Optional[dict] = None, update_stats: bool = True):
        x = dg.mul(dg.sub(s, self.input_shift), 1.0 / self.input_scale)
        local = None
        if params is not None:
            local = {name: v for (tt, name), v in params.items() if tt == t}
        out = self.subnets[t].forward(x, mode, self.batchnorm_at(t), local, update_stats)
        return dg.add(dg.mul(out, self.action_scale), self.action_offset)

    def copy(self) -> "StackedPolicy":
        return copy.deepcopy(self)


@dataclass
class RolloutResult:
    total: np.ndarray                 # C_T per sample, penalties included when penalized
    cumulative: np.ndarray            # (batch, T): C_t after step t
    terminal: np.ndarray              # c_T(s_T)
    states: np.ndarray                # (batch, T + 1, m)
    actions: np.ndarray               # (batch, T, n)
    penalties: np.ndarray             # per-sample penalty total
    stage_costs: np.ndarray           # (batch, T), without penalties
    control_variate: np.ndarray
    max_violation: np.ndarray         # per sample, over all t
    sum_violation: np.ndarray
    objective: object = None          # tape scalar: mean adjusted total (train mode)

    @property
    def adjusted(self) -> np.ndarray:
        return self.total - self.control_variate


def rollout_batch(problem: ControlProblem, policy: StackedPolicy, noise: np.ndarray, mode: str = "eval",
                  penalized: bool = True, project: bool = False, tape: Optional[dg.Tape] = None,
                  params: Optional[dict] = None, update_stats: bool = True) -> RolloutResult:
    """Simulate the stacked graph on a noise batch of shape (batch, T, m).

    With ``tape`` and ``params`` (tape leaves keyed like
    :meth:`StackedPolicy.parameters`) the whole rollout is recorded and
    ``result.objective`` is ready for :meth:`Tape.backward`.
    """
    T, m = problem.horizon, problem.state_dim
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 3 or noise.shape[1:] != (T, m):
        raise dg.ShapeError(f"noise batch must have shape (batch, {T}, {m}), got {noise.shape}")
    batch = noise.shape[0]
    if mode == "train" and batch < 2 and policy.use_batchnorm:
        raise ValueError("train mode needs a batch of at least 2 samples")
    if project and tape is not None:
        raise ValueError("projected rollouts are evaluation-only")

    s0 = np.broadcast_to(problem.initial_state, (batch, m)).copy()
    s = tape.const(s0) if tape is not None else s0
    states = [s0]
    actions, stage, cum = [], [], []
    pen_total = np.zeros(batch)
    vmax = np.zeros(batch)
    vsum = np.zeros(batch)
    running = None
    for t in range(T):
        try:
            a = problem.forced_control(t, s)
            if a is None:
                a = policy.act(t, s, mode, params, update_stats)
            if project:
                a = problem.project(t, dg.value(s), dg.value(a))
            c = problem.cost(t, s, a)
            eqs = problem.equality(t, s, a)
            ineqs = problem.inequality(t, s, a)
            step_cost = c
            if penalized:
                pen = _penalty_from(eqs, ineqs, problem, s)
                pen_total = pen_total + dg.value(pen)
                step_cost = dg.add(c, pen)
            running = step_cost if running is None else dg.add(running, step_cost)
            s = dg.add(dg.add(s, problem.drift(t, s, a)), noise[:, t])
        except dg.NonFiniteError as exc:
            raise RolloutError(f"non-finite value at timestep {t}: {exc}", t) from exc
        vm, vs = constraint_violation(eqs, ineqs)
        if vm is not None:
            vmax = np.maximum(vmax, vm)
            vsum = vsum + vs
        actions.append(np.array(dg.value(a)))
        stage.append(np.array(dg.value(c)))
        cum.append(np.array(dg.value(running)))
        states.append(np.array(dg.value(s)))

    term = problem.terminal_cost(s)
    total = running if term is None else dg.add(running, term)
    states_arr = np.stack(states, axis=1)
    actions_arr = np.stack(actions, axis=1)
    cv = problem.control_variate(states_arr, actions_arr, noise)
    cv = np.zeros(batch) if cv is None else np.asarray(cv, dtype=np.float64)
    objective = None
    if tape is not None:
        objective = dg.mean(dg.sub(total, cv), axis=0)
    return RolloutResult(
        total=np.array(dg.value(total)),
        cumulative=np.stack(cum, axis=1),
        terminal=np.zeros(batch) if term is None else np.array(dg.value(term)),
        states=states_arr,
        actions=actions_arr,
        penalties=pen_total,
        stage_costs=np.stack(stage, axis=1),
        control_variate=cv,
        max_violation=vmax,
        sum_violation=vsum,
        objective=objective,
    )


@dataclass
class TrainingConfig:
    batch_size: int = 64
    iterations: int = 1000
    learning_rate: object = 1e-3          # rate or [(start_iteration, rate), ...]
    validation_size: int = 4096
    validation_every: int = 100
    seed: int = 0
    hidden: Sequence[int] = (32, 32)
    use_batchnorm: bool = True
    penalty: Optional[float] = None       # overrides every penalty coefficient

    def __post_init__(self):
        for name in ("batch_size", "validation_size", "validation_every"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if int(self.iterations) < 0:
            raise ValueError("iterations must be nonnegative")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.learning_rate = normalize_schedule(self.learning_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["learning_rate"] = [list(p) for p in self.learning_rate]
        return d


CURVE_COLUMNS = ("iteration", "train_objective", "val_objective_penalized", "val_objective_projected",
                 "max_violation", "mean_violation")


@dataclass
class TrainResult:
    policy: StackedPolicy
    curve: List[dict] = field(default_factory=list)
    wall_seconds: List[float] = field(default_factory=list)
    adam: Optional[AdamState] = None


def _validate(problem, policy, noise):
    raw = rollout_batch(problem, policy, noise, mode="eval", penalized=True)
    proj = rollout_batch(problem, policy, noise, mode="eval", penalized=False, project=True)
    return {
        "val_objective_penalized": float(raw.adjusted.mean()),
        "val_objective_projected": float(proj.adjusted.mean()),
        "max_violation": float(raw.max_violation.max()),
        "mean_violation": float(raw.sum_violation.mean()),
    }


def train_step(problem, policy, noise, adam: AdamState) -> float:
    tape = dg.Tape()
    params = policy.parameters()
    leaves = {key: tape.leaf(arr) for key, arr in params.items()}
    res = rollout_batch(problem, policy, noise, mode="train", penalized=True, tape=tape, params=leaves)
    grads = tape.backward(res.objective)
    adam_step(params, {key: grads[leaf.id] for key, leaf in leaves.items()}, adam)
    return float(res.objective.value)


def train(problem: ControlProblem, config: TrainingConfig, policy: Optional[StackedPolicy] = None,
          callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Adam on fresh noise batches; validation rows every ``validation_every`` steps."""
    problem = problem.with_penalty(config.penalty)
    if policy is None:
        policy = StackedPolicy.for_problem(problem, config.hidden, config.seed, config.use_batchnorm)
    train_rng = stream_rng(config.seed, STREAM_TRAIN)
    val_noise = problem.sample_noise(config.validation_size, stream_rng(config.seed, STREAM_VALIDATION))
    adam = AdamState(schedule=config.learning_rate)
    result = TrainResult(policy, adam=adam)
    start = time.perf_counter()
    recent: List[float] = []
    for it in range(config.iterations + 1):
        if it % config.validation_every == 0 or it == config.iterations:
            row = {"iteration": it, "train_objective": float(np.mean(recent)) if recent else float("nan")}
            try:
                row.update(_validate(problem, policy, val_noise))
            except (RolloutError, dg.NonFiniteError) as exc:
                raise TrainingDiverged(f"validation at iteration {it} failed: {exc}", result.curve) from exc
            result.curve.append(row)
            result.wall_seconds.append(time.perf_counter() - start)
            recent = []
            if not (np.isfinite(row["val_objective_penalized"]) and np.isfinite(row["val_objective_projected"])):
                raise TrainingDiverged(f"validation objective not finite at iteration {it}", result.curve)
            if callback is not None:
                callback(row)
            log.debug("iter %d: %s", it, row)
        if it == config.iterations:
            break
        noise = problem.sample_noise(config.batch_size, train_rng)
        try:
            recent.append(train_step(problem, policy, noise, adam))
        except (RolloutError, dg.NonFiniteError) as exc:
            raise TrainingDiverged(f"training step {it} failed: {exc}", result.curve) from exc
    return result


@dataclass
class EvaluationReport:
    mean: float                 # in the problem's own sense: cost (min) or reward (max)
    stderr: float
    raw_mean: float             # without the control variate
    max_violation: float
    n_infeasible: int
    n_samples: int
    sense: str

    @property
    def feasible(self) -> bool:
        return self.n_infeasible == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feasible"] = self.feasible
        return d


def evaluate(problem: ControlProblem, policy: StackedPolicy, n_samples: int = 100_000, seed: int = 0,
             noise: Optional[np.ndarray] = None, chunk: int = 25_000, return_rollouts: bool = False):
    """Projected, penalty-free rollouts in eval mode on test noise."""
    if noise is None:
        noise = problem.sample_noise(n_samples, stream_rng(seed, STREAM_TEST))
    n_samples = noise.shape[0]
    adjusted, raw, vmax, bad = [], [], [], []
    rollouts = []
    for lo in range(0, n_samples, chunk):
        res = rollout_batch(problem, policy, noise[lo:lo + chunk], mode="eval", penalized=False, project=True)
        dom = np.max([problem.check_state(t, res.states[:, t]) for t in range(problem.horizon + 1)], axis=0)
        worst = np.maximum(res.max_violation, dom)
        adjusted.append(res.adjusted)
        raw.append(res.total)
        vmax.append(worst)
        bad.append(worst > FEASIBILITY_TOL)
        if return_rollouts:
            rollouts.append(res)
    adjusted = np.concatenate(adjusted)
    raw = np.concatenate(raw)
    vmax = np.concatenate(vmax)
    sign = 1.0 if problem.sense == "min" else -1.0
    report = EvaluationReport(
        mean=float(sign * adjusted.mean()),
        stderr=float(adjusted.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else float("nan"),
        raw_mean=float(sign * raw.mean()),
        max_violation=float(vmax.max()),
        n_infeasible=int(np.concatenate(bad).sum()),
        n_samples=int(n_samples),
        sense=problem.sense,
    )
    if return_rollouts:
        return report, rollouts
    return report


def relative_metric(candidate: float, benchmark: float, sense: str = "min") -> float:
    """candidate / benchmark.  1.0 is optimal: approached from above when
    minimizing, from below when maximizing."""
    if sense not in ("min", "max"):
        raise ValueError(f"sense must be 'min' or 'max', got {sense!r}")
    if benchmark == 0:
        raise ValueError("benchmark value is zero; ratio undefined")
    return float(candidate) / float(benchmark)


@dataclass
class GradCheckReport:
    worst_error: float
    worst_key: Optional[tuple]
    errors: Dict[tuple, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_error < self.tolerance


def gradient_check(problem: ControlProblem, policy: StackedPolicy, noise: np.ndarray, h: float = 1e-6,
                   tolerance: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of the batch-mean total cost with central differences.

    Runs in train mode with running statistics frozen, so the function being
    differentiated is exactly the recorded graph.  The error per tensor is
    ``|g - fd| / max(|g|, |fd|, 1e-4 (1 + |f|))``: the floor keeps tensors
    whose true gradient is zero (biases feeding batch norm) from being judged
    on finite-difference roundoff alone.
    """
    params = policy.parameters()

    def objective() -> float:
        res = rollout_batch(problem, policy, noise, mode="train", penalized=True, update_stats=False)
        return float(res.adjusted.mean())

    tape = dg.Tape()
    leaves = {key: tape.leaf(arr) for key, arr in params.items()}
    res = rollout_batch(problem, policy, noise, mode="train", penalized=True, tape=tape, params=leaves,
                        update_stats=False)
    grads = tape.backward(res.objective)
    floor = 1e-4 * (1.0 + abs(float(res.objective.value)))

    errors = {}
    for key, arr in params.items():
        analytic = grads[leaves[key].id]
        orig = arr.copy()

        def f(x, arr=arr):
            arr[...] = x
            return objective()

        numeric = dg.finite_difference_gradient(f, orig, h)
        arr[...] = orig
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), floor)
        errors[key] = float(np.linalg.norm(analytic - numeric) / scale)
    worst_key = max(errors, key=errors.get) if errors else None
    return GradCheckReport(errors[worst_key] if errors else 0.0, worst_key, errors, tolerance)
