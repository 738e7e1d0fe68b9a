import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackedcontrol import diffgraph as dg
from stackedcontrol.control import (CURVE_COLUMNS, FEASIBILITY_TOL, ControlProblem, RolloutError, StackedPolicy,
                                    TrainingConfig, TrainingDiverged, apply_penalties, evaluate, gradient_check,
                                    relative_metric, rollout_batch, stream_rng, train)
from stackedcontrol.baselines import lq_riccati
from stackedcontrol.envs import default_lq, random_lq
from stackedcontrol.nets import DenseLayer, Subnetwork


class ScalarProblem(ControlProblem):
    """s' = s + a + xi, c_t = a^2, c_T = s^2, with optional constraint hooks."""

    state_dim = 1
    control_dim = 1

    def __init__(self, horizon=1, s0=1.0, eqs=(), ineqs=(), eq_w=(), ineq_w=(), zero_cost=False):
        self.horizon = horizon
        super().__init__()
        self.initial_state = np.array([s0])
        self._eqs, self._ineqs = eqs, ineqs
        self.eq_weights = np.array(eq_w, dtype=float)
        self.ineq_weights = np.array(ineq_w, dtype=float)
        self.zero_cost = zero_cost

    def sample_noise(self, batch, rng):
        return rng.normal(0.0, 0.1, size=(batch, self.horizon, 1))

    def drift(self, t, s, a):
        return a

    def cost(self, t, s, a):
        if self.zero_cost:
            return dg.mul(dg.sum(a, axis=-1), 0.0)
        return dg.sum(dg.square(a), axis=-1)

    def terminal_cost(self, s):
        if self.zero_cost:
            return None
        return dg.sum(dg.square(s), axis=-1)

    def equality(self, t, s, a):
        return [dg.add(dg.mul(dg.sum(a, axis=-1), 0.0), g) for g in self._eqs]

    def inequality(self, t, s, a):
        return [dg.add(dg.mul(dg.sum(a, axis=-1), 0.0), h) for h in self._ineqs]


def constant_policy(values, horizon=1):
    values = np.atleast_1d(np.asarray(values, dtype=float))
    nets = [Subnetwork([DenseLayer(np.zeros((values.size, 1)), values.copy())], []) for _ in range(horizon)]
    return StackedPolicy(nets, use_batchnorm=False)


# ---------------------------------------------------------------- penalties

def test_penalty_examples():
    s, a = np.zeros((1, 1)), np.zeros((1, 1))
    assert float(apply_penalties(s, a, ScalarProblem())[0]) == 0.0
    p = ScalarProblem(eqs=[0.5], eq_w=[500.0])
    assert float(apply_penalties(s, a, p)[0]) == pytest.approx(125.0)
    p = ScalarProblem(ineqs=[-0.5], ineq_w=[30.0])
    assert float(apply_penalties(s, a, p)[0]) == pytest.approx(7.5)
    p = ScalarProblem(ineqs=[1.0], ineq_w=[30.0])
    assert float(apply_penalties(s, a, p)[0]) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), max_size=3), st.lists(st.floats(-5, 5), max_size=3))
def test_penalty_is_zero_iff_feasible(eqs, ineqs):
    p = ScalarProblem(eqs=eqs, ineqs=ineqs, eq_w=[2.0] * len(eqs), ineq_w=[3.0] * len(ineqs))
    pen = float(apply_penalties(np.zeros((1, 1)), np.zeros((1, 1)), p)[0])
    feasible = all(abs(g) <= 1e-12 for g in eqs) and all(h >= -1e-12 for h in ineqs)
    if feasible:
        assert pen <= 1e-20
    else:
        assert pen > 0


def test_negative_penalty_coefficient_rejected():
    with pytest.raises(ValueError):
        ScalarProblem(eqs=[1.0], eq_w=[1.0]).with_penalty(-1.0)


# ---------------------------------------------------------------- rollout

def test_zero_cost_rollout_is_zero():
    p = ScalarProblem(horizon=3, zero_cost=True)
    res = rollout_batch(p, constant_policy(0.7, 3), p.sample_noise(5, np.random.default_rng(0)))
    np.testing.assert_array_equal(res.total, np.zeros(5))


def test_scalar_rollout_hand_value():
    p = ScalarProblem()
    res = rollout_batch(p, constant_policy(-0.5), np.zeros((1, 1, 1)))
    assert res.total[0] == pytest.approx(0.5)
    np.testing.assert_allclose(res.states[0, :, 0], [1.0, 0.5])


def test_violated_inequality_rollout_is_125():
    p = ScalarProblem(ineqs=[-0.5], ineq_w=[500.0], zero_cost=True)
    res = rollout_batch(p, constant_policy(0.3), np.zeros((2, 1, 1)), penalized=True)
    np.testing.assert_allclose(res.total, [125.0, 125.0])
    np.testing.assert_allclose(res.max_violation, [0.5, 0.5])
    res = rollout_batch(p, constant_policy(0.3), np.zeros((2, 1, 1)), penalized=False)
    np.testing.assert_allclose(res.total, [0.0, 0.0])


@pytest.mark.parametrize("penalized", [True, False])
def test_rollout_additivity(penalized):
    p = random_lq(3, 2, 2, 4, constrained=True)
    policy = StackedPolicy.for_problem(p, (8, 8), seed=1)
    res = rollout_batch(p, policy, p.sample_noise(16, np.random.default_rng(2)), penalized=penalized)
    np.testing.assert_allclose(res.total, res.cumulative[:, -1] + res.terminal, rtol=0, atol=1e-12)
    recomputed = res.stage_costs.sum(axis=1) + res.terminal + (res.penalties if penalized else 0.0)
    np.testing.assert_allclose(res.total, recomputed, rtol=1e-12, atol=1e-12)
    # C_t is non-decreasing in the penalties: each step adds its stage cost at least
    steps = np.diff(np.concatenate([np.zeros((16, 1)), res.cumulative], axis=1), axis=1)
    assert (steps >= res.stage_costs - 1e-12).all()


def test_stored_trajectory_reproduces_total():
    p = default_lq(4)
    policy = StackedPolicy.for_problem(p, (8,), seed=0)
    res = rollout_batch(p, policy, p.sample_noise(8, np.random.default_rng(0)), penalized=False)
    S, A = res.states, res.actions
    stage = np.einsum("bti,ij,btj->bt", S[:, :-1], p.Q, S[:, :-1]) + np.einsum("bti,ij,btj->bt", A, p.R, A)
    total = stage.sum(1) + np.einsum("bi,ij,bj->b", S[:, -1], p.Q_T, S[:, -1])
    np.testing.assert_allclose(res.total, total, rtol=1e-12)


def test_measurability_controls_ignore_future_noise():
    p = default_lq(5)
    policy = StackedPolicy.for_problem(p, (8, 8), seed=0)
    rollout_batch(p, policy, p.sample_noise(64, np.random.default_rng(9)), mode="train")
    noise = p.sample_noise(10, np.random.default_rng(1))
    base = rollout_batch(p, policy, noise)
    for t in range(p.horizon):
        bumped = noise.copy()
        bumped[:, t:] += np.random.default_rng(t).normal(size=bumped[:, t:].shape)
        res = rollout_batch(p, policy, bumped)
        # xi_{t+1} ... xi_T live at noise[:, t:]; controls a_0 ... a_t must be unchanged
        assert res.actions[:, :t + 1].tobytes() == base.actions[:, :t + 1].tobytes()


def test_noise_shape_is_checked():
    p = default_lq(3)
    with pytest.raises(dg.ShapeError, match="noise batch"):
        rollout_batch(p, StackedPolicy.for_problem(p, (4,)), np.zeros((2, 2, 2)))


def test_non_finite_rollout_names_timestep():
    class Exploding(ScalarProblem):
        def drift(self, t, s, a):
            return dg.mul(s, 1e200) if t == 1 else a

    p = Exploding(horizon=3, s0=1e200)
    with pytest.raises(RolloutError) as info, np.errstate(over="ignore"):
        rollout_batch(p, constant_policy(0.0, 3), np.zeros((2, 3, 1)))
    assert info.value.timestep == 1


def test_first_subnetwork_skips_batchnorm():
    p = default_lq(3)
    policy = StackedPolicy.for_problem(p, (4, 4), seed=0)
    assert not policy.batchnorm_at(0) and policy.batchnorm_at(1) and policy.batchnorm_at(2)
    keys = {name for t, name in policy.parameters() if t == 0}
    assert not any(k.startswith("bn") for k in keys)
    assert any(k.startswith("bn") for t, k in policy.parameters() if t == 1)
    assert policy.horizon == 3


# ---------------------------------------------------------------- training

def test_zero_iterations_keep_initial_policy():
    p = default_lq(3)
    init = StackedPolicy.for_problem(p, (4,), seed=5)
    res = train(p, TrainingConfig(iterations=0, hidden=(4,), seed=5, validation_size=64))
    for a, b in zip(init.subnets, res.policy.subnets):
        for la, lb in zip(a.dense, b.dense):
            assert np.array_equal(la.W, lb.W) and np.array_equal(la.b, lb.b)
    assert len(res.curve) == 1 and res.curve[0]["iteration"] == 0
    assert set(res.curve[0]) == set(CURVE_COLUMNS)


def test_training_is_bitwise_deterministic():
    p = random_lq(1, 2, 2, 3, constrained=True)
    cfg = TrainingConfig(iterations=40, hidden=(8, 8), validation_every=10, validation_size=128, seed=3,
                         learning_rate=3e-3)
    a, b = train(p, cfg), train(p, cfg)
    assert a.curve == b.curve or all(
        np.array_equal(np.array(list(x.values())), np.array(list(y.values())), equal_nan=True)
        for x, y in zip(a.curve, b.curve))
    c = train(p, TrainingConfig(**{**cfg.to_dict(), "seed": 4}))
    assert [r["val_objective_projected"] for r in a.curve] != [r["val_objective_projected"] for r in c.curve]


def test_training_reduces_lq_cost():
    p = default_lq(3)
    res = train(p, TrainingConfig(iterations=300, hidden=(16, 16), validation_every=100, validation_size=512,
                                  learning_rate=3e-3))
    first, last = res.curve[0]["val_objective_projected"], res.curve[-1]["val_objective_projected"]
    optimum = lq_riccati(p).expected_cost
    assert last < first
    assert last < 1.1 * optimum
    assert [r["iteration"] for r in res.curve] == [0, 100, 200, 300]


def test_divergence_aborts_with_partial_curve():
    class Unstable(ScalarProblem):
        def drift(self, t, s, a):
            return dg.add(dg.mul(s, 1e6), a)

    p = Unstable(horizon=40, s0=1.0)
    with pytest.raises(TrainingDiverged) as info, np.errstate(all="ignore"):
        train(p, TrainingConfig(iterations=5, hidden=(2,), validation_size=8, use_batchnorm=False))
    assert isinstance(info.value.curve, list)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainingConfig(iterations=-1)
    with pytest.raises(ValueError):
        TrainingConfig(learning_rate=[(5, 1e-3)])


def test_stream_rngs_are_disjoint():
    draws = [stream_rng(7, k).random(4) for k in range(4)]
    assert len({d.tobytes() for d in draws}) == 4
    assert stream_rng(7, 2).random(4).tobytes() == draws[2].tobytes()


# ---------------------------------------------------------------- evaluation

def test_unconstrained_evaluation_equals_plain_rollout():
    p = default_lq(3)
    policy = StackedPolicy.for_problem(p, (4,), seed=0)
    noise = p.sample_noise(500, np.random.default_rng(0))
    rep = evaluate(p, policy, noise=noise)
    res = rollout_batch(p, policy, noise, penalized=False)
    assert rep.mean == pytest.approx(res.total.mean(), rel=1e-12)
    assert rep.stderr == pytest.approx(res.total.std(ddof=1) / np.sqrt(500))
    assert rep.feasible and rep.n_samples == 500


def test_evaluation_projects_onto_box():
    p = random_lq(0, 2, 2, 3, constrained=True)
    policy = StackedPolicy.for_problem(p, (4,), seed=0)
    for net in policy.subnets:
        net.dense[-1].b[:] = 50.0   # far outside the control box
    rep, rolls = evaluate(p, policy, 200, return_rollouts=True)
    assert rep.max_violation <= FEASIBILITY_TOL
    assert np.abs(rolls[0].actions).max() <= p.control_bound + 1e-12


def test_evaluation_is_chunk_invariant():
    p = default_lq(3)
    policy = StackedPolicy.for_problem(p, (4,), seed=0)
    a = evaluate(p, policy, 1000, seed=2, chunk=1000)
    b = evaluate(p, policy, 1000, seed=2, chunk=300)
    assert a.mean == pytest.approx(b.mean, rel=1e-13)


def test_relative_metric():
    assert relative_metric(100, 100, "min") == 1.0
    assert relative_metric(1.009, 1.0, "min") == pytest.approx(1.009)
    assert relative_metric(0.995, 1.0, "max") == pytest.approx(0.995)
    with pytest.raises(ValueError):
        relative_metric(1.0, 0.0)
    with pytest.raises(ValueError):
        relative_metric(1.0, 1.0, "median")


# ---------------------------------------------------------------- gradient check

def test_gradient_check_passes_on_random_lq():
    p = random_lq(4, 2, 2, 3, constrained=True)
    policy = StackedPolicy.for_problem(p, (4, 4), seed=4)
    rep = gradient_check(p, policy, p.sample_noise(4, np.random.default_rng(4)))
    assert rep.passed, rep.worst_error
    assert rep.worst_error < 1e-4


def test_gradient_check_restores_parameters():
    p = default_lq(3)
    policy = StackedPolicy.for_problem(p, (3,), seed=0)
    before = {k: v.copy() for k, v in policy.parameters().items()}
    gradient_check(p, policy, p.sample_noise(4, np.random.default_rng(0)))
    for k, v in policy.parameters().items():
        assert np.array_equal(v, before[k])


def test_gradient_check_catches_corrupted_rule(monkeypatch):
    from stackedcontrol.diffgraph import RULES
    fwd, bwd = RULES["relu"]
    monkeypatch.setitem(RULES, "relu", (fwd, lambda ctx, g: tuple(1.1 * x for x in bwd(ctx, g))))
    p = random_lq(4, 2, 2, 3, constrained=True)
    policy = StackedPolicy.for_problem(p, (4, 4), seed=4)
    rep = gradient_check(p, policy, p.sample_noise(4, np.random.default_rng(4)))
    assert not rep.passed
