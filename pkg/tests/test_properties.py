import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import random_automaton
from delibsched.automaton import RewardSpec
from delibsched.envelope import extend_robustify, find_path, prune, restrict
from delibsched.mdp import Policy, SolverConfig, policy_evaluate, policy_iteration
from delibsched.mdp import iterate_policy
from delibsched.strategy import PlanningContext, optimize

SETTINGS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@st.composite
def instances(draw, max_states=40):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(3, max_states))
    m = draw(st.integers(1, 4))
    a = random_automaton(seed, n, m=m, max_succ=draw(st.integers(1, 4)), n_goals=draw(st.integers(0, 2)))
    rng = np.random.default_rng(seed)
    size = draw(st.integers(1, n))
    env = tuple(int(x) for x in rng.choice(n, size=size, replace=False))
    acts = rng.integers(m, size=n)
    return a, env, acts, rng


@SETTINGS
@given(instances(), st.floats(0.0, 0.9))
def test_restriction_conserves_mass(inst, p_back):
    a, env, _, _ = inst
    r = restrict(a, env, p_back)
    model = r.model
    member = set(env)
    for row in range(model.n_states * model.n_actions):
        lo, hi = model.indptr[row], model.indptr[row + 1]
        assert abs(model.data[lo:hi].sum() - 1.0) <= 1e-12
        assert np.all(model.data[lo:hi] >= 0)
    for i, x in enumerate(env):
        for act in range(a.n_actions):
            row = dict(model.successors(i, act))
            succ = a.successors(x, act)
            inside = sum(p for y, p in succ if y in member)
            leaves = any(y not in member for y, _ in succ)
            assert row.get(r.out_id, 0.0) == (max(1.0 - inside, 0.0) if leaves else 0.0)


@SETTINGS
@given(instances())
def test_restricted_value_is_a_lower_bound(inst):
    a, env, acts, _ = inst
    pol = Policy({x: int(acts[x]) for x in env}, reflex_action=0)
    r = restrict(a, env)
    rw = RewardSpec(a.goal_states)
    local = policy_evaluate(r.model, r.reward_vector(), Policy.from_array(r.local_actions(pol))).values
    exact = policy_evaluate(a, rw, pol).values
    for i, x in enumerate(env):
        assert local[i] <= exact[x] + 1e-6


@SETTINGS
@given(instances(), st.data())
def test_envelope_growth_never_lowers_optimum(inst, data):
    a, env, acts, rng = inst
    start = env[0]
    extra = [x for x in range(a.n_states) if x not in env]
    more = data.draw(st.lists(st.sampled_from(extra), unique=True, max_size=len(extra))) if extra else []
    ctx = PlanningContext(a)
    small, _, _ = optimize(ctx, env, {})
    big, _, _ = optimize(ctx, env + tuple(more), {})
    assert big.estimate(start, 0.95) >= small.estimate(start, 0.95) - 1e-9


@SETTINGS
@given(instances())
def test_policy_iteration_rounds_are_monotone(inst):
    a, _, acts, _ = inst
    r = RewardSpec(a.goal_states).vector(a.n_states)
    prev = None
    for _, v, _ in iterate_policy(a, r, acts, SolverConfig()):
        if prev is not None:
            assert np.all(v >= prev - 1e-9)
        prev = v


@SETTINGS
@given(instances(), st.integers(0, 12))
def test_interrupted_policy_iteration_is_usable_and_no_worse(inst, rounds):
    a, _, acts, _ = inst
    rw = RewardSpec(a.goal_states)
    n = a.n_states
    start = policy_evaluate(a, rw, Policy.from_array(acts)).values
    cut = policy_iteration(a, rw, Policy.from_array(acts), budget=rounds * n ** 3)
    later = policy_iteration(a, rw, Policy.from_array(acts), budget=(rounds + 1) * n ** 3)
    assert cut.ticks <= rounds * n ** 3
    assert len(cut.policy.as_array(n)) == n
    held = policy_evaluate(a, rw, cut.policy).values
    assert np.allclose(held, cut.values.values, atol=1e-8)
    assert np.all(held >= start - 1e-9)
    assert np.all(later.values.values >= held - 1e-9)


@SETTINGS
@given(instances(), st.integers(1, 10))
def test_alterations_are_sane_and_deterministic(inst, count):
    a, env, acts, rng = inst
    pol = Policy.from_array(acts)
    cur = env[0]
    grown = extend_robustify(a, env, pol, cur, count)
    assert set(env) <= set(grown.envelope)
    assert grown.envelope == extend_robustify(a, env, pol, cur, count).envelope
    values = {x: float(v) for x, v in zip(env, rng.uniform(-20, 0, len(env)))}
    cut = prune(a, env, pol, values, cur, count)
    assert set(cut.envelope) <= set(env) and cur in cut.envelope
    assert not set(cut.changed) & set(a.goal_states)
    assert cut.envelope == prune(a, env, pol, values, cur, count).envelope


@SETTINGS
@given(instances())
def test_find_path_is_connected(inst):
    a, env, _, _ = inst
    if not a.goal_states:
        return
    try:
        res = find_path(a, env[0])
    except RuntimeError:
        return
    assert res.states[0] == env[0] and res.states[-1] in a.goal_states
    for x, act, y in zip(res.states, res.actions, res.states[1:]):
        assert dict(a.successors(x, act)).get(y, 0.0) > 0
    prob = np.prod([dict(a.successors(x, act))[y] for x, act, y in zip(res.states, res.actions, res.states[1:])])
    assert abs(prob - res.probability) < 1e-12
