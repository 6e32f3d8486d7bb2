import pytest

from conftest import chain, fig1
from delibsched.costs import CostModel
from delibsched.envelope import falling_out_distribution, find_path, restrict
from delibsched.gridworld import GridDomain, bundled_map
from delibsched.mdp import Policy, policy_iteration
from delibsched.strategy import (
    DeliberationStrategy,
    Plan,
    PlanningContext,
    StrategyError,
    apply_strategy,
    optimize,
    standard_strategy_roster,
)

QUOTED = ["FP R[10] O", "FP P[20] O", "FP P[20] R[50] O", "FP R[100] P[50] O", "FP R[50] O P[50] O"]


@pytest.mark.parametrize("label", QUOTED + ["FP O", "FP XG O", "FP XB R[3] O"])
def test_labels_round_trip(label):
    assert DeliberationStrategy.parse(label).label == label


@pytest.mark.parametrize("label", ["", "R[10] O", "FP R[10]", "FP  O", "FP R[0] O", "FP Q O", " FP O", "FP R[x] O"])
def test_bad_labels(label):
    with pytest.raises(StrategyError):
        DeliberationStrategy.parse(label)


def test_roster():
    roster = [s.label for s in standard_strategy_roster()]
    assert len(roster) == 24 and len(set(roster)) == 24
    for q in QUOTED:
        assert q in roster
    for lab in roster:
        s = DeliberationStrategy.parse(lab)
        assert s.steps[0].kind == "FP" and s.steps[-1].kind == "O"
        assert all(st.n in (None, 10, 20, 50, 100) for st in s.steps)


def test_fp_o_on_optimal_plan_costs_one_round():
    a = fig1()
    ctx = PlanningContext(a)
    plan, _, _ = optimize(ctx, (1, 2, 3, 4, 5), {1: 0, 2: 0, 3: 0, 5: 0})
    out = apply_strategy(DeliberationStrategy.parse("FP O"), ctx, plan, 1)
    assert out.plan.envelope == plan.envelope
    assert out.ticks == CostModel().pg_round(5)
    assert out.log == [("FP", 0), ("O", 125)]


def test_fp_r_o_from_fresh_start():
    a = fig1()
    ctx = PlanningContext(a)
    out = apply_strategy(DeliberationStrategy.parse("FP R[10] O"), ctx, Plan(), 1)
    path = find_path(a, 1)
    fo = falling_out_distribution(a, path.states, Policy(path.action_map()), 1)
    assert set(out.plan.envelope) == set(path.states) | set(fo.ranked()[:10])
    r = restrict(a, out.plan.envelope)
    opt = policy_iteration(r.model, r.reward_vector(), Policy.reflex(0))
    for i, x in enumerate(r.envelope):
        assert out.plan.values[i] == pytest.approx(opt.values.values[i], abs=1e-9)


@pytest.mark.parametrize("label", QUOTED)
def test_quoted_strategies_execute(label):
    dom = GridDomain(bundled_map("office166"), failure="slip")
    auto = dom.task_automaton((2, 3))
    start = dom.grid.state_id((2, 9), 3)
    ctx = PlanningContext(auto, run_start=start)
    out = apply_strategy(DeliberationStrategy.parse(label), ctx, Plan(), start)
    assert out.plan.fresh()
    assert start in out.plan.envelope
    assert out.ticks == sum(t for _, t in out.log) > 0
    assert out.plan.estimate(start, 0.95) > -20.0


def test_fp_fires_on_dead_envelope_state():
    a = chain(4, goal=3)
    ctx = PlanningContext(a)
    plan, _, _ = optimize(ctx, (0, 1), {0: 0, 1: 1})
    out = apply_strategy(DeliberationStrategy.parse("FP O"), ctx, plan, 1)
    assert 3 in out.plan.envelope
    assert out.plan.estimate(1, 0.95) == pytest.approx(-1 - 0.95)  # two steps to the goal


def test_strategy_is_deterministic():
    a = fig1()
    ctx = PlanningContext(a)
    s = DeliberationStrategy.parse("FP R[10] O P[10] O")
    one = apply_strategy(s, ctx, Plan(), 1)
    two = apply_strategy(s, ctx, Plan(), 1)
    assert one.plan.envelope == two.plan.envelope and one.ticks == two.ticks and one.log == two.log
