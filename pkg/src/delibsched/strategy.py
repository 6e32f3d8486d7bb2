"""Deliberation strategies: fixed sequences of envelope-alteration and optimization steps."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .automaton import StochasticAutomaton
from .costs import CostModel
from .envelope import (
    RestrictedAutomaton,
    extend_robustify,
    falling_out_distribution,
    find_path,
    out_value,
    prune,
    restrict,
)
from .mdp import Policy, SolverConfig, evaluate_actions, policy_iteration

FINDPATH = "FP"
ROBUSTIFY = "R"
PRUNE = "P"
OPTIMIZE = "O"
EXTEND_PATH_TO_GOAL = "XG"
EXTEND_PATH_BACK = "XB"

STANDARD_N = (10, 20, 50, 100)

_TOKEN = re.compile(r"^(FP|O|XG|XB|R\[(\d+)\]|P\[(\d+)\])$")


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class Step:
    kind: str
    n: int | None = None

    def __str__(self) -> str:
        return f"{self.kind}[{self.n}]" if self.n is not None else self.kind


@dataclass(frozen=True)
class DeliberationStrategy:
    steps: tuple

    def __post_init__(self):
        if not self.steps or self.steps[0].kind != FINDPATH:
            raise StrategyError("a strategy must begin with FP")
        if self.steps[-1].kind != OPTIMIZE:
            raise StrategyError("a strategy must end with O")

    @property
    def label(self) -> str:
        return " ".join(str(s) for s in self.steps)

    def __str__(self) -> str:
        return self.label

    @classmethod
    def parse(cls, label: str) -> "DeliberationStrategy":
        if not label or label != label.strip() or "  " in label:
            raise StrategyError(f"malformed strategy label {label!r}")
        steps = []
        for tok in label.split(" "):
            m = _TOKEN.match(tok)
            if m is None:
                raise StrategyError(f"unknown token {tok!r} in {label!r}")
            if m.group(2) is not None or m.group(3) is not None:
                n = int(m.group(2) or m.group(3))
                if n < 1:
                    raise StrategyError(f"N must be positive in {tok!r}")
                steps.append(Step(tok[0], n))
            else:
                steps.append(Step(tok))
        return cls(tuple(steps))


def standard_strategy_roster() -> list[DeliberationStrategy]:
    """The fixed 24-strategy family used by the recurrent experiments."""
    labels = []
    labels += [f"FP R[{n}] O" for n in STANDARD_N]
    labels += [f"FP P[{n}] O" for n in STANDARD_N]
    labels += [f"FP P[20] R[{n}] O" for n in STANDARD_N]
    labels += [f"FP R[{n}] P[50] O" for n in STANDARD_N]
    labels += [f"FP R[{n}] O P[{n}] O" for n in STANDARD_N]
    labels += [f"FP R[{n}] O R[{n}] O" for n in STANDARD_N]
    return [DeliberationStrategy.parse(s) for s in labels]


@dataclass(frozen=True)
class PlanningContext:
    automaton: StochasticAutomaton
    config: SolverConfig = SolverConfig()
    costs: CostModel = CostModel()
    p_back: float = 0.0
    reflex_action: int = 0
    run_start: int | None = None
    fallout_tolerance: float = 1e-9


@dataclass(frozen=True, eq=False)
class Plan:
    """Planner state: envelope, actions on it, and the latest restricted solution."""

    envelope: tuple = ()
    actions: Mapping[int, int] = field(default_factory=dict)
    restricted: RestrictedAutomaton | None = None
    values: np.ndarray | None = None

    def policy(self, reflex_action: int = 0) -> Policy:
        return Policy(dict(self.actions), reflex_action)

    def fresh(self) -> bool:
        return self.restricted is not None and self.restricted.envelope == self.envelope

    def estimate(self, state: int, gamma: float) -> float:
        """Restricted-model value of ``state``; states outside use the OUT value."""
        if not self.fresh():
            return out_value(gamma)
        return float(self.values[self.restricted.local_or_out(state)])

    def system_values(self, n_states: int, gamma: float) -> np.ndarray:
        if not self.fresh():
            return np.full(n_states, out_value(gamma))
        return self.restricted.system_values(self.values)


@dataclass
class StrategyOutcome:
    plan: Plan
    ticks: int
    log: list = field(default_factory=list)


def optimize(ctx: PlanningContext, envelope: tuple, actions: Mapping[int, int]) -> tuple[Plan, int, int]:
    """Policy iteration to completion on the restricted automaton; returns (plan, ticks, rounds)."""
    r = restrict(ctx.automaton, envelope, ctx.p_back)
    init = np.array([actions.get(x, ctx.reflex_action) for x in envelope] + [ctx.reflex_action], dtype=np.int64)
    res = policy_iteration(
        r.model, r.reward_vector(), init, ctx.config, round_cost=ctx.costs.pg_round(len(envelope))
    )
    local = res.policy.as_array(r.model.n_states)
    new_actions = {x: int(local[i]) for i, x in enumerate(envelope)}
    return Plan(tuple(envelope), new_actions, r, res.values.values), res.ticks, res.rounds


def evaluate_plan(ctx: PlanningContext, envelope: tuple, actions: Mapping[int, int]) -> tuple[RestrictedAutomaton, np.ndarray]:
    r = restrict(ctx.automaton, envelope, ctx.p_back)
    acts = np.array([actions.get(x, ctx.reflex_action) for x in envelope] + [ctx.reflex_action], dtype=np.int64)
    return r, evaluate_actions(r.model, r.reward_vector(), acts, ctx.config)


def _add_path(env: tuple, actions: dict, path) -> tuple[tuple, int]:
    member = set(env)
    new = tuple(x for x in path.states if x not in member)
    for x, a in path.action_map().items():
        if x not in member:
            actions[x] = a
    return env + new, len(new)


def _reaches_goal(automaton: StochasticAutomaton, env: tuple, actions: Mapping[int, int], state: int,
                  reflex_action: int = 0) -> bool:
    """Whether a goal is reachable from ``state`` under ``actions`` without leaving ``env``."""
    member = set(env)
    goals = automaton.goal_states
    seen = {state}
    todo = [state]
    while todo:
        x = todo.pop()
        if x in goals:
            return True
        for y, p in automaton.successors(x, actions.get(x, reflex_action)):
            if p > 0 and y in member and y not in seen:
                seen.add(y)
                todo.append(y)
    return False


def apply_strategy(
    strategy: DeliberationStrategy,
    ctx: PlanningContext,
    plan: Plan,
    current_state: int,
) -> StrategyOutcome:
    """Run the strategy's primitives in order, charging ticks per the cost model.

    FP adds a path when the current state is outside the envelope, and also
    when it is inside but cannot reach a goal without leaving it.
    """
    env = tuple(plan.envelope)
    actions = dict(plan.actions)
    current = plan
    total = 0
    log = []
    auto, costs = ctx.automaton, ctx.costs
    for step in strategy.steps:
        ticks = 0
        if step.kind == FINDPATH:
            if current_state not in env or not _reaches_goal(auto, env, actions, current_state, ctx.reflex_action):
                path = find_path(auto, current_state)
                env, _ = _add_path(env, actions, path)
                ticks = costs.findpath(path.expanded)
        elif step.kind == ROBUSTIFY:
            if current_state in env:
                alt = extend_robustify(auto, env, Policy(actions, ctx.reflex_action), current_state, step.n, ctx.fallout_tolerance)
                env = alt.envelope
                ticks = costs.alteration(alt.analysis_size, len(alt.changed))
        elif step.kind == PRUNE:
            if current_state in env:
                r, v = evaluate_plan(ctx, env, actions)
                values = {x: float(v[i]) for i, x in enumerate(env)}
                protected = () if ctx.run_start is None else (ctx.run_start,)
                alt = prune(auto, env, Policy(actions, ctx.reflex_action), values, current_state, step.n,
                            ctx.config.gamma, protected)
                for x in alt.changed:
                    actions.pop(x, None)
                env = alt.envelope
                ticks = costs.alteration(alt.analysis_size, len(alt.changed))
        elif step.kind in (EXTEND_PATH_TO_GOAL, EXTEND_PATH_BACK):
            if current_state in env:
                fo = falling_out_distribution(auto, env, Policy(actions, ctx.reflex_action), current_state,
                                              ctx.fallout_tolerance)
                ranked = fo.ranked()
                added = 0
                expanded = 0
                if ranked:
                    goals = None if step.kind == EXTEND_PATH_TO_GOAL else frozenset(env)
                    path = find_path(auto, ranked[0], goals)
                    env, added = _add_path(env, actions, path)
                    expanded = path.expanded
                ticks = costs.alteration(len(env) - added, added) + (costs.findpath(expanded) if expanded else 0)
        elif step.kind == OPTIMIZE:
            current, ticks, _ = optimize(ctx, env, actions)
            actions = dict(current.actions)
            env = current.envelope
        else:  # pragma: no cover - parse() rejects other kinds
            raise StrategyError(f"unsupported step {step}")
        total += ticks
        log.append((str(step), ticks))
    if not current.fresh() or current.envelope != env:
        current = Plan(env, actions, None, None)
    return StrategyOutcome(current, total, log)
