"""Planning interleaved with execution: strategy statistics and the LOOKUP scheduler."""

from __future__ import annotations

import csv
import io
import math
import weakref
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .automaton import RewardSpec, StochasticAutomaton
from .binning import Moments, bin_index, format_edges, parse_edges, quantile_edges
from .costs import CostModel
from .envelope import UnreachableGoalError, fringe, out_value
from .gridworld import STAY
from .mdp import (
    Policy,
    SolverConfig,
    absorbing_policy_matrix,
    action_array,
    iterate_policy,
    reward_vector,
)
from .strategy import DeliberationStrategy, Plan, PlanningContext, apply_strategy, standard_strategy_roster

EIV_HEADER = "eiv-table v1"
FEATURES = ("size", "value", "fatness", "distance")

STRATEGY_PACED, FIXED_TICKS, ON_FALLOUT = "STRATEGY-PACED", "FIXED-TICKS", "ON-FALLOUT"
COUPLING_MODES = (STRATEGY_PACED, FIXED_TICKS, ON_FALLOUT)
LOOKUP, ITER, WHOLE, FIXED, RANDOM = "LOOKUP", "ITER", "WHOLE", "FIXED", "RANDOM"
SCHEDULERS = (LOOKUP, ITER, WHOLE, FIXED, RANDOM)

DEFAULT_EXCHANGE_RATE = 1e-9
DEFAULT_P_BACK = 0.0


# ---------------------------------------------------------------- value formulas

def _rollout(automaton: StochasticAutomaton, policy, start: int, steps: int, gamma: float,
             mass: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Discounted expected reward over ``steps`` steps and the final distribution.

    Goal states are absorbing and earn nothing.
    """
    n = automaton.n_states
    goals = automaton.goal_states
    r = np.where(automaton.goal_mask, 0.0, -1.0)
    if mass is None:
        mass = np.zeros(n)
        mass[start] = 1.0
    if steps == 0:
        return 0.0, mass
    pt = absorbing_policy_matrix(automaton, action_array(policy, n), goals).T.tocsr()
    total = 0.0
    for i in range(steps):
        total += gamma ** i * float(r @ mass)
        mass = pt @ mass
    return total, mass


def _terminal(mass: np.ndarray, values, goal_mask: np.ndarray) -> float:
    v = np.broadcast_to(np.asarray(values, dtype=float), mass.shape)
    live = ~goal_mask
    return float(mass[live] @ v[live])


def myopic_strategy_value(
    automaton: StochasticAutomaton,
    policy,
    improved,
    x: int,
    n: int,
    gamma: float,
    v_star,
) -> float:
    """Value of running ``policy`` for n steps while the strategy computes, then ``improved`` for n.

    Equals -sum_{i<2n} gamma^i (counting only steps taken off the goal) plus
    gamma^{2n} E[V*(x_2n)], with goals absorbing at value 0.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if x in automaton.goal_states:
        return 0.0
    first, mass = _rollout(automaton, policy, x, n, gamma)
    second, mass = _rollout(automaton, improved, x, n, gamma, mass)
    return first + gamma ** n * second + gamma ** (2 * n) * _terminal(mass, v_star, automaton.goal_mask)


def eiv_sample(
    automaton: StochasticAutomaton,
    policy,
    x: int,
    k: int,
    gamma: float,
    vhat_before: float,
    vhat_after,
) -> float:
    """Estimated improvement from a strategy whose execution took ``k`` steps under ``policy``.

    ``vhat_before`` is the old estimate at ``x``; ``vhat_after`` holds the new
    estimates over system states (a scalar broadcasts).
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if x in automaton.goal_states:
        return 0.0 - vhat_before
    acc, mass = _rollout(automaton, policy, x, k, gamma)
    return acc + gamma ** k * _terminal(mass, vhat_after, automaton.goal_mask) - vhat_before


def fatness(envelope, fringe_states) -> float:
    return len(envelope) / max(1, len(fringe_states))


# ---------------------------------------------------------------- features and table

@dataclass(frozen=True)
class RunFeatures:
    size: float
    value: float
    fatness: float
    distance: float

    def as_tuple(self) -> tuple:
        return (self.size, self.value, self.fatness, self.distance)


def plan_features(automaton, plan: Plan, state: int, gamma: float, distance: float, reflex_action: int = STAY) -> RunFeatures:
    env = plan.envelope
    fr = fringe(automaton, env, plan.policy(reflex_action)) if env else ()
    return RunFeatures(float(len(env)), plan.estimate(state, gamma), fatness(env, fr), float(distance))


@dataclass(frozen=True)
class EIVSample:
    run: int
    invocation: int
    features: RunFeatures
    strategy: str
    ticks: int
    steps: int
    eiv: float

    @property
    def rate(self) -> float:
        return self.eiv / self.ticks


@dataclass(eq=False)
class EIVTable:
    """Per feature cell and strategy: moments of estimated improvement per tick."""

    edges: tuple  # one edge array per feature
    strategies: tuple  # roster labels, in tie-break order
    min_count: int = 5
    cells: dict = field(default_factory=dict)  # (i, j, k, l) -> {label: Moments}

    def cell_of(self, features: RunFeatures) -> tuple:
        return tuple(bin_index(e, x) for e, x in zip(self.edges, features.as_tuple()))

    def _pooled(self, label: str, match) -> Moments:
        return Moments.pool(m[label] for key, m in self.cells.items() if label in m and match(key))

    def estimate(self, features: RunFeatures, label: str) -> tuple[Moments, str]:
        """Statistic for ``label``: the full cell, else coarser marginals, else global."""
        cell = self.cell_of(features)
        chain = (
            ("cell", lambda k: k == cell),
            ("size-value", lambda k: k[:2] == cell[:2]),
            ("value", lambda k: k[1] == cell[1]),
            ("global", lambda k: True),
        )
        for name, match in chain:
            m = self._pooled(label, match)
            if m.count >= self.min_count:
                return m, name
        return m, "global"

    def scores(self, features: RunFeatures) -> list[float]:
        out = []
        for label in self.strategies:
            m, _ = self.estimate(features, label)
            out.append(m.mean if m.count > 0 else -math.inf)
        return out

    def counts(self) -> dict:
        tot = {s: 0 for s in self.strategies}
        for m in self.cells.values():
            for label, mom in m.items():
                tot[label] = tot.get(label, 0) + mom.count
        return tot

    def empty(self) -> bool:
        return not any(self.counts().values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, EIVTable):
            return NotImplemented
        return (
            len(self.edges) == len(other.edges)
            and all(np.array_equal(a, b) for a, b in zip(self.edges, other.edges))
            and tuple(self.strategies) == tuple(other.strategies)
            and self.min_count == other.min_count
            and self.cells == other.cells
        )


def build_eiv_table(samples, roster=None, bins: int = 3, min_count: int = 5) -> EIVTable:
    if not samples:
        raise ValueError("no samples")
    labels = tuple(s.label for s in (roster or standard_strategy_roster()))
    cols = np.array([s.features.as_tuple() for s in samples], dtype=float)
    edges = tuple(quantile_edges(cols[:, i], bins) for i in range(len(FEATURES)))
    table = EIVTable(edges, labels, min_count)
    groups: dict = {}
    for s in samples:
        if s.strategy not in labels:
            raise ValueError(f"sample strategy {s.strategy!r} is not in the roster")
        groups.setdefault(table.cell_of(s.features), {}).setdefault(s.strategy, []).append(s.rate)
    for key in sorted(groups):
        table.cells[key] = {lab: Moments.of(groups[key][lab]) for lab in labels if lab in groups[key]}
    return table


def lookup_best_strategy(table: EIVTable, features: RunFeatures) -> DeliberationStrategy:
    """Roster strategy with the highest expected improvement per tick; ties go to roster order."""
    scores = table.scores(features)
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return DeliberationStrategy.parse(table.strategies[best])


def dump_eiv_table(table: EIVTable) -> str:
    out = io.StringIO()
    out.write(EIV_HEADER + "\n")
    out.write(f"min_count {table.min_count}\n")
    out.write("strategies " + ";".join(table.strategies) + "\n")
    for name, e in zip(FEATURES, table.edges):
        out.write(f"{name}_edges {format_edges(e)}\n")
    out.write("cell,strategy,mean,variance,count\n")
    for key, row in sorted(table.cells.items()):
        cid = "-".join(str(i) for i in key)
        for label in table.strategies:
            if label in row:
                m = row[label]
                out.write(f"{cid},{label},{m.mean!r},{m.variance!r},{m.count}\n")
    return out.getvalue()


def parse_eiv_table(text: str) -> EIVTable:
    lines = text.splitlines()
    if not lines or lines[0] != EIV_HEADER:
        raise ValueError(f"missing '{EIV_HEADER}' header")
    if len(lines) < 4 + len(FEATURES):
        raise ValueError("truncated eiv table")

    def field_of(line, key):
        head, _, rest = line.partition(" ")
        if head != key:
            raise ValueError(f"expected '{key}' line, found {line!r}")
        return rest

    min_count = int(field_of(lines[1], "min_count"))
    labels = tuple(field_of(lines[2], "strategies").split(";"))
    for lab in labels:
        DeliberationStrategy.parse(lab)
    edges = tuple(parse_edges(field_of(lines[3 + i], f"{name}_edges")) for i, name in enumerate(FEATURES))
    hdr = 3 + len(FEATURES)
    if lines[hdr] != "cell,strategy,mean,variance,count":
        raise ValueError("bad column header in eiv table")
    table = EIVTable(edges, labels, min_count)
    shape = [len(e) - 1 for e in edges]
    for lineno, line in enumerate(lines[hdr + 1:], start=hdr + 2):
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields")
        key = tuple(int(t) for t in parts[0].split("-"))
        if len(key) != len(FEATURES) or any(not 0 <= i < s for i, s in zip(key, shape)):
            raise ValueError(f"line {lineno}: cell {parts[0]} outside the bin grid")
        if parts[1] not in labels:
            raise ValueError(f"line {lineno}: strategy {parts[1]!r} not in the roster")
        m = Moments(float(parts[2]), float(parts[3]), int(parts[4]))
        if m.count < 1 or m.variance < 0:
            raise ValueError(f"line {lineno}: bad count or variance")
        table.cells.setdefault(key, {})[parts[1]] = m
    return table


def bundled_eiv_table() -> EIVTable:
    """Table gathered on the bundled floor314 map with the default settings."""
    from importlib import resources

    return parse_eiv_table(resources.files("delibsched").joinpath("data").joinpath("floor314.eiv").read_text())


# ---------------------------------------------------------------- coupling and schedulers

@dataclass(frozen=True)
class CouplingConfig:
    mode: str = STRATEGY_PACED
    exchange_rate: float = DEFAULT_EXCHANGE_RATE  # execution steps per deliberation tick
    interval: int = 1  # ticks between exchanges in FIXED-TICKS
    step_cap: int = 2000

    def __post_init__(self):
        if self.mode not in COUPLING_MODES:
            raise ValueError(f"coupling mode must be one of {COUPLING_MODES}")
        if not self.exchange_rate > 0:
            raise ValueError("exchange rate must be positive")
        if self.mode == FIXED_TICKS and self.interval < 1:
            raise ValueError("FIXED-TICKS interval must be at least 1")
        if self.step_cap < 1:
            raise ValueError("step cap must be at least 1")

    def steps_for(self, ticks: int) -> int:
        """Executor steps that elapse while ``ticks`` of deliberation run."""
        if self.mode == FIXED_TICKS:
            ticks = self.interval * math.ceil(ticks / self.interval)
        return max(1, math.ceil(ticks * self.exchange_rate))


@dataclass(frozen=True)
class Scheduler:
    kind: str
    table: EIVTable | None = None
    strategy: DeliberationStrategy | None = None
    roster: tuple = ()

    def __post_init__(self):
        if self.kind not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}")
        if self.kind == FIXED and self.strategy is None:
            raise ValueError("FIXED needs a strategy")

    @property
    def name(self) -> str:
        return f"FIXED({self.strategy.label})" if self.kind == FIXED else self.kind

    def strategies(self) -> list:
        if self.roster:
            return list(self.roster)
        if self.table is not None:
            return [DeliberationStrategy.parse(s) for s in self.table.strategies]
        return standard_strategy_roster()

    def choose(self, features: RunFeatures, rng: np.random.Generator) -> DeliberationStrategy:
        if self.kind == FIXED:
            return self.strategy
        if self.kind == LOOKUP and self.table is not None and not self.table.empty():
            return lookup_best_strategy(self.table, features)
        pool = self.strategies()
        return pool[int(rng.integers(len(pool)))]


@dataclass(frozen=True)
class StepRecord:
    step: int
    state: int
    action: int
    reflexive: bool
    policy_id: int
    next_state: int
    at_goal: bool


@dataclass(frozen=True)
class Invocation:
    index: int
    start_step: int
    strategy: str
    ticks: int
    steps: int
    size_before: int
    size_after: int
    value_before: float
    value_after: float
    eiv: float = math.nan
    features: RunFeatures | None = None


@dataclass
class RunTrace:
    scheduler: str
    steps: list = field(default_factory=list)
    invocations: list = field(default_factory=list)
    shipped: int = 0

    @property
    def steps_taken(self) -> int:
        return len(self.steps)

    @property
    def reached_goal(self) -> bool:
        return bool(self.steps) and self.steps[-1].at_goal

    @property
    def capped(self) -> bool:
        return not self.reached_goal

    @property
    def ticks(self) -> int:
        return sum(i.ticks for i in self.invocations)


class _Executor:
    """Steps the robot under the latest shipped policy; one uniform draw per step."""

    def __init__(self, automaton: StochasticAutomaton, start: int, rng, cap: int, trace: RunTrace):
        self.a = automaton
        self.state = start
        self.rng = rng
        self.cap = cap
        self.trace = trace
        self.policy = Policy.reflex(STAY)
        self.domain: frozenset = frozenset()
        self.policy_id = 0

    @property
    def done(self) -> bool:
        return self.state in self.a.goal_states or len(self.trace.steps) >= self.cap

    def ship(self, policy: Policy, domain=None):
        self.policy = policy
        self.domain = policy.domain if domain is None else domain
        self.policy_id += 1
        self.trace.shipped += 1

    def step(self):
        s = self.state
        act = self.policy(s)
        row = s * self.a.n_actions + act
        lo, hi = self.a.indptr[row], self.a.indptr[row + 1]
        u = self.rng.random()
        i = min(int(np.searchsorted(np.cumsum(self.a.data[lo:hi]), u, side="right")), hi - lo - 1)
        nxt = int(self.a.indices[lo + i])
        self.trace.steps.append(StepRecord(len(self.trace.steps) + 1, s, act, s not in self.domain,
                                           self.policy_id, nxt, nxt in self.a.goal_states))
        self.state = nxt

    def advance(self, n: int):
        for _ in range(n):
            if self.done:
                return
            self.step()


def simulate_steps(automaton: StochasticAutomaton, policy, start: int, n: int, rng) -> int:
    """State after ``n`` executor steps of ``policy``; goals stop the walk."""
    ex = _Executor(automaton, start, np.random.default_rng(rng), n, RunTrace("sim"))
    if isinstance(policy, Policy):
        ex.policy = policy
    else:
        ex.policy = Policy.from_array(policy)
    ex.advance(n)
    return ex.state


_FULL_ROUNDS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def full_space_rounds(automaton: StochasticAutomaton, config: SolverConfig, reflex_action: int = STAY) -> list:
    """Policy-iteration rounds on the whole automaton from the reflex policy (cached)."""
    per = _FULL_ROUNDS.setdefault(automaton, {})
    key = (config, reflex_action)
    if key not in per:
        n = automaton.n_states
        r = reward_vector(RewardSpec(automaton.goal_states), n)
        it = iterate_policy(automaton, r, np.full(n, reflex_action, dtype=np.int64), config)
        next(it)
        per[key] = [(actions.copy(), converged) for actions, _, converged in it]
    return per[key]


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def run_recurrent(
    automaton: StochasticAutomaton,
    start: int,
    scheduler: Scheduler,
    coupling: CouplingConfig = CouplingConfig(),
    config: SolverConfig = SolverConfig(),
    seed: int = 0,
    costs: CostModel = CostModel(),
    p_back: float = DEFAULT_P_BACK,
    distance: Callable[[int], float] | None = None,
    record_eiv: bool = False,
) -> RunTrace:
    """Simulate the planner and executor exchanging policies and observed states.

    The executor starts on the reflex policy. Each planner invocation sees
    the state observed at its start; while it runs, the executor advances
    ``coupling.steps_for(ticks)`` steps on the previous policy, then the new
    policy ships and the next state is observed.
    """
    if start in automaton.goal_states:
        raise ValueError("start must not be a goal state")
    if not automaton.goal_states:
        raise ValueError("automaton has no goal states")
    exec_rng, plan_rng = _streams(seed)
    trace = RunTrace(scheduler.name)
    ex = _Executor(automaton, start, exec_rng, coupling.step_cap, trace)
    if scheduler.kind in (ITER, WHOLE):
        _run_full(automaton, scheduler, coupling, config, costs, ex, trace)
        return trace
    dist = distance or (lambda s: 0.0)
    ctx = PlanningContext(automaton, config, costs, p_back, STAY, start)
    gamma = config.gamma
    plan = Plan()
    while not ex.done:
        if coupling.mode == ON_FALLOUT and plan.envelope and ex.state in ex.domain:
            ex.step()
            continue
        obs = ex.state
        feats = plan_features(automaton, plan, obs, gamma, dist(obs))
        strat = scheduler.choose(feats, plan_rng)
        before = plan.estimate(obs, gamma)
        old_policy = ex.policy
        try:
            out = apply_strategy(strat, ctx, plan, obs)
        except UnreachableGoalError:
            ex.advance(coupling.step_cap)
            break
        k = coupling.steps_for(out.ticks)
        new = out.plan
        eiv = math.nan
        if record_eiv:
            eiv = eiv_sample(automaton, old_policy, obs, k, gamma, before,
                             new.system_values(automaton.n_states, gamma))
        trace.invocations.append(Invocation(
            len(trace.invocations), len(trace.steps), strat.label, out.ticks, k,
            len(plan.envelope), len(new.envelope), before, new.estimate(obs, gamma), eiv, feats,
        ))
        ex.advance(k)
        plan = new
        ex.ship(plan.policy(STAY))
    return trace


def _run_full(automaton, scheduler, coupling, config, costs, ex: _Executor, trace: RunTrace):
    rounds = full_space_rounds(automaton, config)
    n = automaton.n_states
    cost = costs.pg_round(n)
    everything = frozenset(range(n))
    elapsed = 0
    shipped_at = 0
    for i, (actions, converged) in enumerate(rounds):
        if ex.done:
            return
        elapsed += cost
        ship = scheduler.kind == ITER or converged
        if not ship:
            continue
        # the executor runs on the old policy until this round's result can ship
        k = coupling.steps_for(elapsed - shipped_at)
        trace.invocations.append(Invocation(len(trace.invocations), len(trace.steps), f"PI round {i + 1}",
                                            elapsed - shipped_at, k, n, n, math.nan, math.nan))
        ex.advance(k)
        shipped_at = elapsed
        if ship:
            ex.ship(Policy.from_array(actions, reflex_action=STAY), everything)
    while not ex.done:
        ex.step()


# ---------------------------------------------------------------- statistics gathering

@dataclass
class EIVCampaign:
    samples: list
    runs: int = 0
    capped: int = 0


def gather_eiv_statistics(
    domain,
    runs: int,
    seed: int,
    roster=None,
    coupling: CouplingConfig = CouplingConfig(step_cap=300),
    config: SolverConfig = SolverConfig(),
    costs: CostModel = CostModel(),
    p_back: float = DEFAULT_P_BACK,
) -> EIVCampaign:
    """Run the robot with uniformly random strategy choice and record per-invocation samples."""
    sched = Scheduler(RANDOM, roster=tuple(roster or standard_strategy_roster()))
    camp = EIVCampaign([])
    for run in range(runs):
        rng = np.random.default_rng([seed, run, 2])
        start, goal = domain.sample_task(rng)
        auto = domain.task_automaton(goal)
        trace = run_recurrent(auto, start, sched, coupling, config, int(rng.integers(2 ** 31)), costs, p_back,
                              distance=lambda s, g=goal: domain.distance(s, g), record_eiv=True)
        camp.runs += 1
        camp.capped += trace.capped
        for inv in trace.invocations:
            camp.samples.append(EIVSample(run, inv.index, inv.features, inv.strategy, inv.ticks, inv.steps, inv.eiv))
    return camp


# ---------------------------------------------------------------- trace files

STEP_COLUMNS = ("step", "state", "action", "reflexive", "policy_id", "next_state", "at_goal")
INVOCATION_COLUMNS = ("invocation", "start_step", "strategy", "ticks", "steps", "size_before", "size_after",
                      "value_before", "value_after")


def dump_run_trace(trace: RunTrace) -> tuple[str, str]:
    steps = io.StringIO()
    w = csv.writer(steps, lineterminator="\n")
    w.writerow(STEP_COLUMNS)
    for s in trace.steps:
        w.writerow([s.step, s.state, s.action, int(s.reflexive), s.policy_id, s.next_state, int(s.at_goal)])
    inv = io.StringIO()
    w = csv.writer(inv, lineterminator="\n")
    w.writerow(INVOCATION_COLUMNS)
    for i in trace.invocations:
        w.writerow([i.index, i.start_step, i.strategy, i.ticks, i.steps, i.size_before, i.size_after,
                    repr(i.value_before), repr(i.value_after)])
    return steps.getvalue(), inv.getvalue()


def parse_run_trace(steps_text: str, invocations_text: str, scheduler: str = "") -> RunTrace:
    rows = list(csv.reader(io.StringIO(steps_text)))
    if not rows or tuple(rows[0]) != STEP_COLUMNS:
        raise ValueError("bad step trace header")
    trace = RunTrace(scheduler)
    for r in rows[1:]:
        trace.steps.append(StepRecord(int(r[0]), int(r[1]), int(r[2]), r[3] == "1", int(r[4]), int(r[5]), r[6] == "1"))
    rows = list(csv.reader(io.StringIO(invocations_text)))
    if not rows or tuple(rows[0]) != INVOCATION_COLUMNS:
        raise ValueError("bad invocation trace header")
    for r in rows[1:]:
        trace.invocations.append(Invocation(int(r[0]), int(r[1]), r[2], int(r[3]), int(r[4]), int(r[5]), int(r[6]),
                                            float(r[7]), float(r[8])))
    trace.shipped = max((s.policy_id for s in trace.steps), default=0)
    return trace
