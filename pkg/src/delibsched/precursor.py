"""Deadline-bounded deliberation driven by performance-profile tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .automaton import RewardSpec, StochasticAutomaton
from .binning import bin_index, format_edges, parse_edges, quantile_edges
from .costs import CostModel
from .envelope import UnreachableGoalError, extension_candidates, find_path, out_value
from .gridworld import STAY
from .mdp import Policy, SolverConfig, iterate_policy, policy_evaluate, reward_vector
from .strategy import Plan, PlanningContext, optimize

N_GRID = (1, 2, 5, 10, 20, 50)
GREEDY, INFLEXIBLE_FULL, FLEXIBLE_FULL = "GREEDY", "INFLEXIBLE-FULL", "FLEXIBLE-FULL"
MODES = (GREEDY, INFLEXIBLE_FULL, FLEXIBLE_FULL)
PROFILE_HEADER = "profile-table v1"


class SparseTableError(ValueError):
    pass


@dataclass(frozen=True)
class ProfileSample:
    task: int
    round: int
    size: int
    value: float
    n: int
    added: int
    delta: float
    ticks: int


@dataclass
class ProfileCampaign:
    samples: list
    tasks: int = 0
    skipped: int = 0


def _profile_rounds(domain, task: int, seed: int, n_grid, config, costs, max_rounds, max_envelope, tolerance):
    rng = np.random.default_rng([seed, task])
    start, goal = domain.sample_task(rng)
    auto = domain.task_automaton(goal)
    path = find_path(auto, start)
    ctx = PlanningContext(auto, config, costs, 0.0, STAY, start, tolerance)
    plan, _, _ = optimize(ctx, path.states, path.action_map())
    gamma = config.gamma
    for rnd in range(max_rounds):
        cands = extension_candidates(auto, plan.envelope, plan.policy(STAY), start, tolerance)
        if not cands:
            return
        size, value = len(plan.envelope), plan.estimate(start, gamma)
        outcomes = {}
        rows = []
        for n in n_grid:
            add = tuple(cands[:n])
            if len(add) not in outcomes:
                new, pg_ticks, _ = optimize(ctx, plan.envelope + add, plan.actions)
                outcomes[len(add)] = (new, costs.alteration(size, len(add)) + pg_ticks)
            new, ticks = outcomes[len(add)]
            rows.append(ProfileSample(task, rnd, size, value, n, len(add), new.estimate(start, gamma) - value, ticks))
        yield rows
        plan = outcomes[rows[int(rng.integers(len(n_grid)))].added][0]
        if len(plan.envelope) >= max_envelope:
            return


def gather_profile_statistics(
    domain,
    budget: int,
    seed: int,
    n_grid=N_GRID,
    config: SolverConfig = SolverConfig(),
    costs: CostModel = CostModel(),
    max_rounds: int = 12,
    max_envelope: int = 250,
    tolerance: float = 1e-9,
) -> ProfileCampaign:
    """Sample (envelope size, estimate, n) -> improvement and cost on random tasks.

    Each task starts from a find_path envelope solved to completion. Every
    round tries each n in ``n_grid`` from the same state, records one sample
    per n, then continues from a uniformly chosen n.
    """
    camp = ProfileCampaign([])
    task = 0
    while len(camp.samples) < budget:
        if camp.skipped > 100 and camp.skipped > 10 * len(camp.samples):
            break  # the domain has almost no solvable tasks
        try:
            for rows in _profile_rounds(domain, task, seed, n_grid, config, costs, max_rounds, max_envelope, tolerance):
                camp.samples.extend(rows[: budget - len(camp.samples)])
                if len(camp.samples) >= budget:
                    break
        except UnreachableGoalError:
            camp.skipped += 1
        task += 1
    camp.tasks = task
    return camp


@dataclass(frozen=True)
class CellStats:
    mean_dv: float
    mean_cost: float
    variance: float
    count: int


@dataclass(eq=False)
class ProfileTable:
    """Per (size bin, value bin) curves: n added -> expected improvement and cost."""

    size_edges: np.ndarray
    value_edges: np.ndarray
    n_grid: tuple
    min_count: int
    cells: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.size_edges) - 1, len(self.value_edges) - 1

    def cell_of(self, size: float, value: float) -> tuple[int, int]:
        return bin_index(self.size_edges, size), bin_index(self.value_edges, value)

    def populated(self, key) -> bool:
        curve = self.cells.get(key)
        return bool(curve) and all(n in curve and curve[n].count >= self.min_count for n in self.n_grid)

    def populated_cells(self) -> list:
        return [k for k in sorted(self.cells) if self.populated(k)]

    def lookup(self, size: float, value: float):
        """Curve for the cell of (size, value), or the nearest populated cell."""
        key = self.cell_of(size, value)
        if not self.populated(key):
            pop = self.populated_cells()
            if not pop:
                raise SparseTableError("no populated cell in the profile table")
            key = min(pop, key=lambda k: (abs(k[0] - key[0]) + abs(k[1] - key[1]), k))
        return key, self.cells[key]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProfileTable):
            return NotImplemented
        return (
            np.array_equal(self.size_edges, other.size_edges)
            and np.array_equal(self.value_edges, other.value_edges)
            and tuple(self.n_grid) == tuple(other.n_grid)
            and self.min_count == other.min_count
            and self.cells == other.cells
        )


def build_profile_table(samples, size_bins: int = 4, value_bins: int = 4, min_count: int = 30) -> ProfileTable:
    if not samples:
        raise ValueError("no samples")
    sizes = np.array([s.size for s in samples], dtype=float)
    values = np.array([s.value for s in samples])
    n_grid = tuple(sorted({s.n for s in samples}))
    table = ProfileTable(quantile_edges(sizes, size_bins), quantile_edges(values, value_bins), n_grid, min_count)
    groups: dict = {}
    for s in samples:
        key = table.cell_of(s.size, s.value)
        groups.setdefault(key, {}).setdefault(s.n, []).append(s)
    for key in sorted(groups):
        table.cells[key] = {
            n: CellStats(
                float(np.mean([s.delta for s in rows])),
                float(np.mean([s.ticks for s in rows])),
                float(np.var([s.delta for s in rows])),
                len(rows),
            )
            for n, rows in sorted(groups[key].items())
        }
    if not table.populated_cells():
        raise SparseTableError(
            f"every cell has fewer than {min_count} samples per n; gather a larger budget"
        )
    return table


def dump_profile_table(table: ProfileTable) -> str:
    out = io.StringIO()
    out.write(PROFILE_HEADER + "\n")
    out.write(f"min_count {table.min_count}\n")
    out.write("n_grid " + " ".join(str(n) for n in table.n_grid) + "\n")
    out.write("size_edges " + format_edges(table.size_edges) + "\n")
    out.write("value_edges " + format_edges(table.value_edges) + "\n")
    out.write("size_bin,value_bin,n,mean_dv,mean_cost,variance,count\n")
    for (i, j), curve in sorted(table.cells.items()):
        for n, c in sorted(curve.items()):
            out.write(f"{i},{j},{n},{c.mean_dv!r},{c.mean_cost!r},{c.variance!r},{c.count}\n")
    return out.getvalue()


def _expect(line: str, key: str) -> str:
    head, _, rest = line.partition(" ")
    if head != key:
        raise ValueError(f"expected '{key}' line, found {line!r}")
    return rest


def parse_profile_table(text: str) -> ProfileTable:
    lines = text.splitlines()
    if not lines or lines[0] != PROFILE_HEADER:
        raise ValueError(f"missing '{PROFILE_HEADER}' header")
    if len(lines) < 6:
        raise ValueError("truncated profile table")
    min_count = int(_expect(lines[1], "min_count"))
    n_grid = tuple(int(t) for t in _expect(lines[2], "n_grid").split())
    table = ProfileTable(
        parse_edges(_expect(lines[3], "size_edges")), parse_edges(_expect(lines[4], "value_edges")), n_grid, min_count
    )
    if lines[5] != "size_bin,value_bin,n,mean_dv,mean_cost,variance,count":
        raise ValueError("bad column header in profile table")
    nb = table.shape
    for lineno, line in enumerate(lines[6:], start=7):
        parts = line.split(",")
        if len(parts) != 7:
            raise ValueError(f"line {lineno}: expected 7 fields")
        i, j, n = int(parts[0]), int(parts[1]), int(parts[2])
        if not (0 <= i < nb[0] and 0 <= j < nb[1]):
            raise ValueError(f"line {lineno}: cell ({i}, {j}) outside the bin grid")
        table.cells.setdefault((i, j), {})[n] = CellStats(float(parts[3]), float(parts[4]), float(parts[5]), int(parts[6]))
    return table


@dataclass(frozen=True)
class GreedyDecision:
    n: int | None
    ratio: float = 0.0
    expected_gain: float = 0.0
    expected_cost: float = 0.0
    cell: tuple | None = None

    @property
    def stop(self) -> bool:
        return self.n is None


def greedy_round(
    table: ProfileTable,
    size: float,
    value: float,
    remaining: float | None,
    delay_cost_rate: float | None = None,
) -> GreedyDecision:
    """Choose how many states to add next: the best expected gain per tick that fits.

    ``remaining=None`` means no deadline. With ``delay_cost_rate`` set, an
    option is worth taking only if its gain exceeds the delay cost it incurs.
    """
    if remaining is not None and remaining <= 0:
        return GreedyDecision(None)
    key, curve = table.lookup(size, value)
    options = []
    for n in table.n_grid:
        c = curve.get(n)
        if c is None or c.mean_cost <= 0:
            continue
        if remaining is not None and c.mean_cost > remaining:
            continue
        options.append((n, c))
    if not options:
        return GreedyDecision(None, cell=key)
    if delay_cost_rate is None:
        if max(c.mean_dv for _, c in options) <= 0:
            return GreedyDecision(None, cell=key)
        options = [(n, c) for n, c in options if c.mean_dv > 0]
    else:
        options = [(n, c) for n, c in options if c.mean_dv - delay_cost_rate * c.mean_cost > 0]
        if not options:
            return GreedyDecision(None, cell=key)
    best_n, best = options[0]
    for n, c in options[1:]:
        if c.mean_dv / c.mean_cost > best.mean_dv / best.mean_cost:
            best_n, best = n, c
    return GreedyDecision(best_n, best.mean_dv / best.mean_cost, best.mean_dv, best.mean_cost, key)


@dataclass(frozen=True)
class DeliberationBudget:
    total_ticks: int | None = None
    delay_cost_rate: float | None = None

    def __post_init__(self):
        if self.total_ticks is not None and self.total_ticks < 0:
            raise ValueError("total_ticks must be non-negative")


@dataclass(frozen=True)
class TraceRow:
    tick: int
    value: float
    mode: str
    round: int
    estimate: float = math.nan


@dataclass
class PrecursorRun:
    policy: Policy
    trace: list
    ticks: int
    phases: list = field(default_factory=list)  # (t_EA, t_PG) per completed round
    plan: Plan | None = None

    def held_at(self, tick: int) -> TraceRow:
        """Trace entry in force when interrupted at ``tick``."""
        row = self.trace[0]
        for r in self.trace:
            if r.tick <= tick:
                row = r
        return row


def _exact(automaton, reward, policy, start, config) -> float:
    return float(policy_evaluate(automaton, reward, policy, config).values[start])


def run_precursor(
    automaton: StochasticAutomaton,
    start: int,
    mode: str,
    budget: DeliberationBudget = DeliberationBudget(),
    table: ProfileTable | None = None,
    config: SolverConfig = SolverConfig(),
    costs: CostModel = CostModel(),
    reward=None,
    tolerance: float = 1e-9,
    reflex_action: int = STAY,
) -> PrecursorRun:
    """Deliberate before acting, under a tick deadline or a linear delay cost.

    The trace holds the exact full-automaton value of the policy held at each
    point; those evaluations are bookkeeping and are not charged.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    reward = RewardSpec(automaton.goal_states) if reward is None else reward
    deadline = budget.total_ticks
    reflex = Policy.reflex(reflex_action)
    trace = [TraceRow(0, _exact(automaton, reward, reflex, start, config), mode, 0, out_value(config.gamma))]
    if start in automaton.goal_states:
        trace[0] = TraceRow(0, 0.0, mode, 0, 0.0)
        return PrecursorRun(reflex, trace, 0)

    def fits(t):
        return deadline is None or t <= deadline

    if mode == GREEDY:
        if table is None:
            raise ValueError("GREEDY mode needs a profile table")
        return _run_greedy(automaton, start, budget, table, config, costs, reward, tolerance, reflex_action, trace, fits)

    n = automaton.n_states
    cost = costs.pg_round(n)
    rounds = iterate_policy(automaton, reward_vector(reward, n), reflex.as_array(n), config)
    next(rounds)
    ticks = 0
    held = reflex
    phases = []
    rnd = 0
    for actions, v, converged in rounds:
        if not fits(ticks + cost):
            break
        ticks += cost
        rnd += 1
        phases.append((0, cost))
        if mode == FLEXIBLE_FULL or converged:
            held = Policy.from_array(actions, reflex_action=reflex_action)
            trace.append(TraceRow(ticks, float(v[start]), mode, rnd, float(v[start])))
        if converged:
            break
    return PrecursorRun(held, trace, ticks, phases)


def _run_greedy(automaton, start, budget, table, config, costs, reward, tolerance, reflex_action, trace, fits):
    ctx = PlanningContext(automaton, config, costs, 0.0, reflex_action, start, tolerance)
    gamma = config.gamma
    deadline = budget.total_ticks
    unbounded = deadline is None and budget.delay_cost_rate is None
    path = find_path(automaton, start)
    ea = costs.findpath(path.expanded)
    plan, pg, _ = optimize(ctx, path.states, path.action_map())
    ticks = ea + pg
    reflex = Policy.reflex(reflex_action)
    if not fits(ticks):
        return PrecursorRun(reflex, trace, 0)
    held = plan.policy(reflex_action)
    phases = [(ea, pg)]
    trace.append(TraceRow(ticks, _exact(automaton, reward, held, start, config), GREEDY, 1, plan.estimate(start, gamma)))
    rnd = 1
    while True:
        remaining = None if deadline is None else deadline - ticks
        decision = greedy_round(table, len(plan.envelope), plan.estimate(start, gamma), remaining, budget.delay_cost_rate)
        n_add = decision.n
        if n_add is None:
            if not unbounded:
                break
            # no deadline and no delay cost: keep refining while anything is left to add
            n_add = max(table.n_grid)
        cands = extension_candidates(automaton, plan.envelope, held, start, tolerance)
        if not cands:
            break
        add = tuple(cands[:n_add])
        ea = costs.alteration(len(plan.envelope), len(add))
        new, pg, _ = optimize(ctx, plan.envelope + add, plan.actions)
        if not fits(ticks + ea + pg):
            break
        ticks += ea + pg
        rnd += 1
        plan = new
        held = plan.policy(reflex_action)
        phases.append((ea, pg))
        trace.append(TraceRow(ticks, _exact(automaton, reward, held, start, config), GREEDY, rnd,
                              plan.estimate(start, gamma)))
    return PrecursorRun(held, trace, ticks, phases, plan)


TRACE_COLUMNS = ("tick", "value", "mode", "round")


def dump_trace(trace) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow([r.tick, repr(r.value), r.mode, r.round])
    return out.getvalue()


def parse_trace(text: str) -> list[TraceRow]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != TRACE_COLUMNS:
        raise ValueError("bad trace header")
    return [TraceRow(int(t), float(v), m, int(k)) for t, v, m, k in rows[1:]]


@dataclass(frozen=True)
class SweepRow:
    task: int
    mode: str
    deadline: int | None
    value: float
    ticks: int


def sample_tasks(domain, count: int, seed: int) -> list[tuple[int, tuple]]:
    """``count`` (start state, goal location) pairs, each from its own seeded stream."""
    return [domain.sample_task(np.random.default_rng([seed, i, 3])) for i in range(count)]


def deadline_sweep(
    domain,
    tasks,
    deadlines,
    table: ProfileTable | None,
    modes=MODES,
    config: SolverConfig = SolverConfig(),
    costs: CostModel = CostModel(),
) -> list[SweepRow]:
    """Exact start value held by each mode at each deadline (``None`` = unbounded).

    The full-space modes are deterministic round sequences, so one unbounded
    run per task is read off at every deadline. GREEDY's choices depend on
    the remaining ticks and is rerun per deadline.
    """
    rows = []
    for i, (start, goal) in enumerate(tasks):
        auto = domain.task_automaton(goal)
        for mode in modes:
            if mode == GREEDY:
                for d in deadlines:
                    run = run_precursor(auto, start, mode, DeliberationBudget(d), table, config, costs)
                    rows.append(SweepRow(i, mode, d, run.trace[-1].value, run.ticks))
            else:
                run = run_precursor(auto, start, mode, DeliberationBudget(None), None, config, costs)
                for d in deadlines:
                    held = run.trace[-1] if d is None else run.held_at(d)
                    rows.append(SweepRow(i, mode, d, held.value, held.tick))
    return rows
