"""Restricted automata over an envelope of system states, and envelope alteration."""

from __future__ import annotations

import heapq
import math
import weakref
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .automaton import RewardSpec, StochasticAutomaton
from .mdp import OUT, Policy, action_array, policy_matrix, reward_vector

Envelope = tuple
"""Ordered tuple of system state ids; insertion order is kept for determinism."""


class EnvelopeError(ValueError):
    pass


class UnreachableGoalError(RuntimeError):
    def __init__(self, start: int, expanded: int):
        super().__init__(f"no goal state reachable from state {start}")
        self.start = start
        self.expanded = expanded


def out_value(gamma: float) -> float:
    """Value of an absorbing OUT state with reward -1 per step."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    return -1.0 / (1.0 - gamma)


def _gather_rows(automaton: StochasticAutomaton, rows: np.ndarray):
    """Entries of the given CSR rows: (row position, successor, probability)."""
    starts = automaton.indptr[rows]
    lengths = automaton.indptr[rows + 1] - starts
    total = int(lengths.sum())
    owner = np.repeat(np.arange(len(rows)), lengths)
    offsets = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    pos = np.repeat(starts, lengths) + offsets
    return owner, automaton.indices[pos], automaton.data[pos], lengths


@dataclass(frozen=True, eq=False)
class RestrictedAutomaton:
    """An envelope of the base automaton plus the OUT pseudo-state.

    ``model`` is a standalone automaton over local ids: envelope member ``i``
    has local id ``i`` and OUT has local id ``len(envelope)``.
    """

    base: StochasticAutomaton
    envelope: tuple
    p_back: float
    reentry: np.ndarray
    model: StochasticAutomaton
    labels: np.ndarray
    _local: dict = field(repr=False)

    @property
    def out_id(self) -> int:
        return len(self.envelope)

    @property
    def size(self) -> int:
        return len(self.envelope)

    def contains(self, state: int) -> bool:
        return state == OUT or state in self._local

    def index_of(self, state: int) -> int:
        if state == OUT:
            return self.out_id
        try:
            return self._local[state]
        except KeyError:
            raise EnvelopeError(f"state {state} is not in the envelope") from None

    def local_or_out(self, state: int) -> int:
        return self._local.get(state, self.out_id)

    def local_actions(self, policy) -> np.ndarray:
        env = np.asarray(self.envelope, dtype=np.int64)
        if isinstance(policy, Policy):
            acts = [policy(int(x)) for x in self.envelope] + [policy.reflex_action]
            return np.asarray(acts, dtype=np.int64)
        arr = np.asarray(policy, dtype=np.int64)
        if len(arr) == self.out_id + 1:
            return arr
        return np.concatenate([arr[env], [0]]).astype(np.int64)

    def reward_vector(self, reward=None) -> np.ndarray:
        if reward is None:
            reward = RewardSpec(self.base.goal_states)
        base_r = reward_vector(reward, self.base.n_states)
        return np.concatenate([base_r[np.asarray(self.envelope, dtype=np.int64)], [-1.0]])

    def system_policy(self, local_actions: np.ndarray, reflex_action: int = 0) -> Policy:
        return Policy({int(x): int(local_actions[i]) for i, x in enumerate(self.envelope)}, reflex_action)

    def system_values(self, local_values: np.ndarray) -> np.ndarray:
        """Per-system-state estimate: envelope values inside, the OUT value elsewhere."""
        v = np.full(self.base.n_states, float(local_values[self.out_id]))
        v[np.asarray(self.envelope, dtype=np.int64)] = local_values[: self.out_id]
        return v


def uniform_reentry(envelope: Sequence[int]) -> np.ndarray:
    return np.full(len(envelope), 1.0 / len(envelope))


def restrict(
    automaton: StochasticAutomaton,
    envelope: Sequence[int],
    p_back: float = 0.0,
    reentry: Sequence[float] | None = None,
) -> RestrictedAutomaton:
    """Project ``automaton`` onto ``envelope``; mass leaving the envelope goes to OUT.

    With ``p_back > 0`` every action taken in OUT returns to the envelope with
    total probability ``p_back`` spread by ``reentry`` (uniform by default).
    """
    env = tuple(int(x) for x in envelope)
    if not env:
        raise EnvelopeError("envelope must be non-empty")
    if not 0.0 <= p_back < 1.0:
        raise EnvelopeError(f"p_back must lie in [0, 1), got {p_back}")
    n, m = automaton.n_states, automaton.n_actions
    env_arr = np.asarray(env, dtype=np.int64)
    if env_arr.min() < 0 or env_arr.max() >= n:
        bad = next(x for x in env if not 0 <= x < n)
        raise EnvelopeError(f"envelope member {bad} is not a state of the base automaton")
    local_of = np.full(n, -1, dtype=np.int64)
    local_of[env_arr] = np.arange(len(env))
    if len(np.unique(env_arr)) != len(env):
        raise EnvelopeError("envelope lists a state twice")
    k = len(env)
    if reentry is None:
        reentry_arr = uniform_reentry(env)
    else:
        reentry_arr = np.asarray(reentry, dtype=float)
        if reentry_arr.shape != (k,) or np.any(reentry_arr < 0) or abs(reentry_arr.sum() - 1.0) > 1e-12:
            raise EnvelopeError("reentry must be a distribution over the envelope members")

    rows = (env_arr[:, None] * m + np.arange(m)).ravel()
    owner, succ, prob, lengths = _gather_rows(automaton, rows)
    local = local_of[succ]
    inside = local >= 0
    in_sum = np.bincount(owner[inside], weights=prob[inside], minlength=len(rows))
    leaves = np.bincount(owner[~inside], minlength=len(rows)) > 0
    out_mass = np.where(leaves, np.maximum(1.0 - in_sum, 0.0), 0.0)
    has_out = out_mass > 0

    out_rows_owner = np.flatnonzero(has_out)
    r_owner = np.concatenate([owner[inside], out_rows_owner])
    r_col = np.concatenate([local[inside], np.full(len(out_rows_owner), k)])
    r_val = np.concatenate([prob[inside], out_mass[has_out]])
    order = np.argsort(r_owner, kind="stable")
    r_owner, r_col, r_val = r_owner[order], r_col[order], r_val[order]

    # OUT rows, one per action
    if p_back > 0:
        back = p_back * reentry_arr
        nz = np.flatnonzero(back > 0)
        out_cols = np.concatenate([nz, [k]])
        out_vals = np.concatenate([back[nz], [1.0 - p_back]])
    else:
        out_cols = np.array([k], dtype=np.int64)
        out_vals = np.array([1.0])
    counts = np.bincount(r_owner, minlength=len(rows))
    counts = np.concatenate([counts, np.full(m, len(out_cols))])
    indptr = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.concatenate([r_col, np.tile(out_cols, m)]).astype(np.int64)
    data = np.concatenate([r_val, np.tile(out_vals, m)])
    goals = frozenset(int(local_of[g]) for g in automaton.goal_states if local_of[g] >= 0)
    model = StochasticAutomaton(k + 1, m, indptr, indices, data, goals)
    labels = np.concatenate([env_arr, [OUT]])
    return RestrictedAutomaton(
        automaton, env, float(p_back), reentry_arr, model, labels,
        {x: i for i, x in enumerate(env)},
    )


def _policy_rows(automaton, states: np.ndarray, policy) -> np.ndarray:
    if isinstance(policy, Policy):
        acts = np.fromiter((policy(int(x)) for x in states), dtype=np.int64, count=len(states))
    else:
        acts = np.asarray(policy, dtype=np.int64)[states]
    return states * automaton.n_actions + acts


def fringe(automaton: StochasticAutomaton, envelope: Sequence[int], policy) -> set[int]:
    """States outside the envelope reachable in one step of ``policy`` from inside it."""
    env = np.asarray(tuple(envelope), dtype=np.int64)
    if len(env) == 0:
        return set()
    member = np.zeros(automaton.n_states, dtype=bool)
    member[env] = True
    _, succ, prob, _ = _gather_rows(automaton, _policy_rows(automaton, env, policy))
    hit = succ[(prob > 0) & ~member[succ]]
    return set(np.unique(hit).tolist())


@dataclass(frozen=True)
class FallOutAnalysis:
    fringe: frozenset
    first_exit: dict
    residual: float
    sweeps: int = 0

    def ranked(self) -> list[int]:
        """Fringe states by first-exit probability, highest first; ties by state id."""
        return sorted(self.fringe, key=lambda y: (-self.first_exit.get(y, 0.0), y))


def falling_out_distribution(
    automaton: StochasticAutomaton,
    envelope: Sequence[int],
    policy,
    start: int,
    tolerance: float = 1e-9,
    max_sweeps: int = 20_000,
) -> FallOutAnalysis:
    """Distribution of the first state entered outside the envelope.

    Mass is pushed forward under ``policy`` with fringe and goal states
    absorbing, until the transient mass left inside drops below
    ``tolerance``, stops changing, or ``max_sweeps`` is hit.
    """
    env = tuple(int(x) for x in envelope)
    local = {x: i for i, x in enumerate(env)}
    if start not in local:
        raise EnvelopeError(f"start state {start} is outside the envelope")
    k = len(env)
    env_arr = np.asarray(env, dtype=np.int64)
    owner, succ, prob, _ = _gather_rows(automaton, _policy_rows(automaton, env_arr, policy))
    positive = prob > 0
    owner, succ, prob = owner[positive], succ[positive], prob[positive]
    local_of = np.full(automaton.n_states, -1, dtype=np.int64)
    local_of[env_arr] = np.arange(k)
    loc = local_of[succ]
    outside = loc < 0
    fr = np.unique(succ[outside])
    fr_col = np.searchsorted(fr, succ)
    col = np.where(loc >= 0, loc, k + fr_col)
    goal = np.zeros(k, dtype=bool)
    for g in automaton.goal_states:
        if g in local:
            goal[local[g]] = True
    keep = ~goal[owner]
    rows = np.concatenate([owner[keep], np.flatnonzero(goal)])
    cols = np.concatenate([col[keep], np.flatnonzero(goal)])
    vals = np.concatenate([prob[keep], np.ones(int(goal.sum()))])
    t = sp.csr_matrix((vals, (cols, rows)), shape=(k + len(fr), k))

    mass = np.zeros(k)
    mass[local[start]] = 1.0
    exits = np.zeros(len(fr))
    transient = ~goal
    sweeps = 0
    while sweeps < max_sweeps:
        if mass[transient].sum() < tolerance:
            break
        nxt = t @ mass
        sweeps += 1
        exits += nxt[k:]
        change = np.abs(nxt[:k] - mass).sum()
        mass = nxt[:k]
        if change < tolerance * 1e-3:
            break
    first_exit = {int(y): float(p) for y, p in zip(fr, exits) if p > 0}
    return FallOutAnalysis(frozenset(fr.tolist()), first_exit, float(mass.sum()), sweeps)


_EDGE_CACHE: "weakref.WeakKeyDictionary[StochasticAutomaton, list]" = weakref.WeakKeyDictionary()


def _edge_graph(automaton: StochasticAutomaton) -> list:
    """Per state: (successor, -log p, action) for the most reliable action to each successor."""
    cached = _EDGE_CACHE.get(automaton)
    if cached is not None:
        return cached
    n, m = automaton.n_states, automaton.n_actions
    rows = np.arange(n * m)
    owner, succ, prob, _ = _gather_rows(automaton, rows)
    src = owner // m
    act = owner % m
    ok = (succ != src) & (prob > 0)
    src, succ, prob, act = src[ok], succ[ok], prob[ok], act[ok]
    order = np.lexsort((act, -prob, succ, src))
    src, succ, prob, act = src[order], succ[order], prob[order], act[order]
    first = np.ones(len(src), dtype=bool)
    first[1:] = (src[1:] != src[:-1]) | (succ[1:] != succ[:-1])
    src, succ, prob, act = src[first], succ[first], prob[first], act[first]
    graph: list = [[] for _ in range(n)]
    for s, y, p, a in zip(src.tolist(), succ.tolist(), prob.tolist(), act.tolist()):
        graph[s].append((y, -math.log(p), a))
    _EDGE_CACHE[automaton] = graph
    return graph


@dataclass(frozen=True)
class PathResult:
    states: tuple
    actions: tuple
    expanded: int
    probability: float

    def action_map(self) -> dict[int, int]:
        return dict(zip(self.states[:-1], self.actions))


def find_path(automaton: StochasticAutomaton, start: int, goal_states: Iterable[int] | None = None) -> PathResult:
    """Most reliable state sequence from ``start`` to a goal.

    Each edge x -> y is weighted by -log of the best single-action probability
    of reaching y from x; the least-weight path maximizes the product.
    """
    goals = automaton.goal_states if goal_states is None else frozenset(goal_states)
    if not 0 <= start < automaton.n_states:
        raise ValueError(f"start state {start} out of range")
    if start in goals:
        return PathResult((start,), (), 1, 1.0)
    graph = _edge_graph(automaton)
    dist = {start: 0.0}
    prev: dict[int, tuple[int, int]] = {}
    done: set[int] = set()
    heap = [(0.0, start)]
    expanded = 0
    while heap:
        d, x = heapq.heappop(heap)
        if x in done:
            continue
        done.add(x)
        expanded += 1
        if x in goals:
            states, actions = [x], []
            while x != start:
                x, a = prev[x]
                states.append(x)
                actions.append(a)
            states.reverse()
            actions.reverse()
            return PathResult(tuple(states), tuple(actions), expanded, math.exp(-d))
        for y, w, a in graph[x]:
            nd = d + w
            if y not in done and nd < dist.get(y, math.inf):
                dist[y] = nd
                prev[y] = (x, a)
                heapq.heappush(heap, (nd, y))
    raise UnreachableGoalError(start, expanded)


@dataclass(frozen=True)
class Alteration:
    envelope: tuple
    changed: tuple
    saturated: bool = False
    analysis_size: int = 0


def extend_robustify(
    automaton: StochasticAutomaton,
    envelope: Sequence[int],
    policy,
    start: int,
    n: int,
    tolerance: float = 1e-9,
) -> Alteration:
    """Add the ``n`` most likely falling-out states (fewer if the fringe is smaller)."""
    if n < 1:
        raise ValueError("N must be at least 1")
    env = tuple(envelope)
    analysis = falling_out_distribution(automaton, env, policy, start, tolerance)
    ranked = analysis.ranked()
    added = tuple(ranked[:n])
    return Alteration(env + added, added, saturated=len(ranked) < n, analysis_size=len(env))


def occupancy(automaton: StochasticAutomaton, envelope: Sequence[int], policy, start: int, gamma: float) -> np.ndarray:
    """Expected discounted visits to each envelope state from ``start``; mass leaving is dropped."""
    env = tuple(envelope)
    r = restrict(automaton, env)
    acts = r.local_actions(policy)
    p = policy_matrix(r.model, acts)[: r.out_id, : r.out_id]
    a = (sp.identity(r.out_id, format="csc") - gamma * p.T.tocsc()).tocsc()
    e = np.zeros(r.out_id)
    e[r.index_of(start)] = 1.0
    if r.out_id == 1:
        return e / (1.0 - gamma * p.toarray()[0, 0])
    return spla.spsolve(a, e)


def prune(
    automaton: StochasticAutomaton,
    envelope: Sequence[int],
    policy,
    values,
    current_state: int,
    n: int,
    gamma: float = 0.95,
    protected: Iterable[int] = (),
) -> Alteration:
    """Among states valued below the current state, drop the ``n`` least visited.

    ``values`` maps each envelope state to its estimated value. The current
    state, goal states, and ``protected`` states are never removed.
    """
    env = tuple(envelope)
    if current_state not in env:
        raise EnvelopeError(f"current state {current_state} is outside the envelope")
    keep = set(protected) | set(automaton.goal_states) | {current_state}
    v_cur = values[current_state]
    candidates = [x for x in env if x not in keep and values[x] < v_cur]
    if not candidates or n < 1:
        return Alteration(env, (), analysis_size=len(env))
    occ = occupancy(automaton, env, policy, current_state, gamma)
    idx = {x: i for i, x in enumerate(env)}
    ranked = sorted(candidates, key=lambda x: (occ[idx[x]], x))
    removed = tuple(ranked[:n])
    gone = set(removed)
    return Alteration(tuple(x for x in env if x not in gone), removed, analysis_size=len(env))


def frontier(automaton: StochasticAutomaton, envelope: Sequence[int]) -> list[int]:
    """States outside the envelope reachable in one step under any action, by id."""
    env = np.asarray(tuple(envelope), dtype=np.int64)
    member = np.zeros(automaton.n_states, dtype=bool)
    member[env] = True
    rows = (env[:, None] * automaton.n_actions + np.arange(automaton.n_actions)).ravel()
    _, succ, prob, _ = _gather_rows(automaton, rows)
    return np.unique(succ[(prob > 0) & ~member[succ]]).tolist()


def extension_candidates(
    automaton: StochasticAutomaton,
    envelope: Sequence[int],
    policy,
    start: int,
    tolerance: float = 1e-9,
    include_frontier: bool = True,
) -> list[int]:
    """Ranked states for envelope extension.

    Falling-out states come first by first-exit probability, then the rest
    of the fringe, then (optionally) states one step away under any action.
    """
    ranked = falling_out_distribution(automaton, envelope, policy, start, tolerance).ranked()
    if not include_frontier:
        return ranked
    seen = set(ranked)
    return ranked + [y for y in frontier(automaton, envelope) if y not in seen]
