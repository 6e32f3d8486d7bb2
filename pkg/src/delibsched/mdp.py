"""Dynamic-programming primitives over sparse stochastic automata."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .automaton import RewardSpec, StochasticAutomaton

OUT = -1
"""Label used for the OUT pseudo-state wherever states are reported by system id."""

_DENSE_LIMIT = 96


class EvaluationError(RuntimeError):
    """Successive approximation did not reach the requested tolerance."""

    def __init__(self, message: str, values: np.ndarray, residual: float):
        super().__init__(message)
        self.values = values
        self.residual = residual


class NoActionError(ValueError):
    def __init__(self, state: int):
        super().__init__(f"state {state} has no available action")
        self.state = state


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 0.95
    eval_tolerance: float = 1e-9
    max_eval_sweeps: int = 200_000
    tie_break: str = "lowest-id"
    # "direct" solves the linear system; "sweeps" uses successive approximation
    method: str = "direct"
    tie_tolerance: float = 1e-10

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.eval_tolerance <= 0:
            raise ValueError("eval_tolerance must be positive")
        if self.max_eval_sweeps < 1:
            raise ValueError("max_eval_sweeps must be positive")
        if self.tie_break != "lowest-id":
            raise ValueError(f"unknown tie-break rule {self.tie_break!r}")
        if self.method not in ("direct", "sweeps"):
            raise ValueError(f"unknown evaluation method {self.method!r}")


@dataclass(frozen=True, eq=False)
class Policy:
    """Actions on a declared domain plus a reflex action for every other state."""

    envelope_actions: Mapping[int, int]
    reflex_action: int = 0

    def __call__(self, state: int) -> int:
        return self.envelope_actions.get(state, self.reflex_action)

    @property
    def domain(self) -> frozenset:
        return frozenset(self.envelope_actions)

    def as_array(self, n_states: int) -> np.ndarray:
        arr = np.full(n_states, self.reflex_action, dtype=np.int64)
        if self.envelope_actions:
            keys = np.fromiter(self.envelope_actions.keys(), dtype=np.int64)
            vals = np.fromiter(self.envelope_actions.values(), dtype=np.int64)
            inside = (keys >= 0) & (keys < n_states)
            arr[keys[inside]] = vals[inside]
        return arr

    @classmethod
    def from_array(cls, actions, domain=None, reflex_action: int = 0) -> "Policy":
        actions = np.asarray(actions)
        states = range(len(actions)) if domain is None else domain
        return cls({int(s): int(actions[s]) for s in states}, reflex_action)

    @classmethod
    def reflex(cls, reflex_action: int = 0) -> "Policy":
        return cls({}, reflex_action)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Policy):
            return NotImplemented
        return self.reflex_action == other.reflex_action and dict(self.envelope_actions) == dict(other.envelope_actions)

    def __repr__(self) -> str:
        return f"Policy(|domain|={len(self.envelope_actions)}, reflex={self.reflex_action})"


@dataclass(frozen=True, eq=False)
class ValueFunction:
    values: np.ndarray
    provenance: str = "exact-full"

    def __getitem__(self, state: int) -> float:
        return float(self.values[state])

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class TransitionDistribution:
    mass: dict
    horizon: int

    def __getitem__(self, state) -> float:
        return self.mass.get(state, 0.0)

    def total(self) -> float:
        return float(sum(self.mass.values()))


@dataclass
class PIResult:
    policy: Policy
    values: ValueFunction
    rounds: int
    converged: bool
    ticks: int = 0
    history: list = field(default_factory=list)


def reward_vector(reward, n_states: int) -> np.ndarray:
    if isinstance(reward, RewardSpec):
        return reward.vector(n_states)
    r = np.asarray(reward, dtype=float)
    if r.shape != (n_states,):
        raise ValueError(f"reward vector has shape {r.shape}, expected ({n_states},)")
    return r


def action_array(policy, n_states: int) -> np.ndarray:
    if isinstance(policy, Policy):
        return policy.as_array(n_states)
    arr = np.asarray(policy, dtype=np.int64)
    if arr.shape != (n_states,):
        raise ValueError(f"policy array has shape {arr.shape}, expected ({n_states},)")
    return arr


def policy_matrix(automaton: StochasticAutomaton, actions: np.ndarray) -> sp.csr_matrix:
    """Rows of the transition matrix selected by a complete action array."""
    if np.any((actions < 0) | (actions >= automaton.n_actions)):
        raise ValueError("policy selects an action id outside the action set")
    rows = np.arange(automaton.n_states) * automaton.n_actions + actions
    lengths = automaton.indptr[rows + 1] - automaton.indptr[rows]
    if np.any(lengths == 0):
        s = int(np.flatnonzero(lengths == 0)[0])
        raise ValueError(f"policy selects unavailable action {int(actions[s])} in state {s}")
    return automaton.matrix[rows]


def _solve(p_pi: sp.csr_matrix, r: np.ndarray, gamma: float) -> np.ndarray:
    n = len(r)
    if n <= _DENSE_LIMIT:
        a = np.eye(n) - gamma * p_pi.toarray()
        return np.linalg.solve(a, r)
    a = (sp.identity(n, format="csc") - gamma * p_pi.tocsc()).tocsc()
    return spla.spsolve(a, r)


def _sweep(p_pi, r, gamma, v, tol, max_sweeps):
    residual = np.inf
    for _ in range(max_sweeps):
        nxt = r + gamma * (p_pi @ v)
        residual = float(np.max(np.abs(nxt - v))) if len(v) else 0.0
        v = nxt
        if residual <= tol:
            return v, residual
    raise EvaluationError(
        f"policy evaluation did not converge in {max_sweeps} sweeps (residual {residual:.3e})", v, residual
    )


def evaluate_actions(automaton, r, actions, config: SolverConfig, start=None) -> np.ndarray:
    p_pi = policy_matrix(automaton, actions)
    gamma, tol = config.gamma, config.eval_tolerance
    if config.method == "sweeps":
        v0 = np.zeros(len(r)) if start is None else np.asarray(start, dtype=float)
        return _sweep(p_pi, r, gamma, v0, tol, config.max_eval_sweeps)[0]
    v = _solve(p_pi, r, gamma)
    residual = float(np.max(np.abs(r + gamma * (p_pi @ v) - v))) if len(v) else 0.0
    if residual > tol:
        v = _sweep(p_pi, r, gamma, v, tol, config.max_eval_sweeps)[0]
    return v


def policy_evaluate(automaton: StochasticAutomaton, reward, policy, config: SolverConfig = SolverConfig()) -> ValueFunction:
    """Value of a fixed complete policy (reflex fills states outside its domain)."""
    n = automaton.n_states
    r = reward_vector(reward, n)
    return ValueFunction(evaluate_actions(automaton, r, action_array(policy, n), config), "exact-full")


def q_values(automaton: StochasticAutomaton, r: np.ndarray, values: np.ndarray, gamma: float) -> np.ndarray:
    q = r[:, None] + gamma * (automaton.matrix @ values).reshape(automaton.n_states, automaton.n_actions)
    q[~automaton.available] = -np.inf
    return q


def greedy_actions(q: np.ndarray, tie_tolerance: float, current: np.ndarray | None = None) -> np.ndarray:
    """Lowest-id action within ``tie_tolerance`` of the best; ``current`` is kept when it is such an action."""
    no_action = ~np.isfinite(q).any(axis=1)
    if np.any(no_action):
        raise NoActionError(int(np.flatnonzero(no_action)[0]))
    best = q.max(axis=1)
    near = q >= (best - tie_tolerance)[:, None]
    choice = near.argmax(axis=1)
    if current is not None:
        keep = near[np.arange(len(current)), current]
        choice = np.where(keep, current, choice)
    return choice.astype(np.int64)


def policy_improve(automaton: StochasticAutomaton, reward, values, config: SolverConfig = SolverConfig()) -> Policy:
    """Greedy policy with respect to ``values``; ties go to the lowest action id."""
    v = values.values if isinstance(values, ValueFunction) else np.asarray(values, dtype=float)
    r = reward_vector(reward, automaton.n_states)
    q = q_values(automaton, r, v, config.gamma)
    return Policy.from_array(greedy_actions(q, config.tie_tolerance))


def iterate_policy(automaton, r, actions, config: SolverConfig) -> Iterator[tuple[np.ndarray, np.ndarray, bool]]:
    """Yield ``(actions, values, converged)``: first the evaluated start policy, then one item per round."""
    actions = np.asarray(actions, dtype=np.int64).copy()
    v = evaluate_actions(automaton, r, actions, config)
    yield actions, v, False
    while True:
        q = q_values(automaton, r, v, config.gamma)
        new = greedy_actions(q, config.tie_tolerance, current=actions)
        if np.array_equal(new, actions):
            yield actions, v, True
            return
        actions = new
        v = evaluate_actions(automaton, r, actions, config, start=v)
        yield actions, v, False


def policy_iteration(
    automaton: StochasticAutomaton,
    reward,
    initial,
    config: SolverConfig = SolverConfig(),
    budget: int | None = None,
    round_cost: int | None = None,
    keep_history: bool = False,
) -> PIResult:
    """Interruptible policy iteration.

    Each round (improvement plus evaluation of the new policy) is charged
    ``round_cost`` ticks, by default ``n_states ** 3``. A round is started only
    if it fits in the remaining ``budget``; ``budget=None`` runs until the
    improvement step leaves every action unchanged.
    """
    n = automaton.n_states
    r = reward_vector(reward, n)
    cost = n ** 3 if round_cost is None else int(round_cost)
    rounds = iterate_policy(automaton, r, action_array(initial, n), config)
    actions, v, converged = next(rounds)
    history = [(0, v)] if keep_history else []
    ticks = done = 0
    while not converged:
        if budget is not None and ticks + cost > budget:
            break
        actions, v, converged = next(rounds)
        ticks += cost
        done += 1
        if keep_history:
            history.append((ticks, v))
    return PIResult(Policy.from_array(actions), ValueFunction(v, "exact-full"), done, converged, ticks, history)


def value_iteration(automaton: StochasticAutomaton, reward, config: SolverConfig = SolverConfig()) -> ValueFunction:
    """Bellman-optimal values to within ``eval_tolerance`` in sup norm."""
    n = automaton.n_states
    r = reward_vector(reward, n)
    gamma = config.gamma
    stop = config.eval_tolerance * (1 - gamma) / gamma if gamma > 0 else np.inf
    v = np.zeros(n)
    change = np.inf
    for _ in range(config.max_eval_sweeps):
        q = q_values(automaton, r, v, gamma)
        if n and not np.all(np.isfinite(q).any(axis=1)):
            raise NoActionError(int(np.flatnonzero(~np.isfinite(q).any(axis=1))[0]))
        nxt = q.max(axis=1)
        change = float(np.max(np.abs(nxt - v))) if n else 0.0
        v = nxt
        if change <= stop:
            return ValueFunction(v, "exact-full")
    raise EvaluationError(f"value iteration did not converge (last change {change:.3e})", v, change)


def push_forward(p_pi: sp.csr_matrix, mass: np.ndarray, steps: int) -> np.ndarray:
    pt = p_pi.T.tocsr()
    for _ in range(steps):
        mass = pt @ mass
    return mass


def absorbing_policy_matrix(automaton, actions, absorbing=None) -> sp.csr_matrix:
    p_pi = policy_matrix(automaton, actions)
    if absorbing:
        idx = np.array(sorted(absorbing), dtype=np.int64)
        keep = np.ones(automaton.n_states)
        keep[idx] = 0.0
        p_pi = sp.diags(keep) @ p_pi + sp.csr_matrix(
            (np.ones(len(idx)), (idx, idx)), shape=p_pi.shape
        )
        p_pi = p_pi.tocsr()
    return p_pi


def n_step_distribution(model, policy, start: int, n: int, absorbing=None) -> TransitionDistribution:
    """Exact distribution after ``n`` steps of ``policy`` from ``start``.

    ``model`` is a system automaton or a restricted automaton; for the latter,
    states are reported by system id with ``OUT`` for the pseudo-state.
    ``absorbing`` states are frozen once entered.
    """
    if n < 0:
        raise ValueError("horizon must be non-negative")
    inner = getattr(model, "model", None)
    if inner is not None:
        auto, labels = inner, model.labels
        actions = model.local_actions(policy)
        i0 = model.index_of(start)
        absorbing_local = None if absorbing is None else {model.index_of(x) for x in absorbing if model.contains(x)}
    else:
        auto, labels = model, None
        actions = action_array(policy, model.n_states)
        if not 0 <= start < model.n_states:
            raise ValueError(f"start state {start} out of range")
        i0 = start
        absorbing_local = absorbing
    mass = np.zeros(auto.n_states)
    mass[i0] = 1.0
    mass = push_forward(absorbing_policy_matrix(auto, actions, absorbing_local), mass, n)
    nz = np.flatnonzero(mass)
    if labels is None:
        out = {int(i): float(mass[i]) for i in nz}
    else:
        out = {int(labels[i]): float(mass[i]) for i in nz}
    return TransitionDistribution(out, n)


def discounted_step_cost(k: int, gamma: float, limit: bool = False) -> float:
    """Discounted sum of ``k`` per-step rewards of -1."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if gamma == 1.0:
        if not limit:
            raise ValueError("gamma = 1 requires limit=True")
        return -float(k)
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    return -(1.0 - gamma ** k) / (1.0 - gamma)
