"""Sparse stochastic automata and the goal-of-achievement reward."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class StochasticAutomaton:
    """Finite automaton with sparse transitions stored row-wise per (state, action).

    Row ``s * n_actions + a`` of the CSR arrays holds the successor list of
    action ``a`` taken in state ``s``. An empty row means the action is not
    available in that state.
    """

    n_states: int
    n_actions: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    goal_states: frozenset = field(default_factory=frozenset)

    @classmethod
    def from_transitions(
        cls,
        n_states: int,
        n_actions: int,
        transitions: Mapping[tuple[int, int], Sequence[tuple[int, float]]],
        goal_states: Iterable[int] = (),
    ) -> "StochasticAutomaton":
        rows: list[list[tuple[int, float]]] = [[] for _ in range(n_states * n_actions)]
        for (s, a), succ in transitions.items():
            if not (0 <= s < n_states and 0 <= a < n_actions):
                raise ValueError(f"transition key ({s}, {a}) out of range")
            rows[s * n_actions + a] = sorted((int(y), float(p)) for y, p in succ)
        return cls._from_rows(n_states, n_actions, rows, goal_states)

    @classmethod
    def _from_rows(cls, n_states, n_actions, rows, goal_states=()):
        lengths = np.fromiter((len(r) for r in rows), dtype=np.int64, count=len(rows))
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        indices = np.fromiter((y for r in rows for y, _ in r), dtype=np.int64, count=int(indptr[-1]))
        data = np.fromiter((p for r in rows for _, p in r), dtype=float, count=int(indptr[-1]))
        return cls(n_states, n_actions, indptr, indices, data, frozenset(int(g) for g in goal_states))

    def successors(self, state: int, action: int) -> list[tuple[int, float]]:
        row = state * self.n_actions + action
        lo, hi = self.indptr[row], self.indptr[row + 1]
        return list(zip(self.indices[lo:hi].tolist(), self.data[lo:hi].tolist()))

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """Transition matrix of shape (n_states * n_actions, n_states)."""
        return sp.csr_matrix(
            (self.data, self.indices, self.indptr),
            shape=(self.n_states * self.n_actions, self.n_states),
        )

    @cached_property
    def available(self) -> np.ndarray:
        return (np.diff(self.indptr) > 0).reshape(self.n_states, self.n_actions)

    @cached_property
    def goal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        if self.goal_states:
            mask[sorted(self.goal_states)] = True
        return mask

    def with_absorbing(self, states: Iterable[int]) -> "StochasticAutomaton":
        """Copy in which every action in ``states`` self-transitions with probability 1."""
        absorbing = set(int(s) for s in states)
        rows = []
        for s in range(self.n_states):
            for a in range(self.n_actions):
                rows.append([(s, 1.0)] if s in absorbing else self.successors(s, a))
        return StochasticAutomaton._from_rows(self.n_states, self.n_actions, rows, self.goal_states)

    def with_goals(self, goal_states: Iterable[int]) -> "StochasticAutomaton":
        return StochasticAutomaton(
            self.n_states, self.n_actions, self.indptr, self.indices, self.data,
            frozenset(int(g) for g in goal_states),
        )


@dataclass(frozen=True)
class RewardSpec:
    """Reward 0 on goal states and -1 everywhere else."""

    goal_states: frozenset

    def __call__(self, state: int) -> float:
        return 0.0 if state in self.goal_states else -1.0

    def vector(self, n_states: int) -> np.ndarray:
        r = -np.ones(n_states)
        if self.goal_states:
            r[[g for g in self.goal_states if g < n_states]] = 0.0
        return r

    @classmethod
    def for_automaton(cls, automaton: StochasticAutomaton) -> "RewardSpec":
        return cls(frozenset(automaton.goal_states))


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    state: int | None = None
    action: int | None = None

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


def validate_automaton(automaton: StochasticAutomaton, tol: float = ROW_SUM_TOL) -> list[Violation]:
    """Return every broken invariant; an empty list means the automaton is well formed."""
    out: list[Violation] = []
    n, m = automaton.n_states, automaton.n_actions
    if len(automaton.indptr) != n * m + 1:
        return [Violation("shape", f"expected {n * m + 1} row pointers, found {len(automaton.indptr)}")]
    for s in range(n):
        for a in range(m):
            succ = automaton.successors(s, a)
            if not succ:
                continue
            seen: set[int] = set()
            for y, p in succ:
                if not 0 <= y < n:
                    out.append(Violation("dangling-index", f"state {s} action {a} -> successor {y} not in 0..{n - 1}", s, a))
                if p < 0:
                    out.append(Violation("negative-mass", f"state {s} action {a} -> {y} has probability {p!r}", s, a))
                if y in seen:
                    out.append(Violation("duplicate-successor", f"state {s} action {a} lists successor {y} twice", s, a))
                seen.add(y)
            total = math.fsum(p for _, p in succ)
            if abs(total - 1.0) > tol:
                out.append(Violation("row-sum", f"state {s} action {a} sums to {total!r}", s, a))
    for g in sorted(automaton.goal_states):
        if not 0 <= g < n:
            out.append(Violation("goal-range", f"goal state {g} not in 0..{n - 1}"))
    return out


AUTOMATON_HEADER = "automaton v1"


def dump_automaton(automaton: StochasticAutomaton) -> str:
    lines = [AUTOMATON_HEADER, f"{automaton.n_states} {automaton.n_actions}"]
    lines.append("goals " + " ".join(str(g) for g in sorted(automaton.goal_states)))
    for s in range(automaton.n_states):
        for a in range(automaton.n_actions):
            for y, p in automaton.successors(s, a):
                lines.append(f"{s} {a} {y} {p!r}")
    return "\n".join(lines) + "\n"


def parse_automaton(text: str) -> StochasticAutomaton:
    """Parse the ``automaton v1`` text form without checking invariants."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != AUTOMATON_HEADER:
        raise ValueError(f"missing '{AUTOMATON_HEADER}' header")
    try:
        n, m = (int(v) for v in lines[1].split())
        head, *goal_tokens = lines[2].split()
        if head != "goals":
            raise ValueError("third line must start with 'goals'")
        goals = [int(g) for g in goal_tokens]
        trans: dict[tuple[int, int], list[tuple[int, float]]] = {}
        for lineno, line in enumerate(lines[3:], start=4):
            if not line.strip():
                continue
            s, a, y, p = line.split()
            trans.setdefault((int(s), int(a)), []).append((int(y), float(p)))
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed automaton file: {exc}") from exc
    rows: list[list[tuple[int, float]]] = [[] for _ in range(n * m)]
    for (s, a), succ in trans.items():
        if not (0 <= s < n and 0 <= a < m):
            raise ValueError(f"transition key ({s}, {a}) out of range")
        rows[s * m + a] = succ
    return StochasticAutomaton._from_rows(n, m, rows, goals)
