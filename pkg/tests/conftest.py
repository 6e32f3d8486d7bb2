import itertools

import numpy as np
import pytest

from delibsched.automaton import StochasticAutomaton
from delibsched.gridworld import GridDomain, bundled_map, random_map


def random_automaton(rng, n, m=3, max_succ=3, n_goals=1, absorbing_goals=True, self_loops=True):
    """Random sparse automaton with every action available in every state."""
    rng = np.random.default_rng(rng)
    goals = set(rng.choice(n, size=n_goals, replace=False).tolist()) if n_goals else set()
    trans = {}
    for s in range(n):
        for a in range(m):
            if absorbing_goals and s in goals:
                trans[(s, a)] = [(s, 1.0)]
                continue
            k = int(rng.integers(1, max_succ + 1))
            succ = rng.choice(n, size=min(k, n), replace=False)
            if not self_loops:
                succ = succ[succ != s] if len(succ) > 1 else succ
            w = rng.random(len(succ)) + 0.05
            w /= w.sum()
            trans[(s, a)] = list(zip(succ.tolist(), w.tolist()))
    return StochasticAutomaton.from_transitions(n, m, trans, goals)


def dense_model(automaton):
    """(n, m, n) transition array built directly from successor lists."""
    n, m = automaton.n_states, automaton.n_actions
    p = np.zeros((n, m, n))
    for s in range(n):
        for a in range(m):
            for y, q in automaton.successors(s, a):
                p[s, a, y] += q
    return p


def successive_approximation(p_pi, r, gamma, tol=1e-13, max_iter=10**6):
    """Plain fixed-policy iteration v <- r + gamma P v, run to a tight tolerance."""
    v = np.zeros(len(r))
    for _ in range(max_iter):
        nxt = r + gamma * p_pi @ v
        if np.max(np.abs(nxt - v)) < tol:
            return nxt
        v = nxt
    raise AssertionError("oracle did not converge")


def enumerate_trajectories(automaton, actions, start, n, absorbing=()):
    """Every length-n outcome sequence with its probability, by recursion."""
    absorbing = set(absorbing)
    out = [((start,), 1.0)]
    for _ in range(n):
        nxt = []
        for path, pr in out:
            x = path[-1]
            if x in absorbing:
                nxt.append((path + (x,), pr))
                continue
            for y, q in automaton.successors(x, int(actions[x])):
                nxt.append((path + (y,), pr * q))
        out = nxt
    return out


def fig1():
    """Six ids, states 1..5 in use: action 0 runs 1 -> 2 -> 4 most reliably; 4 is the goal."""
    t = {
        (0, 0): [(0, 1.0)], (0, 1): [(0, 1.0)],
        (1, 0): [(2, 0.9), (3, 0.1)], (1, 1): [(3, 1.0)],
        (2, 0): [(4, 0.8), (5, 0.2)], (2, 1): [(1, 1.0)],
        (3, 0): [(2, 0.7), (3, 0.3)], (3, 1): [(5, 1.0)],
        (4, 0): [(4, 1.0)], (4, 1): [(4, 1.0)],
        (5, 0): [(5, 0.5), (4, 0.5)], (5, 1): [(3, 1.0)],
    }
    return StochasticAutomaton.from_transitions(6, 2, t, {4})


def chain(n, p=1.0, goal=None):
    """States 0..n-1; action 0 advances with p and otherwise stays; action 1 stays."""
    t = {}
    for s in range(n):
        nxt = min(s + 1, n - 1)
        row = {nxt: p}
        row[s] = row.get(s, 0.0) + (1 - p)
        t[(s, 0)] = [(y, q) for y, q in row.items() if q > 0]
        t[(s, 1)] = [(s, 1.0)]
    if goal is not None:
        t[(goal, 0)] = [(goal, 1.0)]
    return StochasticAutomaton.from_transitions(n, 2, t, () if goal is None else {goal})


@pytest.fixture(scope="session")
def office_domain():
    return GridDomain(bundled_map("office166"), failure="slip")


@pytest.fixture(scope="session")
def floor_domain():
    return GridDomain(bundled_map("floor314"), failure="slip")


@pytest.fixture
def small_grid():
    return random_map(7, 6, np.random.default_rng(3), wall_fraction=0.2)


def all_subsets(items):
    for k in range(len(items) + 1):
        yield from itertools.combinations(items, k)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
