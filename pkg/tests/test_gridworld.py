import math

import numpy as np
import pytest
from scipy import stats

from delibsched.automaton import validate_automaton
from delibsched.gridworld import (
    FORWARD,
    STAY,
    TURN_ABOUT,
    TURN_LEFT,
    TURN_RIGHT,
    GridDomain,
    MapFormatError,
    RobotState,
    admissible_pairs,
    build_automaton,
    bundled_map,
    load_map,
    make_task,
    manhattan_distance,
    random_map,
    random_task,
)
from delibsched.mdp import Policy, SolverConfig, n_step_distribution, policy_iteration

TINY = "3 3\n...\n.#.\n...\n"


def test_tiny_map_counts():
    g = load_map(TINY)
    assert len(g.locations) == 8
    assert g.n_states == 32


def test_headerless_map():
    assert load_map("...\n.#.\n...\n").n_states == 32


def test_sink_cell_parsed():
    g = load_map("3 1\n.O.\n")
    assert g.is_sink((0, 1))
    assert g.free_locations() == [(0, 0), (0, 2)]


def test_bundled_office_size():
    assert bundled_map("office166").n_states == 664
    assert bundled_map("floor314").n_states == 1256


@pytest.mark.parametrize("text", ["", "3 3\n...\n..\n...\n", "3 2\n...\n...\n...\n", "2 1\n.x\n", "2 1\n##\n"])
def test_bad_maps_raise(text):
    with pytest.raises(MapFormatError):
        load_map(text)


def test_map_round_trip_through_dumps(small_grid):
    again = load_map(small_grid.dumps())
    assert again.cells == small_grid.cells
    assert again.dumps() == small_grid.dumps()


def test_encode_decode_round_trip(small_grid):
    for s in range(small_grid.n_states):
        assert small_grid.encode(small_grid.decode(s)) == s
    rs = small_grid.decode(5)
    assert RobotState.parse(str(rs)) == rs


def test_encode_wall_raises():
    g = load_map(TINY)
    with pytest.raises(ValueError):
        g.encode(RobotState(1, 1, 0))


def test_stay_is_deterministic():
    g = load_map(TINY)
    a = build_automaton(g)
    for s in range(g.n_states):
        assert a.successors(s, STAY) == [(s, 1.0)]


def test_forward_into_wall_is_noop():
    g = load_map(TINY)
    a = build_automaton(g)
    s = g.state_id((0, 1), 2)  # facing south into the centre wall
    assert a.successors(s, FORWARD) == [(s, 1.0)]
    s = g.state_id((0, 0), 0)  # facing north off the map
    assert a.successors(s, FORWARD) == [(s, 1.0)]


def test_forward_open_success_split():
    g = load_map(TINY)
    a = build_automaton(g)
    s = g.state_id((0, 0), 1)
    row = dict(a.successors(s, FORWARD))
    assert row == {s: pytest.approx(0.2), g.state_id((0, 1), 1): pytest.approx(0.8)}


@pytest.mark.parametrize("action,delta", [(TURN_RIGHT, 1), (TURN_LEFT, 3), (TURN_ABOUT, 2)])
def test_turns(action, delta):
    g = load_map(TINY)
    a = build_automaton(g)
    s = g.state_id((2, 2), 0)
    row = dict(a.successors(s, action))
    assert row[g.state_id((2, 2), delta)] == pytest.approx(0.8)
    assert row[s] == pytest.approx(0.2)


def test_slip_forward_row():
    g = load_map("3 3\n...\n...\n...\n")
    a = build_automaton(g, failure="slip")
    s = g.state_id((1, 1), 0)
    row = dict(a.successors(s, FORWARD))
    assert row[g.state_id((0, 1), 0)] == pytest.approx(0.8)
    assert row[s] == pytest.approx(0.1)
    assert row[g.state_id((1, 2), 0)] == pytest.approx(0.05)
    assert row[g.state_id((1, 0), 0)] == pytest.approx(0.05)


def test_slip_turn_rows():
    g = load_map("1 1\n.\n")
    a = build_automaton(g, failure="slip")
    right = dict(a.successors(0, TURN_RIGHT))
    assert right == {0: pytest.approx(0.1), 1: pytest.approx(0.8), 2: pytest.approx(0.1)}
    about = dict(a.successors(0, TURN_ABOUT))
    assert about == {0: pytest.approx(0.1), 1: pytest.approx(0.05), 2: pytest.approx(0.8), 3: pytest.approx(0.05)}


@pytest.mark.parametrize("failure", ["stay", "slip"])
def test_all_rows_sum_to_one(failure):
    for name in ("tiny", "office166"):
        a = build_automaton(bundled_map(name), failure=failure)
        assert validate_automaton(a, tol=1e-12) == []


def test_bad_parameters():
    g = load_map(TINY)
    with pytest.raises(ValueError):
        build_automaton(g, p_success=0.0)
    with pytest.raises(ValueError):
        build_automaton(g, failure="bounce")


def test_goal_has_four_absorbing_states():
    g = load_map(TINY)
    task, reward = make_task(build_automaton(g), g, (0, 0))
    assert task.goal_states == frozenset(range(4))
    for s in task.goal_states:
        for act in range(5):
            assert task.successors(s, act) == [(s, 1.0)]
    with pytest.raises(ValueError):
        make_task(build_automaton(g), g, (1, 1))


def test_goal_equals_start_has_zero_value():
    g = load_map(TINY)
    task, reward = make_task(build_automaton(g), g, (0, 0))
    res = policy_iteration(task, reward, Policy.reflex(STAY))
    assert res.values[g.state_id((0, 0), 2)] == 0.0


def test_value_next_to_goal():
    g = load_map(TINY)
    task, reward = make_task(build_automaton(g), g, (0, 1))
    res = policy_iteration(task, reward, Policy.reflex(STAY), SolverConfig(gamma=0.95))
    s = g.state_id((0, 0), 1)
    assert res.values[s] == pytest.approx(-1 / (1 - 0.95 * 0.2), abs=1e-9)
    assert res.policy(s) == FORWARD


def test_manhattan():
    assert manhattan_distance((0, 0), (3, 4)) == 7
    assert manhattan_distance((2, 5), (2, 5)) == 0


def test_random_task_respects_bound_and_seed():
    g = bundled_map("office166")
    pairs = admissible_pairs(g)
    bound = (g.width + g.height) / 3
    for seed in range(50):
        rs, goal = random_task(g, seed, pairs=pairs)
        assert manhattan_distance((rs.row, rs.col), goal) < bound
        assert (rs.row, rs.col) != goal
        assert random_task(g, seed, pairs=pairs) == (rs, goal)


def test_random_task_uniform_over_pairs():
    g = load_map("5 5\n.....\n.....\n.....\n.....\n.....\n")
    pairs = admissible_pairs(g)
    index = {p: i for i, p in enumerate(pairs)}
    rng = np.random.default_rng(11)
    counts = np.zeros(len(pairs))
    for _ in range(100_000):
        rs, goal = random_task(g, rng, pairs=pairs)
        counts[index[((rs.row, rs.col), goal)]] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_sinks_are_point_masses():
    g = load_map("4 1\n.O..\n")
    a = build_automaton(g, failure="slip")
    for o in range(4):
        s = g.state_id((0, 1), o)
        for act in range(5):
            d = n_step_distribution(a, Policy.reflex(act), s, 7)
            assert d.mass == {s: 1.0}


def test_domain_samples_and_distance(office_domain):
    rng = np.random.default_rng(0)
    state, goal = office_domain.sample_task(rng)
    rs = office_domain.grid.decode(state)
    assert office_domain.distance(state, goal) == manhattan_distance((rs.row, rs.col), goal)
    task = office_domain.task_automaton(goal)
    assert task is office_domain.task_automaton(goal)
    assert len(task.goal_states) == 4


def test_random_map_connected():
    g = random_map(9, 7, 4, wall_fraction=0.3)
    free = set(g.free_locations())
    start = next(iter(free))
    seen, todo = {start}, [start]
    while todo:
        r, c = todo.pop()
        for nb in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if nb in free and nb not in seen:
                seen.add(nb)
                todo.append(nb)
    assert seen == free


def test_domain_exposes_grid():
    d = GridDomain(load_map(TINY))
    assert d.n_states == 32 and math.isclose(d.p_success, 0.8)
