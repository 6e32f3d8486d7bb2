"""Mobile-robot navigation on a grid: locations x four orientations, five actions."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .automaton import RewardSpec, StochasticAutomaton

FREE, WALL, SINK = ".", "#", "O"
ORIENTATIONS = "NESW"
_DELTA = ((-1, 0), (0, 1), (1, 0), (0, -1))

STAY, FORWARD, TURN_RIGHT, TURN_LEFT, TURN_ABOUT = range(5)
ACTION_NAMES = ("STAY", "FORWARD", "TURN_RIGHT", "TURN_LEFT", "TURN_ABOUT")
FAILURE_MODES = ("stay", "slip")


class MapFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GridMap:
    width: int
    height: int
    cells: tuple  # one string per row

    def __post_init__(self):
        if len(self.cells) != self.height or any(len(row) != self.width for row in self.cells):
            raise MapFormatError("cells do not match the declared width and height")

    @cached_property
    def locations(self) -> tuple:
        """Non-wall cells in row-major order; position in this tuple is the location index."""
        return tuple((r, c) for r in range(self.height) for c in range(self.width) if self.cells[r][c] != WALL)

    @cached_property
    def location_index(self) -> dict:
        return {loc: i for i, loc in enumerate(self.locations)}

    @property
    def n_states(self) -> int:
        return 4 * len(self.locations)

    def cell(self, loc) -> str:
        r, c = loc
        if not (0 <= r < self.height and 0 <= c < self.width):
            return WALL
        return self.cells[r][c]

    def is_sink(self, loc) -> bool:
        return self.cell(loc) == SINK

    def free_locations(self) -> list:
        return [loc for loc in self.locations if self.cell(loc) == FREE]

    def state_id(self, loc, orientation: int) -> int:
        return self.location_index[tuple(loc)] * 4 + orientation

    def decode(self, state: int) -> "RobotState":
        r, c = self.locations[state // 4]
        return RobotState(r, c, state % 4)

    def encode(self, rs: "RobotState") -> int:
        if self.cell((rs.row, rs.col)) == WALL:
            raise ValueError(f"{rs} lies on a wall")
        return self.state_id((rs.row, rs.col), rs.orientation)

    def location_states(self, loc) -> list[int]:
        base = self.location_index[tuple(loc)] * 4
        return [base + o for o in range(4)]

    def dumps(self) -> str:
        return f"{self.width} {self.height}\n" + "".join(row + "\n" for row in self.cells)


@dataclass(frozen=True)
class RobotState:
    row: int
    col: int
    orientation: int

    def __str__(self) -> str:
        return f"{self.row},{self.col},{ORIENTATIONS[self.orientation]}"

    @classmethod
    def parse(cls, text: str) -> "RobotState":
        try:
            r, c, o = text.strip().split(",")
            return cls(int(r), int(c), ORIENTATIONS.index(o))
        except ValueError as exc:
            raise ValueError(f"bad robot state {text!r}; expected '<row>,<col>,<N|E|S|W>'") from exc


def load_map(text: str) -> GridMap:
    """Parse a map. The ``<width> <height>`` header line is optional."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MapFormatError("empty map")
    header = lines[0].split()
    declared = None
    if len(header) == 2 and all(t.isdigit() for t in header):
        declared = (int(header[0]), int(header[1]))
        lines = lines[1:]
    if not lines:
        raise MapFormatError("map has no rows")
    width = len(lines[0])
    for i, row in enumerate(lines):
        if len(row) != width:
            raise MapFormatError(f"row {i} has length {len(row)}, expected {width} (ragged rows)")
        bad = set(row) - {FREE, WALL, SINK}
        if bad:
            raise MapFormatError(f"row {i} contains unknown characters {sorted(bad)!r}")
    if declared is not None and declared != (width, len(lines)):
        raise MapFormatError(f"header says {declared[0]}x{declared[1]} but rows are {width}x{len(lines)}")
    if not any(FREE in row for row in lines):
        raise MapFormatError("map has no FREE cell")
    return GridMap(width, len(lines), tuple(lines))


def read_map(path) -> GridMap:
    return load_map(Path(path).read_text())


def bundled_map(name: str) -> GridMap:
    """One of the maps shipped with the package, e.g. ``"office166"``."""
    return load_map(resources.files("delibsched").joinpath("maps").joinpath(f"{name}.map").read_text())


def bundled_map_path(name: str) -> Path:
    return Path(str(resources.files("delibsched").joinpath("maps").joinpath(f"{name}.map")))


def _turn(o: int, action: int) -> int:
    return (o + {TURN_RIGHT: 1, TURN_LEFT: 3, TURN_ABOUT: 2}[action]) % 4


def build_automaton(grid: GridMap, p_success: float = 0.8, failure: str = "stay") -> StochasticAutomaton:
    """Transition model of the robot.

    STAY always succeeds. The other actions succeed with ``p_success``. With
    ``failure="stay"`` a failed action leaves the state unchanged. With
    ``failure="slip"`` half of the failure mass leaves the state unchanged and
    the other half deviates: FORWARD drifts one cell sideways, a quarter turn
    over-rotates into a turn-about, and a turn-about stops a quarter turn
    short. Moves into walls or off the map are no-ops; sinks absorb.
    """
    if not 0.0 < p_success <= 1.0:
        raise ValueError(f"p_success must lie in (0, 1], got {p_success}")
    if failure not in FAILURE_MODES:
        raise ValueError(f"failure must be one of {FAILURE_MODES}")
    fail = 1.0 - p_success
    rows = []
    for loc in grid.locations:
        sink = grid.is_sink(loc)
        for o in range(4):
            s = grid.state_id(loc, o)

            def at(cell, orient, _s=s):
                if grid.cell(cell) == WALL:
                    return _s
                return grid.state_id(cell, orient)

            for a in range(5):
                if sink or a == STAY:
                    rows.append([(s, 1.0)])
                    continue
                if a == FORWARD:
                    dr, dc = _DELTA[o]
                    ahead = (loc[0] + dr, loc[1] + dc)
                    if grid.cell(ahead) == WALL:
                        rows.append([(s, 1.0)])
                        continue
                    target = at(ahead, o)
                    dev = []
                    for side in ((o + 1) % 4, (o + 3) % 4):
                        sr, sc = _DELTA[side]
                        dev.append(at((loc[0] + sr, loc[1] + sc), o))
                else:
                    target = grid.state_id(loc, _turn(o, a))
                    if a == TURN_ABOUT:
                        dev = [grid.state_id(loc, (o + 1) % 4), grid.state_id(loc, (o + 3) % 4)]
                    else:
                        dev = [grid.state_id(loc, (o + 2) % 4)] * 2
                row: dict[int, float] = {}
                if p_success > 0:
                    row[target] = row.get(target, 0.0) + p_success
                if fail > 0:
                    if failure == "stay":
                        row[s] = row.get(s, 0.0) + fail
                    else:
                        row[s] = row.get(s, 0.0) + fail / 2
                        for d in dev:
                            row[d] = row.get(d, 0.0) + fail / 4
                rows.append(sorted(row.items()))
    return StochasticAutomaton._from_rows(grid.n_states, 5, rows)


def goal_reward(grid: GridMap, goal_location) -> tuple[frozenset, RewardSpec]:
    """The four orientation states at ``goal_location`` and the matching reward."""
    loc = tuple(goal_location)
    if grid.cell(loc) != FREE:
        raise ValueError(f"goal location {loc} must be a FREE cell")
    goals = frozenset(grid.location_states(loc))
    return goals, RewardSpec(goals)


def make_task(automaton: StochasticAutomaton, grid: GridMap, goal_location) -> tuple[StochasticAutomaton, RewardSpec]:
    """Automaton with the goal states absorbing, plus its reward."""
    goals, reward = goal_reward(grid, goal_location)
    return automaton.with_absorbing(goals).with_goals(goals), reward


def manhattan_distance(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def admissible_pairs(grid: GridMap, max_distance_fraction: float = 1 / 3) -> list:
    """Ordered (start, goal) location pairs of FREE cells closer than the bound."""
    bound = max_distance_fraction * (grid.width + grid.height)
    free = grid.free_locations()
    return [(a, b) for a in free for b in free if a != b and manhattan_distance(a, b) < bound]


def random_task(grid: GridMap, rng, max_distance_fraction: float = 1 / 3, pairs=None) -> tuple[RobotState, tuple]:
    """Uniform admissible (start, goal) pair; the start orientation is uniform too."""
    rng = np.random.default_rng(rng)
    if pairs is None:
        pairs = admissible_pairs(grid, max_distance_fraction)
    if not pairs:
        raise ValueError("no admissible start/goal pair on this map")
    start, goal = pairs[int(rng.integers(len(pairs)))]
    return RobotState(start[0], start[1], int(rng.integers(4))), goal


class GridDomain:
    """A map plus its transition model, with per-goal task automata cached."""

    def __init__(self, grid: GridMap, p_success: float = 0.8, failure: str = "stay",
                 max_distance_fraction: float = 1 / 3):
        self.grid = grid
        self.p_success = p_success
        self.failure = failure
        self.max_distance_fraction = max_distance_fraction
        self.base = build_automaton(grid, p_success, failure)
        self._tasks: dict = {}
        self._pairs = None

    @property
    def n_states(self) -> int:
        return self.base.n_states

    def task_automaton(self, goal_location) -> StochasticAutomaton:
        goal_location = tuple(goal_location)
        if goal_location not in self._tasks:
            self._tasks[goal_location] = make_task(self.base, self.grid, goal_location)[0]
        return self._tasks[goal_location]

    def sample_task(self, rng) -> tuple[int, tuple]:
        if self._pairs is None:
            self._pairs = admissible_pairs(self.grid, self.max_distance_fraction)
        rs, goal = random_task(self.grid, rng, self.max_distance_fraction, self._pairs)
        return self.grid.encode(rs), goal

    def distance(self, state: int, goal_location) -> int:
        rs = self.grid.decode(state)
        return manhattan_distance((rs.row, rs.col), goal_location)


def random_map(width: int, height: int, rng, wall_fraction: float = 0.2, sink_fraction: float = 0.0) -> GridMap:
    """Random map whose FREE cells form one 4-connected component."""
    rng = np.random.default_rng(rng)
    while True:
        u = rng.random((height, width))
        grid = np.full((height, width), FREE)
        grid[u < wall_fraction] = WALL
        grid[(u >= wall_fraction) & (u < wall_fraction + sink_fraction)] = SINK
        free = [(r, c) for r in range(height) for c in range(width) if grid[r, c] == FREE]
        if len(free) < 2:
            continue
        seen = {free[0]}
        todo = [free[0]]
        while todo:
            r, c = todo.pop()
            for dr, dc in _DELTA:
                nb = (r + dr, c + dc)
                if 0 <= nb[0] < height and 0 <= nb[1] < width and nb not in seen and grid[nb] == FREE:
                    seen.add(nb)
                    todo.append(nb)
        for r, c in free:
            if (r, c) not in seen:
                grid[r, c] = WALL
        return GridMap(width, height, tuple("".join(row) for row in grid))
