"""Command-line front end: gather, precursor, recurrent, oracle, validate."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import precursor as pre
from . import recurrent as rec
from .automaton import AUTOMATON_HEADER, RewardSpec, parse_automaton, validate_automaton
from .costs import CostModel
from .envelope import UnreachableGoalError
from .gridworld import (
    ACTION_NAMES,
    FAILURE_MODES,
    MapFormatError,
    GridDomain,
    build_automaton,
    bundled_map_path,
    load_map,
)
from .mdp import SolverConfig, greedy_actions, q_values, reward_vector, value_iteration
from .strategy import DeliberationStrategy, StrategyError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
BUNDLED_MAPS = ("office166", "floor314", "tiny")


class SpecError(ValueError):
    """Bad command input: unknown key, missing file, malformed value."""


def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SpecError(f"{path}:{lineno}: expected key=value")
        key = key.strip().replace("-", "_")
        if key in out:
            raise SpecError(f"{path}:{lineno}: key {key!r} given twice")
        out[key] = value.strip()
    return out


def resolve_map(name: str) -> Path:
    if name in BUNDLED_MAPS:
        return bundled_map_path(name)
    p = Path(name)
    if not p.is_file():
        raise SpecError(f"map file {name!r} does not exist")
    return p


def _domain(args) -> GridDomain:
    if not args.map:
        raise SpecError("--map is required")
    grid = load_map(resolve_map(args.map).read_text())
    return GridDomain(grid, args.p_success, args.failure)


def _solver(args) -> SolverConfig:
    return SolverConfig(gamma=args.gamma)


def _costs(args) -> CostModel:
    return CostModel(args.c_pg, args.c_fp, args.c_alt, args.c_add)


def _need(path, what: str) -> Path:
    if not path:
        raise SpecError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise SpecError(f"{what} {path!r} does not exist")
    return p


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _deadlines(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        out.append(None if tok in ("inf", "none", "") else int(tok))
    return out


# ---------------------------------------------------------------- commands

def cmd_gather(args) -> int:
    domain = _domain(args)
    if not args.out:
        raise SpecError("--out is required")
    if args.kind == "profile":
        camp = pre.gather_profile_statistics(domain, args.budget, args.seed, config=_solver(args), costs=_costs(args))
        table = pre.build_profile_table(camp.samples, min_count=args.min_count)
        _write(Path(args.out), pre.dump_profile_table(table))
        print(f"profile table: {len(camp.samples)} samples from {camp.tasks} tasks ({camp.skipped} skipped)")
        print(f"cells: {len(table.cells)} of {table.shape[0] * table.shape[1]}, populated: {len(table.populated_cells())}")
        for key in sorted(table.cells):
            curve = table.cells[key]
            tag = "" if table.populated(key) else " (sparse)"
            dv = " ".join(f"{n}:{c.mean_dv:.4f}" for n, c in curve.items())
            print(f"  cell {key}{tag} count={min(c.count for c in curve.values())} dV {dv}")
    else:
        coupling = rec.CouplingConfig(exchange_rate=args.rate, step_cap=args.step_cap)
        camp = rec.gather_eiv_statistics(domain, args.budget, args.seed, coupling=coupling, config=_solver(args),
                                         costs=_costs(args), p_back=args.p_back)
        if not camp.samples:
            raise SpecError("no strategy invocations were recorded; raise --budget")
        table = rec.build_eiv_table(camp.samples, min_count=args.min_count)
        _write(Path(args.out), rec.dump_eiv_table(table))
        print(f"eiv table: {len(camp.samples)} invocations from {camp.runs} runs ({camp.capped} capped)")
        print(f"cells: {len(table.cells)}")
        for label, n in table.counts().items():
            m = rec.Moments.pool(row[label] for row in table.cells.values() if label in row)
            print(f"  {label}: count={n} mean={m.mean:.3e} var={m.variance:.3e}")
    return EXIT_OK


def cmd_precursor(args) -> int:
    domain = _domain(args)
    modes = [m.strip() for m in args.modes.split(",")]
    for m in modes:
        if m not in pre.MODES:
            raise SpecError(f"unknown mode {m!r}; choose from {', '.join(pre.MODES)}")
    table = None
    if pre.GREEDY in modes:
        table = pre.parse_profile_table(_need(args.table, "--table (profile table)").read_text())
    if not args.out:
        raise SpecError("--out is required")
    out = Path(args.out)
    deadlines = _deadlines(args.deadlines)
    tasks = pre.sample_tasks(domain, args.tasks, args.seed)
    summary = [("task", "mode", "deadline", "final_value", "ticks")]
    for i, (start, goal) in enumerate(tasks):
        auto = domain.task_automaton(goal)
        for mode in modes:
            for d in deadlines:
                budget = pre.DeliberationBudget(d, args.delay_cost_rate)
                run = pre.run_precursor(auto, start, mode, budget, table, _solver(args), _costs(args))
                tag = "inf" if d is None else str(d)
                _write(out / f"task{i}_{mode}_d{tag}.csv", pre.dump_trace(run.trace))
                summary.append((i, mode, tag, repr(run.trace[-1].value), run.ticks))
    _write(out / "summary.csv", "".join(",".join(str(c) for c in row) + "\n" for row in summary))
    for mode in modes:
        for d in deadlines:
            tag = "inf" if d is None else str(d)
            vals = [float(r[3]) for r in summary[1:] if r[1] == mode and r[2] == tag]
            print(f"{mode:16s} deadline={tag:>12s} mean final value {np.mean(vals):.6f}")
    return EXIT_OK


def _scheduler(name: str, table) -> rec.Scheduler:
    if name.startswith("FIXED:"):
        return rec.Scheduler(rec.FIXED, strategy=DeliberationStrategy.parse(name[len("FIXED:"):]))
    if name not in (rec.LOOKUP, rec.ITER, rec.WHOLE, rec.RANDOM):
        raise SpecError(f"unknown scheduler {name!r}")
    return rec.Scheduler(name, table=table if name == rec.LOOKUP else None)


def cmd_recurrent(args) -> int:
    domain = _domain(args)
    names = [s.strip() for s in args.schedulers.split(",")]
    table = None
    if rec.LOOKUP in names:
        if args.table == "bundled":
            table = rec.bundled_eiv_table()
        else:
            table = rec.parse_eiv_table(_need(args.table, "--table (eiv table)").read_text())
    scheds = [_scheduler(n, table) for n in names]
    if not args.out:
        raise SpecError("--out is required")
    out = Path(args.out)
    coupling = rec.CouplingConfig(args.coupling, args.rate, args.interval, args.step_cap)
    tasks = pre.sample_tasks(domain, args.tasks, args.seed)
    steps: dict = {s.name: [] for s in scheds}
    capped: dict = {s.name: 0 for s in scheds}
    for i, (start, goal) in enumerate(tasks):
        auto = domain.task_automaton(goal)
        run_seed = int(np.random.default_rng([args.seed, i, 4]).integers(2 ** 31))
        for sched in scheds:
            trace = rec.run_recurrent(auto, start, sched, coupling, _solver(args), run_seed, _costs(args), args.p_back,
                                      distance=lambda x, g=goal: domain.distance(x, g))
            st, inv = rec.dump_run_trace(trace)
            stem = sched.name.replace(" ", "_").replace(":", "_")
            _write(out / "traces" / f"{stem}_task{i}_steps.csv", st)
            _write(out / "traces" / f"{stem}_task{i}_invocations.csv", inv)
            steps[sched.name].append(trace.steps_taken)
            capped[sched.name] += trace.capped
    lines = ["scheduler,runs,mean_steps,median_steps,stddev_steps,capped\n"]
    for name, vals in steps.items():
        v = np.array(vals, dtype=float)
        lines.append(f"{name},{len(v)},{float(v.mean())!r},{float(np.median(v))!r},{float(v.std())!r},{capped[name]}\n")
        print(f"{name:10s} mean steps {v.mean():8.2f} median {np.median(v):6.1f} capped {capped[name]}")
    _write(out / "aggregate.csv", "".join(lines))
    return EXIT_OK


def cmd_oracle(args) -> int:
    domain = _domain(args)
    if not args.goal:
        raise SpecError("--goal ROW,COL is required")
    try:
        goal = tuple(int(t) for t in args.goal.split(","))
        if len(goal) != 2:
            raise ValueError
    except ValueError:
        raise SpecError(f"bad --goal {args.goal!r}; expected ROW,COL") from None
    if domain.n_states > args.size_cap:
        raise SpecError(f"automaton has {domain.n_states} states, above the size cap {args.size_cap}")
    try:
        auto = domain.task_automaton(goal)
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    if not args.out:
        raise SpecError("--out is required")
    config = SolverConfig(gamma=args.gamma, eval_tolerance=1e-12)
    vf = value_iteration(auto, RewardSpec(auto.goal_states), config)
    q = q_values(auto, reward_vector(RewardSpec(auto.goal_states), auto.n_states), vf.values, args.gamma)
    acts = greedy_actions(q, config.tie_tolerance)
    lines = ["state,row,col,orientation,value,action\n"]
    for s in range(auto.n_states):
        rs = domain.grid.decode(s)
        lines.append(f"{s},{rs.row},{rs.col},{'NESW'[rs.orientation]},{float(vf.values[s])!r},{ACTION_NAMES[acts[s]]}\n")
    _write(Path(args.out), "".join(lines))
    print(f"oracle: {auto.n_states} states, values in [{vf.values.min():.6f}, {vf.values.max():.6f}]")
    return EXIT_OK


def validate_text(text: str) -> tuple[str, list[str]]:
    """Detect the file kind and return (kind, problems)."""
    first = text.split("\n", 1)[0].strip()
    problems: list[str] = []
    if first == pre.PROFILE_HEADER:
        try:
            table = pre.parse_profile_table(text)
        except ValueError as exc:
            return "profile-table", [f"parse: {exc}"]
        for key, curve in table.cells.items():
            for n, c in curve.items():
                if c.count < 1 or c.variance < 0 or c.mean_cost <= 0:
                    problems.append(f"cell {key} n={n}: bad count, variance or cost")
        if not table.populated_cells():
            problems.append("every cell is sparse")
        return "profile-table", problems
    if first == rec.EIV_HEADER:
        try:
            rec.parse_eiv_table(text)
        except (ValueError, StrategyError) as exc:
            return "eiv-table", [f"parse: {exc}"]
        return "eiv-table", problems
    if first == AUTOMATON_HEADER:
        try:
            auto = parse_automaton(text)
        except ValueError as exc:
            return "automaton", [f"parse: {exc}"]
        return "automaton", [str(v) for v in validate_automaton(auto)]
    if first.startswith(("profile-table", "eiv-table", "automaton")):
        return "unknown", [f"unsupported version line {first!r}"]
    try:
        grid = load_map(text)
    except MapFormatError as exc:
        return "map", [f"map: {exc}"]
    return "map", [str(v) for v in validate_automaton(build_automaton(grid))]


def cmd_validate(args) -> int:
    path = Path(args.path)
    if args.path in BUNDLED_MAPS:
        path = bundled_map_path(args.path)
    if not path.is_file():
        print(f"{args.path}: no such file", file=sys.stderr)
        return EXIT_INVALID
    kind, problems = validate_text(path.read_text())
    for p in problems:
        print(f"{path}: {p}")
    if problems:
        return EXIT_INVALID
    print(f"{path}: ok ({kind})")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser):
    p.add_argument("--map", help="map file or bundled map name (office166, floor314, tiny)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=0.95)
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--table", help="profile or EIV table file")
    p.add_argument("--config", help="key=value config file; command-line flags override it")
    p.add_argument("--p-success", type=float, default=0.8)
    p.add_argument("--failure", choices=FAILURE_MODES, default="slip")
    p.add_argument("--c-pg", type=int, default=1)
    p.add_argument("--c-fp", type=int, default=1)
    p.add_argument("--c-alt", type=int, default=10)
    p.add_argument("--c-add", type=int, default=1)


def _recurrent_flags(p: argparse.ArgumentParser, step_cap: int):
    p.add_argument("--rate", type=float, default=rec.DEFAULT_EXCHANGE_RATE, help="execution steps per tick")
    p.add_argument("--step-cap", type=int, default=step_cap)
    p.add_argument("--p-back", type=float, default=rec.DEFAULT_P_BACK)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delibsched", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gather", help="gather statistics and write a profile or EIV table")
    _common(p)
    p.add_argument("--kind", choices=("profile", "eiv"), default="profile")
    p.add_argument("--budget", type=int, default=1000, help="samples (profile) or runs (eiv)")
    p.add_argument("--min-count", type=int, default=None)
    _recurrent_flags(p, 300)
    p.set_defaults(func=cmd_gather)

    p = sub.add_parser("precursor", help="deliberate before acting; write anytime traces")
    _common(p)
    p.add_argument("--modes", default=",".join(pre.MODES))
    p.add_argument("--tasks", type=int, default=1)
    p.add_argument("--deadlines", default="inf", help="comma-separated tick deadlines; 'inf' = none")
    p.add_argument("--delay-cost-rate", type=float, default=None)
    p.set_defaults(func=cmd_precursor)

    p = sub.add_parser("recurrent", help="interleave planning and execution; write run traces")
    _common(p)
    p.add_argument("--schedulers", default="LOOKUP,ITER,WHOLE", help="LOOKUP, ITER, WHOLE, RANDOM or FIXED:<strategy>")
    p.add_argument("--tasks", type=int, default=25)
    p.add_argument("--coupling", choices=rec.COUPLING_MODES, default=rec.STRATEGY_PACED)
    p.add_argument("--interval", type=int, default=1, help="ticks between exchanges for FIXED-TICKS")
    _recurrent_flags(p, 2000)
    p.set_defaults(func=cmd_recurrent)

    p = sub.add_parser("oracle", help="exact values and policy by value iteration")
    _common(p)
    p.add_argument("--goal", help="goal cell as ROW,COL")
    p.add_argument("--size-cap", type=int, default=20000)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("validate", help="check a map, table or automaton file")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    cfg = read_config(_need(path, "--config"))
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in cfg.items():
        if key not in actions:
            raise SpecError(f"unknown key {key!r} in {path}")
        act = actions[key]
        try:
            val = act.type(raw) if act.type else raw
        except ValueError:
            raise SpecError(f"bad value {raw!r} for {key!r} in {path}") from None
        if act.choices and val not in act.choices:
            raise SpecError(f"{key!r} must be one of {list(act.choices)}")
        defaults[key] = val
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if getattr(args, "min_count", "unset") is None:
            args.min_count = 30 if args.kind == "profile" else 5
        return args.func(args)
    except ValueError as exc:  # bad input, tables and maps
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (UnreachableGoalError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
