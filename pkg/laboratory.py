import argparse
import configparser
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from packages import field_io, plotting
from packages import space_time_grid as stg
from packages.diffusion_profile import (PROFILE_PRESETS, branch_inverses, modify_profile, profile_from_expression,
                                        validate_nf)
from packages.errors import ConfigError, LaboratoryError, OutOfRange, PassIncomplete
from packages.expression_grammar import compile_expression
from packages.parabolic_solver import build_boundary_function, partition_domain
from packages.rank_one_geometry import SolutionType
from packages.refinement_scheme import StatePair, build_initial_state, iterate, make_plan
from packages.verification import full_report

logger = logging.getLogger("laboratory")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def load_config(config_file='config.ini'):
    """Read config.ini into a dict of sections."""
    config = configparser.ConfigParser()
    if not config.read(config_file):
        raise ConfigError(f"Cannot read configuration file {config_file}", section=None, key=None)
    return {section: dict(config[section]) for section in config.sections()}


@dataclass
class RunConfig:
    profile: object
    solution_type: SolutionType
    grid: stg.GridST
    initial: str
    u0: np.ndarray = field(repr=False)
    r_tilde: object = "auto"
    epsilon0: float = 0.8
    passes: int = 3
    eta: float = 0.1
    seed: int = 0
    box_cells: int = None
    box_slices: int = None
    vstar_rule: str = "implicit"
    output_dir: str = "output"
    snapshots: str = "state_pass{index}.csv"
    reports: str = "report_pass{index}.json"
    summary: str = "summary.json"
    jpgs: dict = field(default_factory=dict)
    log_level: str = "INFO"
    progress: bool = False

    def output_path(self, name, **fields):
        return os.path.join(self.output_dir, name.format(**fields))

    def plan_options(self):
        return {"epsilon0": self.epsilon0, "passes": self.passes, "eta": self.eta, "box_cells": self.box_cells,
                "box_slices": self.box_slices, "seed": self.seed, "vstar_rule": self.vstar_rule, "progress": self.progress}


def _value(sections, section, key, convert=str, default=None):
    """Fetch and convert one config value; any failure names the section and key."""
    raw = sections.get(section, {}).get(key)
    if raw is None or raw.strip() == "":
        if default is None:
            raise ConfigError(f"Missing value [{section}] {key}", section=section, key=key)
        return default
    try:
        return convert(raw.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"Invalid value [{section}] {key} = {raw!r}: {exc}", section=section, key=key) from exc


def _floats(text):
    return tuple(float(part) for part in text.split(","))


def _ints(text):
    return tuple(int(part) for part in text.split(","))


def _positive(convert):
    def parse(text):
        value = convert(text)
        if not value > 0:
            raise ValueError("must be positive")
        return value
    return parse


def _yes_no(text):
    lowered = text.lower()
    if lowered in ("yes", "true", "on", "1"):
        return True
    if lowered in ("no", "false", "off", "0"):
        return False
    raise ValueError("expected yes or no")


def _box_size(sections, key):
    """A positive cell or slice count, None for auto."""
    value = _value(sections, "refinement", key, default="auto")
    return None if value.lower() == "auto" else _value(sections, "refinement", key, _positive(int))


def _r_tilde(text):
    return "auto" if text.lower() == "auto" else float(text)


def parse_profile(sections):
    name = _value(sections, "profile", "name", default="quadratic-glued")
    if name in PROFILE_PRESETS:
        profile = PROFILE_PRESETS[name]()
    elif name == "custom":
        expression = _value(sections, "profile", "expression")
        derivative = sections.get("profile", {}).get("derivative") or None
        s_max = _value(sections, "profile", "s_max", float, default=0.0) or None
        profile = profile_from_expression(expression, derivative=derivative, s_max=s_max)
    else:
        raise ConfigError(f"Unknown profile [profile] name = {name!r}", section="profile", key="name")
    validate_nf(profile, samples=_value(sections, "profile", "samples", _positive(int), default=10000))
    return profile


def parse_grid(sections):
    dimension = _value(sections, "problem", "dimension", int, default=1)
    extent = _value(sections, "problem", "extent", _floats, default=(0.0, 1.0) * dimension)
    nodes = _value(sections, "problem", "nodes", _ints)
    if len(nodes) == 1:
        nodes = nodes * dimension
    if len(extent) != 2 * dimension:
        raise ConfigError(f"[problem] extent needs {2 * dimension} numbers, got {len(extent)}", section="problem",
                          key="extent")
    try:
        return stg.GridST(dimension=dimension, extent=tuple(zip(extent[::2], extent[1::2])), nodes=nodes,
                          horizon=_value(sections, "problem", "horizon", float),
                          steps=_value(sections, "problem", "steps", int))
    except ValueError as exc:
        raise ConfigError(f"Invalid grid in [problem]: {exc}", section="problem", key="nodes") from exc


def parse_initial(source, grid):
    """Initial node values from an expression in x[, y] or a CSV table."""
    if source.endswith(".csv"):
        try:
            return field_io.load_initial(source, grid)
        except FileNotFoundError as exc:
            raise ConfigError(f"Initial data file {source} not found", section="problem", key="initial") from exc
    function = compile_expression(source, ("x", "y")[:grid.dimension])
    return function(*stg.node_coordinates(grid))


def parse_run_config(sections, args=None):
    """
    Validate the config sections and apply the command-line overrides.

    Parameters:
    sections (dict): Output of load_config.
    args (argparse.Namespace): Parsed flags; None values leave the file settings.

    Returns:
    RunConfig: Everything a run needs.
    """
    overrides = vars(args) if args is not None else {}
    grid = parse_grid(sections)
    initial = _value(sections, "problem", "initial")
    type_text = overrides.get("type") or _value(sections, "problem", "type", default="I")
    try:
        solution_type = SolutionType.parse(type_text)
    except ValueError as exc:
        raise ConfigError(f"Invalid value [problem] type = {type_text!r}", section="problem", key="type") from exc
    vstar_rule = _value(sections, "refinement", "vstar_rule", default="implicit")
    if vstar_rule not in ("trapezoid", "implicit"):
        raise ConfigError(f"Invalid value [refinement] vstar_rule = {vstar_rule!r}", section="refinement",
                          key="vstar_rule")
    paths = sections.get("paths_output", {})
    config = RunConfig(
        profile=parse_profile(sections),
        solution_type=solution_type,
        grid=grid,
        initial=initial,
        u0=parse_initial(initial, grid),
        r_tilde=_value(sections, "problem", "r_tilde", _r_tilde, default="auto"),
        epsilon0=_value(sections, "refinement", "epsilon0", _positive(float), default=0.8),
        passes=overrides.get("passes") or _value(sections, "refinement", "passes", _positive(int), default=3),
        eta=_value(sections, "refinement", "eta", _positive(float), default=0.1),
        seed=overrides.get("seed") if overrides.get("seed") is not None else _value(sections, "refinement", "seed",
                                                                                    int, default=0),
        box_cells=_box_size(sections, "box_cells"),
        box_slices=_box_size(sections, "box_slices"),
        vstar_rule=vstar_rule,
        output_dir=overrides.get("out") or paths.get("core", "output"),
        snapshots=paths.get("snapshots", "state_pass{index}.csv"),
        reports=paths.get("reports", "report_pass{index}.json"),
        summary=paths.get("summary", "summary.json"),
        jpgs=dict(sections.get("jpg_output", {})),
        log_level=_value(sections, "logging", "level", str.upper, default="INFO"),
        progress=_value(sections, "logging", "progress", _yes_no, default=False),
    )
    if config.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise ConfigError(f"Invalid value [logging] level = {config.log_level!r}", section="logging", key="level")
    return config


def inspect_profile(profile, r_values, out=sys.stdout):
    """Landmarks, then one CSV row 'r, s_+(r), s_-^1(r), s_-^2(r)' per requested level."""
    sigma_minus, sigma_plus = float(profile.sigma(profile.s_minus)), float(profile.sigma(profile.s_plus))
    print("s_minus, s_zero, s_plus, sigma(s_minus), sigma(s_plus)", file=out)
    print(f"{profile.s_minus:.6f}, {profile.s_zero:.6f}, {profile.s_plus:.6f}, {sigma_minus:.6f}, {sigma_plus:.6f}",
          file=out)
    if r_values:
        print("r, s_plus(r), s_minus1(r), s_minus2(r)", file=out)
    for r in r_values:
        try:
            inverses = branch_inverses(profile, r)
        except OutOfRange as exc:
            print(f"{r:g}, error, {exc}", file=out)
            continue
        print(f"{r:g}, {inverses.s_plus_r:.6f}, {inverses.s_minus1_r:.6f}, {inverses.s_minus2_r:.6f}", file=out)


def solve_classical(config):
    """The classical pair (u*, v*) of the modified problem, its snapshot and the region counts."""
    plan = make_plan(config.profile, config.u0, config.grid, config.solution_type, config.r_tilde,
                     **config.plan_options())
    logger.info("Solving the classical problem with r~ = %.6g", plan.r_tilde)
    mod = modify_profile(config.profile, plan.r_tilde)
    pair = build_boundary_function(mod, plan.u0, config.grid, rule=config.vstar_rule, progress=config.progress)
    masks = partition_domain(pair.du_star, plan.r_tilde, config.profile)
    state = StatePair(grid=config.grid, u=pair.u_star, v=pair.v_star, masks=masks, u_star=pair.u_star,
                      v_star=pair.v_star)
    path = field_io.save_state(state, config.output_path("classical.csv"))
    summary = {"r_tilde": plan.r_tilde, "gradient_bound": pair.gradient_bound, "regions": masks.counts(),
               "cover": [{"r": w.r, "mu": w.mu} for w in plan.cover]}
    field_io.save_json(summary, config.output_path("classical.json"))
    print(f"Classical solution saved to {path}; regions {masks.counts()}")
    return plan, state


def _write_pass(config, index, state, report):
    field_io.save_state(state, config.output_path(config.snapshots, index=index))
    if report is not None:
        field_io.save_report(report, config.output_path(config.reports, index=index))


def _summary(config, plan, state, trace, status, binding=None):
    final_budget = plan.epsilons[-1] * config.grid.spacetime_volume
    return {
        "profile": config.profile.name,
        "type": plan.solution_type.value,
        "r_tilde": plan.r_tilde,
        "epsilons": plan.epsilons,
        "grid": {"dimension": config.grid.dimension, "nodes": list(config.grid.nodes),
                 "extent": [list(e) for e in config.grid.extent], "horizon": config.grid.horizon,
                 "steps": config.grid.steps},
        "cover": [{"r": w.r, "mu": w.mu} for w in plan.cover],
        "trace": trace,
        "final_budget": final_budget,
        "status": status,
        "binding": binding,
        "regions": state.masks.counts(),
        "initial_audit": state.audit,
        "passes": state.history,
        "patches_accepted": sum(1 for entry in state.patch_log if entry["accepted"]),
        "patches_tried": len(state.patch_log),
    }


def refine(config, plot=False):
    """
    Build the initial state, run the passes and write J+1 snapshots, J reports and the summary.

    Returns the exit status: 0 iff the final flux residual is within eps_{J-1} |Omega_T|.
    """
    os.makedirs(config.output_dir, exist_ok=True)
    plan = make_plan(config.profile, config.u0, config.grid, config.solution_type, config.r_tilde,
                     **config.plan_options())
    logger.info("Cover of (0, %.6g) by %d windows", plan.r_tilde, len(plan.cover))
    logger.info("Building the initial state")
    state = build_initial_state(plan)
    _write_pass(config, 0, state, None)

    def after_pass(j, new_state, report):
        logger.info("Pass %d/%d: flux residual %.4g", j + 1, plan.passes, report.flux_residual)
        _write_pass(config, j + 1, new_state, report)

    try:
        state, trace = iterate(plan, state=state, callback=after_pass)
        binding = None
    except PassIncomplete as exc:
        state, trace, binding = exc.state, exc.trace, exc.binding
        logger.warning("Pass %d incomplete: %s", exc.pass_index + 1, exc)
        _write_pass(config, exc.pass_index + 1, state, full_report(state, plan, pass_index=exc.pass_index))

    status = 0 if binding is None and trace[-1] <= plan.epsilons[-1] * config.grid.spacetime_volume else 1
    field_io.save_json(_summary(config, plan, state, trace, status, binding), config.output_path(config.summary))
    if plot:
        _plots(config, plan, state, trace)
    print(f"Final flux residual {trace[-1]:.4g} (budget {plan.epsilons[-1] * config.grid.spacetime_volume:.4g}); "
          f"exit status {status}")
    return status


def _plots(config, plan, state, trace):
    jpgs = config.jpgs
    mod = modify_profile(config.profile, plan.r_tilde)
    plotting.plot_profile(config.profile, config.output_path(jpgs.get("profile", "profile.jpg")), mod_profile=mod,
                          r_tilde=plan.r_tilde, solution_type=plan.solution_type)
    budgets = [eps * config.grid.spacetime_volume for eps in plan.epsilons]
    plotting.plot_residual_trace(trace, budgets, config.output_path(jpgs.get("trace", "trace.jpg")))
    plotting.plot_field(state, config.output_path(jpgs.get("field", "field.jpg")))


def verify(config, snapshot):
    """Recompute every verifier on a saved state; the masks come from the classical solve."""
    plan = make_plan(config.profile, config.u0, config.grid, config.solution_type, config.r_tilde,
                     **config.plan_options())
    reference = build_initial_state(plan)
    u, v = field_io.load_state(snapshot, config.grid)
    state = StatePair(grid=config.grid, u=u, v=v, masks=reference.masks, u_star=reference.u_star,
                      v_star=reference.v_star, time_cap=reference.time_cap)
    report = full_report(state, plan)
    root, _ = os.path.splitext(snapshot)
    field_io.save_report(report, f"{root}_verify.json")
    print(report.to_json())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(description="Construct and verify approximate solutions of u_t = div(A(Du)).")
    parser.add_argument('--config', default='config.ini', help="Path to the configuration file")
    parser.add_argument('--out', help="Output directory (overrides [paths_output] core)")
    parser.add_argument('--passes', type=int, help="Number of refinement passes")
    parser.add_argument('--type', choices=["I", "II"], help="Solution type")
    parser.add_argument('--seed', type=int, help="Seed for randomized audits and tie-breaks")
    parser.add_argument('--plot', action='store_true', help="Save JPG figures")
    parser.add_argument('--verbose', action='store_true', help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)
    inspect = commands.add_parser("inspect-profile", help="Print landmarks and branch inverses")
    inspect.add_argument('r', nargs='*', type=float, help="Flux levels r")
    inspect.add_argument('--grid', action='store_true', help="Also print the region counts of the configured run")
    commands.add_parser("solve-classical", help="Solve the modified problem and write u*, v*")
    commands.add_parser("refine", help="Run the refinement passes")
    check = commands.add_parser("verify", help="Verify a saved state")
    check.add_argument('snapshot', help="State CSV written by refine")
    commands.add_parser("demo", help="Refine with the configured demo and save the figures")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        sections = load_config(args.config)
        level = "DEBUG" if args.verbose else sections.get("logging", {}).get("level", "INFO").upper()
        logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)
        if args.command == "inspect-profile":
            profile = parse_profile(sections)
            inspect_profile(profile, args.r, out=sys.stdout)
            if args.grid:
                _, state = solve_classical(parse_run_config(sections, args))
                print(", ".join(f"{name}={count}" for name, count in state.masks.counts().items()))
            return 0
        config = parse_run_config(sections, args)
        if args.command == "solve-classical":
            solve_classical(config)
            return 0
        if args.command == "refine":
            return refine(config, plot=args.plot)
        if args.command == "verify":
            return verify(config, args.snapshot)
        return refine(config, plot=True)
    except ConfigError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return 2
    except (LaboratoryError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
