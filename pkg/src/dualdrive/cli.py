"""Command-line front end: run suites, sweep gate thresholds, export QA data.

All subcommand options can also come from environment variables with the
FASIONAD_ prefix (e.g. FASIONAD_RUN_SEED=7 dualdrive run). Exit codes:
0 ok, 2 config error, 3 scenario failure.
"""

from __future__ import annotations

import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import click

from dualdrive import plots, scenarios as suites_mod, slowsys
from dualdrive.fastplan import SamplerConfig
from dualdrive.fusion import GUIDANCE_STRENGTH
from dualdrive.gate import GateConfig
from dualdrive.reward import RewardWeights
from dualdrive.simworld import (
    LogNotFoundError,
    PlannerStack,
    RunReport,
    Scenario,
    ScenarioInvalidError,
    SimConfig,
    SimMode,
    default_stack,
    load_report,
    load_scenario,
    run_scenario,
    scenes_from_report,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

MODE_NAMES = {m.value: m for m in SimMode}


class ConfigError(ValueError):
    """Run configuration rejected; the message names the offending field."""


@dataclass
class RunConfig:
    """Validated run configuration (file values overridden by CLI flags)."""

    scenarios: List[str] = field(default_factory=list)
    suite: Optional[str] = "routine"
    mode: str = "DualSync"
    seed: int = 0
    out: str = "runs"
    tau_r: float = 0.6
    tau_b: float = 0.15
    hysteresis_ticks: int = 2
    weights: List[float] = field(default_factory=lambda: [0.4, 0.2, 0.2, 0.2])
    guidance_strength: float = GUIDANCE_STRENGTH
    dt_sim: float = 0.1
    max_ticks: int = 400
    replan_period: int = 5
    endpoint: Optional[str] = None
    timeout: float = 2.0
    jobs: Optional[int] = None
    figures: bool = True
    grid: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        doc = asdict(self)
        if math.isinf(doc["tau_b"]):
            doc["tau_b"] = "inf"
        doc["grid"] = {
            k: ["inf" if isinstance(v, float) and math.isinf(v) else v for v in vs]
            for k, vs in self.grid.items()
        }
        return doc


def _parse_threshold(value: object, name: str) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return math.inf
        raise ConfigError(f"{name}: expected a number or 'inf', got {value!r}")
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    v = float(value)
    if math.isnan(v):
        raise ConfigError(f"{name}: must not be NaN")
    return v


def parse_run_config(doc: Dict[str, object]) -> RunConfig:
    """Validate a config document field by field; raises ConfigError."""
    if not isinstance(doc, dict):
        raise ConfigError("config: document must be a JSON object")
    cfg = RunConfig()
    known = set(cfg.__dataclass_fields__)
    for key in doc:
        if key not in known:
            raise ConfigError(f"{key}: unknown config field")

    raw_scenarios = doc.get("scenarios", [])
    if not isinstance(raw_scenarios, list) or not all(isinstance(p, str) for p in raw_scenarios):
        raise ConfigError("scenarios: must be a list of file paths")
    cfg.scenarios = list(raw_scenarios)
    for i, path in enumerate(cfg.scenarios):
        if not os.path.exists(path):
            raise ConfigError(f"scenarios[{i}]: file not found: {path}")

    if "suite" in doc:
        suite = doc["suite"]
        if suite is not None:
            if not isinstance(suite, str) or suite not in suites_mod.SUITES:
                raise ConfigError(
                    f"suite: unknown suite {suite!r}; available: {sorted(suites_mod.SUITES)}"
                )
        cfg.suite = suite
    if cfg.scenarios:
        # Explicit scenario files take precedence over the default suite.
        if "suite" not in doc:
            cfg.suite = None
    if not cfg.scenarios and cfg.suite is None:
        raise ConfigError("scenarios: need scenario files or a suite name")

    mode = doc.get("mode", cfg.mode)
    if mode not in MODE_NAMES:
        raise ConfigError(f"mode: must be one of {sorted(MODE_NAMES)}, got {mode!r}")
    cfg.mode = mode

    for name, lo in (("seed", None), ("hysteresis_ticks", 0), ("max_ticks", 1),
                     ("replan_period", 1)):
        if name in doc:
            value = doc[name]
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name}: must be an integer, got {value!r}")
            if lo is not None and value < lo:
                raise ConfigError(f"{name}: must be >= {lo}, got {value}")
            setattr(cfg, name, value)

    if "tau_r" in doc:
        cfg.tau_r = _parse_threshold(doc["tau_r"], "tau_r")
    if "tau_b" in doc:
        cfg.tau_b = _parse_threshold(doc["tau_b"], "tau_b")
        if cfg.tau_b <= 0:
            raise ConfigError(f"tau_b: must be positive, got {cfg.tau_b}")

    if "weights" in doc:
        w = doc["weights"]
        if (not isinstance(w, list) or len(w) != 4
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in w)):
            raise ConfigError("weights: must be a list of 4 numbers")
        if any(x < 0 for x in w) or sum(w) <= 0:
            raise ConfigError("weights: must be non-negative with a positive sum")
        cfg.weights = [float(x) for x in w]

    for name, lo in (("guidance_strength", 0.0), ("dt_sim", None), ("timeout", None)):
        if name in doc:
            value = doc[name]
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{name}: must be a number, got {value!r}")
            value = float(value)
            if lo is not None and value < lo:
                raise ConfigError(f"{name}: must be >= {lo}, got {value}")
            if lo is None and value <= 0:
                raise ConfigError(f"{name}: must be positive, got {value}")
            setattr(cfg, name, value)

    if "out" in doc:
        if not isinstance(doc["out"], str) or not doc["out"]:
            raise ConfigError("out: must be a non-empty path")
        cfg.out = doc["out"]
    if "endpoint" in doc and doc["endpoint"] is not None:
        if not isinstance(doc["endpoint"], str):
            raise ConfigError("endpoint: must be a URL string")
        cfg.endpoint = doc["endpoint"]
    if "jobs" in doc and doc["jobs"] is not None:
        jobs = doc["jobs"]
        if not isinstance(jobs, int) or isinstance(jobs, bool) or jobs < 1:
            raise ConfigError(f"jobs: must be a positive integer, got {jobs!r}")
        cfg.jobs = jobs
    if "figures" in doc:
        if not isinstance(doc["figures"], bool):
            raise ConfigError("figures: must be a boolean")
        cfg.figures = doc["figures"]

    if "grid" in doc:
        grid = doc["grid"]
        if not isinstance(grid, dict):
            raise ConfigError("grid: must be an object with tau_r/tau_b lists")
        for key in grid:
            if key not in ("tau_r", "tau_b"):
                raise ConfigError(f"grid.{key}: unknown grid axis")
            values = grid[key]
            if not isinstance(values, list):
                raise ConfigError(f"grid.{key}: must be a list")
            cfg.grid[key] = [_parse_threshold(v, f"grid.{key}[{i}]")
                             for i, v in enumerate(values)]
        if "tau_b" in cfg.grid and any(v <= 0 for v in cfg.grid["tau_b"]):
            raise ConfigError("grid.tau_b: values must be positive")
    return cfg


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config: {path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc)


def _resolve_scenarios(cfg: RunConfig) -> List[Scenario]:
    if cfg.scenarios:
        return [load_scenario(p) for p in cfg.scenarios]
    return suites_mod.build_suite(cfg.suite, cfg.seed)


def _build_stack(cfg: RunConfig) -> PlannerStack:
    stack = default_stack(cfg.seed)
    stack.gate_cfg = GateConfig(
        tau_r=cfg.tau_r, tau_b=cfg.tau_b, hysteresis_ticks=cfg.hysteresis_ticks
    )
    stack.weights = RewardWeights(*cfg.weights)
    stack.guidance_strength = cfg.guidance_strength
    if cfg.endpoint:
        endpoint, timeout = cfg.endpoint, cfg.timeout

        def remote_fn(scene, _traj, prompts):
            scene_id = f"t{scene.timestamp:.1f}"
            return slowsys.remote_feedback(scene_id, prompts, endpoint, timeout)

        stack.slow_fn = remote_fn
    return stack


def _sim_config(cfg: RunConfig) -> SimConfig:
    return SimConfig(
        dt_sim=cfg.dt_sim,
        max_ticks=cfg.max_ticks,
        replan_period=cfg.replan_period,
        mode=MODE_NAMES[cfg.mode],
        seed=cfg.seed,
    )


def _atomic_write(path: str, data: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _run_one(scenario: Scenario, cfg: RunConfig) -> Tuple[str, Optional[RunReport], str]:
    """Simulate and persist one scenario; returns (name, report|None, error)."""
    try:
        report = run_scenario(scenario, _sim_config(cfg), _build_stack(cfg))
    except Exception as exc:  # noqa: BLE001 - per-scenario isolation
        return scenario.name, None, f"{type(exc).__name__}: {exc}"
    run_dir = os.path.join(cfg.out, scenario.name)
    os.makedirs(run_dir, exist_ok=True)
    _atomic_write(os.path.join(run_dir, "report.json"), report.to_json())
    _atomic_write(os.path.join(run_dir, "ticks.csv"), report.tick_csv())
    return scenario.name, report, ""


def _summary_row(name: str, report: Optional[RunReport], error: str) -> Dict[str, object]:
    if report is None:
        return {"scenario": name, "failure": error}
    m = report.metrics
    return {
        "scenario": name,
        "mode": report.mode,
        "completed": report.completed,
        "route_completion": m["route_completion"],
        "infraction_score": m["infraction_score"],
        "driving_score": m["driving_score"],
        "collisions": m["collisions"],
        "red_light_violations": m["red_light_violations"],
        "slow_rate": report.slow_rate(),
        "ticks": len(report.ticks),
        "failure": "",
    }


@click.group(context_settings={"auto_envvar_prefix": "FASIONAD"})
@click.version_option(package_name="dualdrive")
def main() -> None:
    """Dual-system motion planning simulator."""


def _config_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="JSON run configuration file.")(fn)
    fn = click.option("--mode", type=click.Choice(sorted(MODE_NAMES)), default=None,
                      help="Planning mode override.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Seed override.")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="Output directory (or file for sweep/qa).")(fn)
    fn = click.option("--endpoint", type=str, default=None,
                      help="Remote slow-system URL; the bundled oracle when unset.")(fn)
    fn = click.option("--timeout", type=float, default=None,
                      help="Remote request timeout in seconds.")(fn)
    fn = click.option("--jobs", type=int, default=None,
                      help="Parallel scenario workers (default: logical cores).")(fn)
    return fn


def _apply_overrides(cfg: RunConfig, mode, seed, out, endpoint, timeout, jobs) -> None:
    if mode is not None:
        cfg.mode = mode
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    if endpoint is not None:
        cfg.endpoint = endpoint
    if timeout is not None:
        if timeout <= 0:
            raise ConfigError(f"timeout: must be positive, got {timeout}")
        cfg.timeout = timeout
    if jobs is not None:
        if jobs < 1:
            raise ConfigError(f"jobs: must be a positive integer, got {jobs}")
        cfg.jobs = jobs


def _fail(exc: Exception, code: int) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


@main.command("run")
@_config_options
@click.option("--figures/--no-figures", "figures", default=None,
              help="Render per-run matplotlib figures (default: on).")
def cmd_run(config_path, mode, seed, out, endpoint, timeout, jobs, figures) -> None:
    """Run the configured scenarios and write reports, CSV logs, and plots."""
    try:
        cfg = load_run_config(config_path)
        _apply_overrides(cfg, mode, seed, out, endpoint, timeout, jobs)
        if figures is not None:
            cfg.figures = figures
        scenario_list = _resolve_scenarios(cfg)
        _sim_config(cfg)  # surface SimConfig field errors before any work
    except (ConfigError, ScenarioInvalidError, ValueError) as exc:
        _fail(exc, EXIT_CONFIG)

    os.makedirs(cfg.out, exist_ok=True)
    workers = cfg.jobs or os.cpu_count() or 1
    if workers == 1 or len(scenario_list) == 1:
        results = [_run_one(sc, cfg) for sc in scenario_list]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda sc: _run_one(sc, cfg), scenario_list))
    results.sort(key=lambda r: r[0])

    if cfg.figures:
        # matplotlib is not thread-safe; render sequentially after the runs.
        for name, report, _err in results:
            if report is not None:
                for path in plots.render_report_figures(
                    report, os.path.join(cfg.out, name)
                ):
                    click.echo(path)

    rows = [_summary_row(name, report, err) for name, report, err in results]
    failures = [r for r in rows if r["failure"]]
    summary = {
        "config": cfg.to_dict(),
        "scenarios": rows,
        "n_scenarios": len(rows),
        "n_failures": len(failures),
    }
    summary_path = os.path.join(cfg.out, "summary.json")
    _atomic_write(summary_path, json.dumps(summary, indent=2, sort_keys=True))
    for name, report, _err in results:
        if report is not None:
            click.echo(os.path.join(cfg.out, name, "report.json"))
            click.echo(os.path.join(cfg.out, name, "ticks.csv"))
    click.echo(summary_path)
    if failures:
        for row in failures:
            click.echo(f"error: {row['scenario']}: {row['failure']}", err=True)
        sys.exit(EXIT_RUNTIME)


SWEEP_COLUMNS = ("tau_r", "tau_b", "trigger_rate", "collisions", "avg_l2")


@main.command("sweep")
@_config_options
def cmd_sweep(config_path, mode, seed, out, endpoint, timeout, jobs) -> None:
    """Run the suite across a gate-threshold grid and write one CSV row each."""
    try:
        cfg = load_run_config(config_path)
        _apply_overrides(cfg, mode, seed, out, endpoint, timeout, jobs)
        if "tau_r" not in cfg.grid and "tau_b" not in cfg.grid:
            raise ConfigError("grid: sweep needs grid.tau_r and/or grid.tau_b")
        scenario_list = _resolve_scenarios(cfg)
    except (ConfigError, ScenarioInvalidError, ValueError) as exc:
        _fail(exc, EXIT_CONFIG)

    tau_rs = cfg.grid.get("tau_r", [cfg.tau_r])
    tau_bs = cfg.grid.get("tau_b", [cfg.tau_b])
    csv_path = cfg.out if cfg.out.endswith(".csv") else os.path.join(cfg.out, "sweep.csv")
    directory = os.path.dirname(csv_path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    rows: List[List[object]] = []
    try:
        for tau_r in sorted(tau_rs):
            for tau_b in sorted(tau_bs):
                point = RunConfig(**{**asdict(cfg), "tau_r": tau_r, "tau_b": tau_b,
                                     "grid": {}})
                plan_ticks = 0
                slow_ticks = 0
                collisions = 0
                l2s: List[float] = []
                for scenario in scenario_list:
                    report = run_scenario(scenario, _sim_config(point), _build_stack(point))
                    plans = [r for r in report.ticks if r.reason != ""]
                    plan_ticks += len(plans)
                    slow_ticks += sum(1 for r in plans if r.slow_invoked)
                    collisions += report.count_events("collision")
                    open_loop = report.metrics.get("open_loop")
                    if open_loop:
                        l2s.append(open_loop["l2_point"]["avg"])
                rate = slow_ticks / plan_ticks if plan_ticks else 0.0
                avg_l2 = sum(l2s) / len(l2s) if l2s else ""
                rows.append(
                    [tau_r, "inf" if math.isinf(tau_b) else tau_b,
                     rate, collisions, avg_l2]
                )
    except Exception as exc:  # noqa: BLE001 - simulation failure, not config
        _fail(exc, EXIT_RUNTIME)

    buf = [",".join(SWEEP_COLUMNS)]
    for row in rows:
        buf.append(",".join(str(v) for v in row))
    _atomic_write(csv_path, "\n".join(buf) + "\n")
    click.echo(csv_path)


@main.command("qa")
@click.argument("log_path", type=click.Path())
@click.option("--out", type=click.Path(), default=None,
              help="Output NDJSON path (default: <log dir>/qa.ndjson).")
def cmd_qa(log_path, out) -> None:
    """Rebuild scenes from a run report and export the QA dataset."""
    try:
        report = load_report(log_path)
    except LogNotFoundError as exc:
        _fail(exc, EXIT_CONFIG)
    except ValueError as exc:
        _fail(exc, EXIT_CONFIG)
    try:
        scenes = scenes_from_report(report)
        records = slowsys.generate_qa_dataset(scenes)
        out_path = out or os.path.join(os.path.dirname(log_path) or ".", "qa.ndjson")
        slowsys.write_qa_ndjson(records, out_path)
    except Exception as exc:  # noqa: BLE001
        _fail(exc, EXIT_RUNTIME)
    click.echo(out_path)


@main.command("validate")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Run configuration to validate.")
@click.option("--scenario", "scenario_path", type=click.Path(), default=None,
              help="Scenario file to validate.")
def cmd_validate(config_path, scenario_path) -> None:
    """Validate a config and/or scenario file without running anything."""
    if config_path is None and scenario_path is None:
        _fail(ConfigError("nothing to validate: pass --config and/or --scenario"),
              EXIT_CONFIG)
    try:
        if config_path is not None:
            cfg = load_run_config(config_path)
            # Round-trip identity is part of the config contract.
            if parse_run_config(cfg.to_dict()) != cfg:
                raise ConfigError("config: round-trip parse mismatch")
            _resolve_scenarios(cfg)
            click.echo(f"config ok: {config_path}")
        if scenario_path is not None:
            scenario = load_scenario(scenario_path)
            click.echo(f"scenario ok: {scenario.name}")
    except (ConfigError, ScenarioInvalidError) as exc:
        _fail(exc, EXIT_CONFIG)


if __name__ == "__main__":
    main()
