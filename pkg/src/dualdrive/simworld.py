"""Closed-loop 2D kinematic simulator, scenario schema, and evaluation metrics.

The loop: every replan_period ticks the fast system proposes candidates, the
reward model scores them, the gate decides whether to consult the slow
system, and guidance (if any) re-ranks the pick; a pure-pursuit tracker then
drives the selected plan between replans. Agents follow deterministic
scripts with time or proximity triggers. Everything in a report is derived
from config + seed, never from wall clock, so DualSync/FastOnly runs are
byte-reproducible.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from dualdrive import fusion, gate as gatemod, slowsys
from dualdrive.core import (
    EGO_HALF_LENGTH,
    EGO_HALF_WIDTH,
    AgentKind,
    AgentState,
    EgoState,
    Frame,
    LightState,
    MapElement,
    MapElementKind,
    NavigationCommand,
    Scene,
    Trajectory,
    transform_trajectory,
    wrap_angle,
)
from dualdrive.fastplan import SamplerConfig, sample_candidates
from dualdrive.geometry import (
    point_rect_distance,
    polyline_length,
    project_to_polyline,
    rects_overlap,
    segment_crosses_polyline,
)
from dualdrive.reward import RewardWeights, score_all, select_best

SCHEMA_VERSION = 1
LOOKAHEAD = 5.0              # pure-pursuit lookahead (m)
TRACKER_MAX_BRAKE = 4.0      # tracker braking authority (m/s^2)
TRACKER_MAX_ACCEL = 2.5      # tracker acceleration authority (m/s^2)
TRACKER_MAX_KAPPA = 0.3      # tracker curvature authority (1/m)
COLLISION_FACTOR = 0.5
RED_LIGHT_FACTOR = 0.7
ROUTE_DONE_MARGIN = 0.5      # remaining meters that count as completion


class ScenarioInvalidError(ValueError):
    """Scenario document fails schema or semantic validation."""


class ComponentMissingError(ValueError):
    """The planner stack lacks a component the requested mode needs."""


class HorizonTooShortError(ValueError):
    """Open-loop metrics need >= 6 waypoints at dt = 0.5 s."""


class LogNotFoundError(FileNotFoundError):
    """Referenced run report does not exist."""


class SimMode(enum.Enum):
    FAST_ONLY = "FastOnly"
    DUAL_SYNC = "DualSync"
    DUAL_ASYNC = "DualAsync"
    ALWAYS_SLOW = "AlwaysSlow"


@dataclass(frozen=True)
class SimConfig:
    dt_sim: float = 0.1
    max_ticks: int = 400
    replan_period: int = 5
    mode: SimMode = SimMode.DUAL_SYNC
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dt_sim <= 0.0:
            raise ValueError(f"dt_sim must be positive, got {self.dt_sim}")
        if self.replan_period < 1:
            raise ValueError(f"replan_period must be >= 1, got {self.replan_period}")
        if self.max_ticks < 1:
            raise ValueError(f"max_ticks must be >= 1, got {self.max_ticks}")


@dataclass(frozen=True)
class ScriptSegment:
    """One scripted control phase, latched when its trigger first fires.

    trigger_kind "time": fires when sim time >= trigger_value. "ego_gap":
    fires when the ego-agent center distance drops to trigger_value or less.
    With target_speed set, |accel| is the rate toward that speed (then hold);
    otherwise accel applies directly.
    """

    trigger_kind: str
    trigger_value: float
    accel: float = 0.0
    kappa: float = 0.0
    target_speed: Optional[float] = None

    def __post_init__(self) -> None:
        if self.trigger_kind not in ("time", "ego_gap"):
            raise ScenarioInvalidError(f"unknown trigger kind {self.trigger_kind!r}")


@dataclass(frozen=True)
class LightSwitch:
    t: float
    element_index: int
    state: LightState


@dataclass(frozen=True)
class Scenario:
    name: str
    scene: Scene
    scripts: Dict[str, Tuple[ScriptSegment, ...]] = field(default_factory=dict)
    expert: Optional[Trajectory] = None
    light_switches: Tuple[LightSwitch, ...] = ()
    description: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise ScenarioInvalidError("scenario name must be non-empty")
        agent_ids = {a.agent_id for a in self.scene.agents}
        for aid in self.scripts:
            if aid not in agent_ids:
                raise ScenarioInvalidError(f"script references unknown agent {aid!r}")
        for sw in self.light_switches:
            if not 0 <= sw.element_index < len(self.scene.map_elements):
                raise ScenarioInvalidError(
                    f"light switch references element {sw.element_index} out of range"
                )
            el = self.scene.map_elements[sw.element_index]
            if el.kind is not MapElementKind.TRAFFIC_LIGHT:
                raise ScenarioInvalidError(
                    f"light switch targets element {sw.element_index} which is {el.kind.value}"
                )
        if self.expert is not None:
            if self.expert.dt != 0.5 or len(self.expert) < 6:
                raise ScenarioInvalidError(
                    "expert trajectory must be sampled at dt=0.5 s with >= 6 points"
                )


# ------- scenario (de)serialization -------


def _element_to_dict(el: MapElement) -> Dict[str, object]:
    d: Dict[str, object] = {"kind": el.kind.value, "points": [list(p) for p in el.points]}
    if el.state is not None:
        d["state"] = el.state.value
    if el.limit is not None:
        d["limit"] = el.limit
    return d


def _element_from_dict(d: Dict[str, object], where: str) -> MapElement:
    try:
        kind = MapElementKind(d["kind"])
        points = tuple((float(x), float(y)) for x, y in d["points"])
        state = LightState(d["state"]) if "state" in d else None
        limit = float(d["limit"]) if "limit" in d else None
        return MapElement(kind, points, state, limit)
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioInvalidError(f"bad map element in {where}: {exc}") from exc


def scenario_to_dict(sc: Scenario) -> Dict[str, object]:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": sc.name,
        "description": sc.description,
        "command": sc.scene.command.value,
        "ego": {
            "x": sc.scene.ego.x,
            "y": sc.scene.ego.y,
            "heading": sc.scene.ego.heading,
            "speed": sc.scene.ego.speed,
            "accel": sc.scene.ego.accel,
        },
        "route": [list(p) for p in sc.scene.route],
        "map_elements": [_element_to_dict(el) for el in sc.scene.map_elements],
        "agents": [
            {
                "id": a.agent_id,
                "kind": a.kind.value,
                "x": a.x,
                "y": a.y,
                "heading": a.heading,
                "speed": a.speed,
                "half_length": a.half_length,
                "half_width": a.half_width,
                "script": [
                    {
                        "trigger": {"kind": s.trigger_kind, "value": s.trigger_value},
                        "accel": s.accel,
                        "kappa": s.kappa,
                        "target_speed": s.target_speed,
                    }
                    for s in sc.scripts.get(a.agent_id, ())
                ],
            }
            for a in sc.scene.agents
        ],
        "expert": [list(p) for p in sc.expert.points()] if sc.expert else None,
        "light_switches": [
            {"t": sw.t, "element": sw.element_index, "state": sw.state.value}
            for sw in sc.light_switches
        ],
    }


def scenario_from_dict(doc: Dict[str, object]) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioInvalidError("scenario document must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioInvalidError(f"unsupported schema_version {version!r}")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise ScenarioInvalidError("field 'name' must be a non-empty string")
    try:
        ego_d = doc["ego"]
        ego = EgoState(
            float(ego_d["x"]),
            float(ego_d["y"]),
            float(ego_d["heading"]),
            float(ego_d["speed"]),
            float(ego_d.get("accel", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioInvalidError(f"field 'ego' invalid: {exc}") from exc
    try:
        command = NavigationCommand(doc["command"])
    except (KeyError, ValueError) as exc:
        raise ScenarioInvalidError(f"field 'command' invalid: {exc}") from exc
    route_raw = doc.get("route")
    if not isinstance(route_raw, list) or len(route_raw) < 2:
        raise ScenarioInvalidError("field 'route' must list at least two points")
    route = tuple((float(x), float(y)) for x, y in route_raw)
    elements = tuple(
        _element_from_dict(el, f"map_elements[{i}]")
        for i, el in enumerate(doc.get("map_elements", []))
    )
    agents = []
    scripts: Dict[str, Tuple[ScriptSegment, ...]] = {}
    for i, a in enumerate(doc.get("agents", [])):
        try:
            agent = AgentState(
                str(a["id"]),
                AgentKind(a["kind"]),
                float(a["x"]),
                float(a["y"]),
                float(a["heading"]),
                float(a["speed"]),
                float(a["half_length"]),
                float(a["half_width"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioInvalidError(f"field 'agents[{i}]' invalid: {exc}") from exc
        agents.append(agent)
        segs = []
        for j, s in enumerate(a.get("script", [])):
            try:
                segs.append(
                    ScriptSegment(
                        str(s["trigger"]["kind"]),
                        float(s["trigger"]["value"]),
                        float(s.get("accel", 0.0)),
                        float(s.get("kappa", 0.0)),
                        None if s.get("target_speed") is None else float(s["target_speed"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioInvalidError(
                    f"field 'agents[{i}].script[{j}]' invalid: {exc}"
                ) from exc
        if segs:
            scripts[agent.agent_id] = tuple(segs)
    expert = None
    if doc.get("expert") is not None:
        pts = doc["expert"]
        if not isinstance(pts, list) or len(pts) < 6:
            raise ScenarioInvalidError("field 'expert' must list >= 6 points")
        expert = Trajectory.from_points([(float(x), float(y)) for x, y in pts], 0.5, Frame.WORLD)
    switches = []
    for i, sw in enumerate(doc.get("light_switches", [])):
        try:
            switches.append(
                LightSwitch(float(sw["t"]), int(sw["element"]), LightState(sw["state"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioInvalidError(f"field 'light_switches[{i}]' invalid: {exc}") from exc
    scene = Scene(0.0, ego, tuple(agents), elements, command, route)
    return Scenario(
        name=name,
        scene=scene,
        scripts=scripts,
        expert=expert,
        light_switches=tuple(switches),
        description=str(doc.get("description", "")),
    )


def save_scenario(sc: Scenario, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(sc), fh, indent=2, sort_keys=True)


def load_scenario(path: str) -> Scenario:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ScenarioInvalidError(f"cannot read scenario {path}: {exc}") from exc
    except ValueError as exc:
        raise ScenarioInvalidError(f"scenario {path} is not valid JSON: {exc}") from exc
    return scenario_from_dict(doc)


# ------- kinematics, collision, tracking -------


def step_kinematics(state: EgoState, accel: float, kappa: float, dt: float) -> EgoState:
    """One explicit kinematic step: speed clamped at 0, position advanced
    along the new heading."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    v = max(0.0, state.speed + accel * dt)
    heading = wrap_angle(state.heading + v * kappa * dt)
    return EgoState(
        state.x + v * math.cos(heading) * dt,
        state.y + v * math.sin(heading) * dt,
        heading,
        v,
        accel,
    )


def check_collision(
    x: float,
    y: float,
    heading: float,
    agents: Sequence[AgentState],
    half_length: float = EGO_HALF_LENGTH,
    half_width: float = EGO_HALF_WIDTH,
) -> Optional[AgentState]:
    """First agent whose footprint overlaps the ego footprint, else None."""
    for agent in agents:
        if rects_overlap(
            x, y, heading, half_length, half_width,
            agent.x, agent.y, agent.heading, agent.half_length, agent.half_width,
        ):
            return agent
    return None


@dataclass
class _PlanExec:
    """The world-frame plan currently being tracked."""

    points: List[Tuple[float, float]]
    speeds: Tuple[float, ...]
    t0: float
    dt: float


def pure_pursuit(ego: EgoState, plan: _PlanExec, now: float, dt_sim: float) -> Tuple[float, float]:
    """Tracking controls (accel, curvature) for the active plan.

    Steering: classic pure pursuit on the first plan point at least
    LOOKAHEAD away (the last point when none is). Speed: follow the plan's
    per-step speed profile, clamped to the tracker's authority.
    """
    target = plan.points[-1]
    for px, py in plan.points:
        if math.hypot(px - ego.x, py - ego.y) >= LOOKAHEAD:
            target = (px, py)
            break
    dx, dy = target[0] - ego.x, target[1] - ego.y
    dist = math.hypot(dx, dy)
    if dist < 0.1:
        kappa = 0.0
    else:
        alpha = wrap_angle(math.atan2(dy, dx) - ego.heading)
        kappa = 2.0 * math.sin(alpha) / dist
        kappa = max(-TRACKER_MAX_KAPPA, min(TRACKER_MAX_KAPPA, kappa))
    elapsed = now - plan.t0
    idx = int((elapsed + dt_sim) / plan.dt)
    target_v = plan.speeds[min(idx, len(plan.speeds) - 1)]
    accel = (target_v - ego.speed) / dt_sim
    accel = max(-TRACKER_MAX_BRAKE, min(TRACKER_MAX_ACCEL, accel))
    return accel, kappa


# ------- run report -------


@dataclass
class TickRow:
    """State at the start of one tick plus the decision/controls applied."""

    tick: int
    t: float
    x: float
    y: float
    heading: float
    speed: float
    accel: float
    kappa: float
    mode: str
    reason: str
    mu: float
    b: float
    reward: float
    chosen_id: int
    slow_invoked: bool
    feedback_latency: float
    guidance_bonus: float
    agents: List[Dict[str, object]]
    lights: List[str]

    def to_dict(self) -> Dict[str, object]:
        return {
            "tick": self.tick,
            "t": self.t,
            "x": self.x,
            "y": self.y,
            "heading": self.heading,
            "speed": self.speed,
            "accel": self.accel,
            "kappa": self.kappa,
            "mode": self.mode,
            "reason": self.reason,
            "mu": self.mu,
            "b": self.b,
            "reward": self.reward,
            "chosen_id": self.chosen_id,
            "slow_invoked": self.slow_invoked,
            "feedback_latency": self.feedback_latency,
            "guidance_bonus": self.guidance_bonus,
            "agents": self.agents,
            "lights": self.lights,
        }


CSV_COLUMNS = (
    "tick", "t", "x", "y", "heading", "speed", "accel", "kappa",
    "mode", "reason", "mu", "b", "reward", "chosen_id", "slow_invoked",
    "feedback_latency", "guidance_bonus",
)


@dataclass
class Event:
    t: float
    kind: str
    detail: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {"t": self.t, "kind": self.kind, "detail": self.detail}


@dataclass
class RunReport:
    scenario: str
    mode: str
    seed: int
    config: Dict[str, object]
    static: Dict[str, object]
    ticks: List[TickRow] = field(default_factory=list)
    events: List[Event] = field(default_factory=list)
    route_completion: float = 0.0
    completed: bool = False
    metrics: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "report_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "static": self.static,
            "ticks": [row.to_dict() for row in self.ticks],
            "events": [ev.to_dict() for ev in self.events],
            "route_completion": self.route_completion,
            "completed": self.completed,
            "metrics": self.metrics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def tick_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.ticks:
            d = row.to_dict()
            writer.writerow([d[c] for c in CSV_COLUMNS])
        return buf.getvalue()

    def count_events(self, kind: str) -> int:
        return sum(1 for ev in self.events if ev.kind == kind)

    def slow_rate(self) -> float:
        """Fraction of planning ticks on which the slow system was invoked."""
        plans = [row for row in self.ticks if row.reason != ""]
        if not plans:
            return 0.0
        return sum(1 for row in plans if row.slow_invoked) / len(plans)


def report_from_dict(doc: Dict[str, object]) -> RunReport:
    ticks = [
        TickRow(**{k: row[k] for k in row})  # type: ignore[arg-type]
        for row in doc.get("ticks", [])
    ]
    events = [Event(ev["t"], ev["kind"], ev.get("detail", {})) for ev in doc.get("events", [])]
    return RunReport(
        scenario=doc["scenario"],
        mode=doc["mode"],
        seed=doc["seed"],
        config=doc.get("config", {}),
        static=doc.get("static", {}),
        ticks=ticks,
        events=events,
        route_completion=doc.get("route_completion", 0.0),
        completed=doc.get("completed", False),
        metrics=doc.get("metrics", {}),
    )


def load_report(path: str) -> RunReport:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise LogNotFoundError(f"run report not found: {path}") from exc
    except ValueError as exc:
        raise ValueError(f"run report {path} is not valid JSON: {exc}") from exc
    return report_from_dict(doc)


def scenes_from_report(report: RunReport) -> List[Scene]:
    """Rebuild the per-tick Scene snapshots a report recorded."""
    route = tuple((float(x), float(y)) for x, y in report.static["route"])
    command = NavigationCommand(report.static["command"])
    base_elements = [
        _element_from_dict(el, f"static.map_elements[{i}]")
        for i, el in enumerate(report.static["map_elements"])
    ]
    light_indices = [
        i for i, el in enumerate(base_elements) if el.kind is MapElementKind.TRAFFIC_LIGHT
    ]
    scenes = []
    for row in report.ticks:
        elements = list(base_elements)
        for idx, state_name in zip(light_indices, row.lights):
            el = elements[idx]
            elements[idx] = MapElement(el.kind, el.points, LightState(state_name), el.limit)
        agents = tuple(
            AgentState(
                str(a["id"]),
                AgentKind(a["kind"]),
                float(a["x"]),
                float(a["y"]),
                float(a["heading"]),
                float(a["speed"]),
                float(a["half_length"]),
                float(a["half_width"]),
            )
            for a in row.agents
        )
        scenes.append(
            Scene(row.t, EgoState(row.x, row.y, row.heading, row.speed, row.accel),
                  agents, tuple(elements), command, route)
        )
    return scenes


# ------- planner stack -------


SlowFn = Callable[[Scene, Trajectory, Tuple[slowsys.VisualPrompt, slowsys.BevPrompt]], object]


@dataclass
class PlannerStack:
    """Everything run_scenario needs besides the scenario and sim config."""

    sampler: SamplerConfig
    weights: RewardWeights
    gate_cfg: gatemod.GateConfig
    embeddings: fusion.ActionEmbeddings
    projections: fusion.ProjectionSet
    slow_fn: Optional[SlowFn]
    camera: slowsys.CameraModel
    guidance_strength: float = fusion.GUIDANCE_STRENGTH


def default_stack(seed: int = 0) -> PlannerStack:
    return PlannerStack(
        sampler=SamplerConfig(),
        weights=RewardWeights(),
        gate_cfg=gatemod.GateConfig(),
        embeddings=fusion.ActionEmbeddings.seeded(seed),
        projections=fusion.ProjectionSet.seeded(seed),
        slow_fn=slowsys.oracle_feedback,
        camera=slowsys.DEFAULT_CAMERA,
        guidance_strength=fusion.GUIDANCE_STRENGTH,
    )


def _require_components(stack: PlannerStack, mode: SimMode) -> None:
    base = ("sampler", "weights", "gate_cfg")
    slow = ("embeddings", "projections", "slow_fn", "camera")
    needed = base if mode is SimMode.FAST_ONLY else base + slow
    for name in needed:
        if getattr(stack, name) is None:
            raise ComponentMissingError(f"planner stack missing {name!r} for mode {mode.value}")


# ------- the closed loop -------


@dataclass
class _AgentRuntime:
    state: AgentState
    segments: Tuple[ScriptSegment, ...]
    latched: List[bool]
    accel: float = 0.0
    kappa: float = 0.0
    target_speed: Optional[float] = None

    def update_controls(self, now: float, ego: EgoState) -> None:
        for i, seg in enumerate(self.segments):
            if self.latched[i]:
                continue
            if seg.trigger_kind == "time":
                fired = now >= seg.trigger_value
            else:
                gap = math.hypot(self.state.x - ego.x, self.state.y - ego.y)
                fired = gap <= seg.trigger_value
            if fired:
                self.latched[i] = True
        # Last latched segment wins.
        for i in range(len(self.segments) - 1, -1, -1):
            if self.latched[i]:
                seg = self.segments[i]
                self.accel, self.kappa, self.target_speed = seg.accel, seg.kappa, seg.target_speed
                return

    def step(self, dt: float) -> None:
        s = self.state
        if self.target_speed is not None:
            gap = self.target_speed - s.speed
            rate = abs(self.accel) if self.accel != 0.0 else TRACKER_MAX_ACCEL
            a = math.copysign(min(abs(gap) / dt, rate), gap) if gap != 0.0 else 0.0
        else:
            a = self.accel
        v = max(0.0, s.speed + a * dt)
        heading = wrap_angle(s.heading + v * self.kappa * dt)
        self.state = AgentState(
            s.agent_id, s.kind,
            s.x + v * math.cos(heading) * dt,
            s.y + v * math.sin(heading) * dt,
            heading, v, s.half_length, s.half_width,
        )


def _stack_config_echo(cfg: SimConfig, stack: PlannerStack) -> Dict[str, object]:
    return {
        "dt_sim": cfg.dt_sim,
        "max_ticks": cfg.max_ticks,
        "replan_period": cfg.replan_period,
        "mode": cfg.mode.value,
        "seed": cfg.seed,
        "tau_r": stack.gate_cfg.tau_r,
        "tau_b": stack.gate_cfg.tau_b,
        "weights": list(stack.weights.as_tuple()),
        "n_k": stack.sampler.n_k,
        "guidance_strength": stack.guidance_strength,
    }


def run_scenario(scenario: Scenario, cfg: SimConfig, stack: PlannerStack) -> RunReport:
    """Simulate one scenario under the configured planning mode."""
    _require_components(stack, cfg.mode)

    ego = scenario.scene.ego
    agents = {
        a.agent_id: _AgentRuntime(a, scenario.scripts.get(a.agent_id, ()),
                                  [False] * len(scenario.scripts.get(a.agent_id, ())))
        for a in scenario.scene.agents
    }
    agent_order = [a.agent_id for a in scenario.scene.agents]
    elements = list(scenario.scene.map_elements)
    light_indices = [i for i, el in enumerate(elements) if el.kind is MapElementKind.TRAFFIC_LIGHT]
    switches = sorted(scenario.light_switches, key=lambda sw: (sw.t, sw.element_index))
    next_switch = 0

    route = scenario.scene.route
    route_len = polyline_length(route)
    s_start, _ = project_to_polyline(ego.x, ego.y, route)
    span = max(route_len - s_start, 1e-9)
    max_s = s_start

    gate = gatemod.UncertaintyGate(stack.gate_cfg)
    report = RunReport(
        scenario=scenario.name,
        mode=cfg.mode.value,
        seed=cfg.seed,
        config=_stack_config_echo(cfg, stack),
        static={
            "map_elements": [_element_to_dict(el) for el in scenario.scene.map_elements],
            "route": [list(p) for p in route],
            "command": scenario.scene.command.value,
        },
    )

    plan: Optional[_PlanExec] = None
    first_plan_world: Optional[Trajectory] = None
    last = {
        "mode": "", "reason": "", "mu": 0.0, "b": 0.0, "reward": 0.0,
        "chosen_id": -1, "latency": 0.0, "bonus": 0.0,
    }
    executor: Optional[ThreadPoolExecutor] = None
    pending: Optional[Future] = None
    arrived_feedback = None
    crossed_lights: set = set()

    try:
        for tick in range(cfg.max_ticks):
            now = tick * cfg.dt_sim
            while next_switch < len(switches) and switches[next_switch].t <= now:
                sw = switches[next_switch]
                el = elements[sw.element_index]
                elements[sw.element_index] = MapElement(el.kind, el.points, sw.state, el.limit)
                next_switch += 1

            agent_states = tuple(agents[aid].state for aid in agent_order)
            scene = Scene(now, ego, agent_states, tuple(elements), scenario.scene.command, route)

            planned = tick % cfg.replan_period == 0
            slow_invoked = False
            if planned:
                cset = sample_candidates(scene, stack.sampler)
                breakdowns = score_all(cset, scene, stack.weights)
                best_id, best_bd = select_best(cset, scene, stack.weights, breakdowns)
                decision = gate.observe(best_bd.total)
                if cfg.mode is SimMode.FAST_ONLY:
                    engaged, reason = False, gatemod.Reason.ROUTINE
                elif cfg.mode is SimMode.ALWAYS_SLOW:
                    engaged, reason = True, gatemod.Reason.ROUTINE
                else:
                    engaged = decision.mode is gatemod.Mode.SLOW
                    reason = decision.reason

                feedback = None
                latency = 0.0
                if cfg.mode is SimMode.DUAL_ASYNC and pending is not None and pending.done():
                    try:
                        arrived_feedback = pending.result()
                    except (slowsys.RemoteTimeoutError, slowsys.MalformedResponseError) as exc:
                        report.events.append(
                            Event(now, "slow_fallback", {"error": type(exc).__name__})
                        )
                        arrived_feedback = None
                    pending = None
                if engaged:
                    slow_invoked = True
                    best_traj = cset.by_id(best_id).trajectory
                    prompts = (
                        slowsys.project_waypoints(best_traj, stack.camera, best_id),
                        slowsys.build_bev_prompt(scene),
                    )
                    if cfg.mode is SimMode.DUAL_ASYNC:
                        if executor is None:
                            executor = ThreadPoolExecutor(max_workers=1)
                        if pending is None:
                            pending = executor.submit(stack.slow_fn, scene, best_traj, prompts)
                        feedback = arrived_feedback
                    else:
                        try:
                            feedback = stack.slow_fn(scene, best_traj, prompts)
                        except (slowsys.RemoteTimeoutError, slowsys.MalformedResponseError) as exc:
                            report.events.append(
                                Event(now, "slow_fallback", {"error": type(exc).__name__})
                            )
                            feedback = None

                if feedback is not None:
                    token = fusion.build_ego_token(scene, cset.by_id(best_id), best_bd)
                    guidance_vec, _w = fusion.cross_attend(
                        token, stack.embeddings, stack.projections
                    )
                    guided = fusion.apply_guidance(
                        cset, breakdowns, feedback, guidance_vec, stack.guidance_strength
                    )
                    chosen_id, bonus = guided.candidate_id, guided.bonus
                    latency = feedback.latency
                else:
                    chosen_id, bonus = best_id, 0.0

                chosen_world = transform_trajectory(
                    cset.by_id(chosen_id).trajectory, ego, Frame.WORLD
                )
                if first_plan_world is None:
                    first_plan_world = chosen_world
                plan = _PlanExec(
                    list(chosen_world.points()),
                    cset.by_id(chosen_id).speeds,
                    now,
                    stack.sampler.dt,
                )
                last = {
                    "mode": "Slow" if slow_invoked else "Fast",
                    "reason": reason.value,
                    "mu": decision.params.mu,
                    "b": decision.params.b,
                    "reward": best_bd.total,
                    "chosen_id": chosen_id,
                    "latency": latency,
                    "bonus": bonus,
                }

            accel, kappa = pure_pursuit(ego, plan, now, cfg.dt_sim)
            report.ticks.append(
                TickRow(
                    tick=tick, t=now,
                    x=ego.x, y=ego.y, heading=ego.heading, speed=ego.speed,
                    accel=accel, kappa=kappa,
                    mode=last["mode"], reason=last["reason"] if planned else "",
                    mu=last["mu"], b=last["b"], reward=last["reward"],
                    chosen_id=last["chosen_id"],
                    slow_invoked=slow_invoked,
                    feedback_latency=last["latency"],
                    guidance_bonus=last["bonus"],
                    agents=[
                        {
                            "id": a.agent_id, "kind": a.kind.value,
                            "x": a.x, "y": a.y, "heading": a.heading, "speed": a.speed,
                            "half_length": a.half_length, "half_width": a.half_width,
                        }
                        for a in agent_states
                    ],
                    lights=[elements[i].state.value for i in light_indices],
                )
            )

            prev_pos = (ego.x, ego.y)
            for aid in agent_order:
                agents[aid].update_controls(now, ego)
                agents[aid].step(cfg.dt_sim)
            ego = step_kinematics(ego, accel, kappa, cfg.dt_sim)

            post_agents = tuple(agents[aid].state for aid in agent_order)
            hit = check_collision(ego.x, ego.y, ego.heading, post_agents)
            if hit is not None:
                report.events.append(
                    Event(now + cfg.dt_sim, "collision", {"agent": hit.agent_id})
                )
                break
            for i in light_indices:
                el = elements[i]
                if i in crossed_lights or el.state is not LightState.RED:
                    continue
                if segment_crosses_polyline(prev_pos, (ego.x, ego.y), el.points):
                    crossed_lights.add(i)
                    report.events.append(
                        Event(now + cfg.dt_sim, "red_light", {"element": i})
                    )

            s_here, _ = project_to_polyline(ego.x, ego.y, route)
            max_s = max(max_s, s_here)
            if route_len - max_s <= ROUTE_DONE_MARGIN:
                report.completed = True
                break
    finally:
        if executor is not None:
            executor.shutdown(wait=False, cancel_futures=True)

    report.route_completion = min(max(0.0, (max_s - s_start) / span), 1.0)
    if report.completed:
        report.route_completion = 1.0
    report.metrics = closed_loop_metrics(report)
    if scenario.expert is not None and first_plan_world is not None:
        try:
            report.metrics["open_loop"] = open_loop_metrics(
                first_plan_world, scenario.expert, scenario.scene.agents
            )
        except HorizonTooShortError:
            pass
    return report


# ------- metrics -------


def round_half_up(value: float, decimals: int = 2) -> float:
    """Decimal round-half-up (0.185 -> 0.19 at 2 decimals), unlike bankers'."""
    q = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


def average_horizons(values: Sequence[float], decimals: int = 2) -> float:
    """Mean over per-horizon values, reported with round-half-up."""
    if not values:
        raise ValueError("no horizon values to average")
    return round_half_up(sum(values) / len(values), decimals)


def open_loop_metrics(
    predicted: Trajectory,
    expert: Trajectory,
    agents: Sequence[AgentState] = (),
    horizons: Sequence[float] = (1.0, 2.0, 3.0),
) -> Dict[str, object]:
    """L2 and collision metrics of one predicted trajectory vs. an expert.

    Both trajectories must share the 0.5 s grid with >= 6 points and the same
    frame. Two L2 conventions are reported: displacement at exactly t
    ("point") and the mean over all frames up to t ("frame"). collision@t is
    1 when the predicted pose overlaps any constant-velocity-propagated agent
    at or before t. The "avg" entries average the three horizons with
    round-half-up to 2 decimals.
    """
    for name, traj in (("predicted", predicted), ("expert", expert)):
        if len(traj) < 6:
            raise HorizonTooShortError(f"{name} trajectory has {len(traj)} points, need >= 6")
        if abs(traj.dt - 0.5) > 1e-9:
            raise ValueError(f"{name} trajectory must be sampled at dt=0.5 s, got {traj.dt}")
    if predicted.frame is not expert.frame:
        raise ValueError("predicted and expert must share a frame")

    pred = predicted.points()
    exp = expert.points()
    n = min(len(pred), len(exp))
    disp = [math.hypot(pred[i][0] - exp[i][0], pred[i][1] - exp[i][1]) for i in range(n)]

    l2_point: Dict[str, float] = {}
    l2_frame: Dict[str, float] = {}
    collision: Dict[str, float] = {}
    prev = None
    heading = 0.0
    collided_by: List[bool] = []
    hit_so_far = False
    for i in range(len(pred)):
        t = (i + 1) * 0.5
        if prev is not None:
            dx, dy = pred[i][0] - prev[0], pred[i][1] - prev[1]
            if math.hypot(dx, dy) > 1e-9:
                heading = math.atan2(dy, dx)
        else:
            dx, dy = pred[i]
            if math.hypot(dx, dy) > 1e-9:
                heading = math.atan2(dy, dx)
        for agent in agents:
            ax = agent.x + agent.speed * t * math.cos(agent.heading)
            ay = agent.y + agent.speed * t * math.sin(agent.heading)
            if rects_overlap(
                pred[i][0], pred[i][1], heading, EGO_HALF_LENGTH, EGO_HALF_WIDTH,
                ax, ay, agent.heading, agent.half_length, agent.half_width,
            ):
                hit_so_far = True
        collided_by.append(hit_so_far)
        prev = pred[i]

    for t in horizons:
        idx = int(round(t / 0.5)) - 1
        if idx >= n:
            raise HorizonTooShortError(f"horizon {t} s exceeds the common {n}-point span")
        key = f"{t:g}s"
        l2_point[key] = disp[idx]
        l2_frame[key] = sum(disp[: idx + 1]) / (idx + 1)
        collision[key] = 1.0 if collided_by[min(idx, len(collided_by) - 1)] else 0.0

    keys = [f"{t:g}s" for t in horizons]
    return {
        "l2_point": {**l2_point, "avg": average_horizons([l2_point[k] for k in keys])},
        "l2_frame": {**l2_frame, "avg": average_horizons([l2_frame[k] for k in keys])},
        "collision": {**collision, "avg": average_horizons([collision[k] for k in keys])},
    }


def closed_loop_metrics(
    report: RunReport,
    collision_factor: float = COLLISION_FACTOR,
    red_light_factor: float = RED_LIGHT_FACTOR,
) -> Dict[str, object]:
    """Route completion, multiplicative infraction score, and their product."""
    collisions = report.count_events("collision")
    red_lights = report.count_events("red_light")
    rc = min(max(report.route_completion, 0.0), 1.0)
    infraction = (collision_factor ** collisions) * (red_light_factor ** red_lights)
    return {
        "route_completion": rc,
        "infraction_score": infraction,
        "driving_score": rc * infraction,
        "collisions": collisions,
        "red_light_violations": red_lights,
        "completed": report.completed,
    }
