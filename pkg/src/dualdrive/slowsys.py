"""The slow system: prompt construction, ground-truth QA, and feedback.

Two interchangeable back ends produce SlowFeedback: a deterministic rule
oracle (used in tests and offline runs) and a remote JSON service client, so
a real reasoning model can be attached over the wire without code changes.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import requests

from dualdrive.core import (
    DEFAULT_QUERIES,
    AgentKind,
    AgentState,
    FeedbackSource,
    Frame,
    LatAction,
    LightState,
    LonAction,
    MapElement,
    MapElementKind,
    MetaAction,
    NavigationCommand,
    PlanningState,
    Scene,
    SlowFeedback,
    Trajectory,
)
from dualdrive.reward import speed_limit

BEV_AGENT_RANGE = 50.0        # agents beyond this are omitted from the prompt (m)
LIGHT_DETECTION_RANGE = 40.0  # react to red lights inside this range (m)
STOP_SIGN_RANGE = 30.0        # react to stop lines inside this range (m)
LEAD_GAP = 10.0               # lead-vehicle query range (m)
PED_RANGE = 20.0              # pedestrian-in-path query range (m)
INTERSECTION_RANGE = 20.0     # intersection query range (m)
CORRIDOR_HALF_WIDTH = 2.0     # own-lane corridor half width (m)
ADJACENT_LANE_OFFSET = 3.5    # adjacent lane center offset (m)

# The five QA aspects, in category order.
QA_TEMPLATE: Tuple[str, ...] = (
    "Describe the driving scene around the ego vehicle.",
    "Which traffic lights or signs are relevant ahead?",
    "Which nearby road users most affect the plan?",
    "Answer each planning query with a yes/no bit.",
    "What high-level actions should the vehicle take next?",
)

QA_CATEGORIES: Tuple[str, ...] = (
    "SceneAnalysis",
    "TrafficSign",
    "KeyObject",
    "PlanningState",
    "HighLevelPlan",
)


class RemoteTimeoutError(RuntimeError):
    """The remote slow system did not answer within the deadline."""


class MalformedResponseError(ValueError):
    """The remote slow system answered with an invalid payload."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    mount_height: float = 1.5
    pitch: float = 0.0

    def __post_init__(self) -> None:
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.mount_height <= 0.0:
            raise ValueError("mount height must be positive")


DEFAULT_CAMERA = CameraModel(fx=1000.0, fy=1000.0, cx=800.0, cy=450.0, width=1600, height=900)


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float
    in_frame: bool


@dataclass(frozen=True)
class VisualPrompt:
    pixel_points: Tuple[PixelPoint, ...]
    trajectory_id: Optional[int] = None


@dataclass(frozen=True)
class BevPrompt:
    text: str

    def lines(self) -> List[str]:
        return self.text.splitlines()


@dataclass(frozen=True)
class QaRecord:
    category: str
    question: str
    answer: object  # str, list of 0/1 ints, or list of {"long","lat"} dicts

    def __post_init__(self) -> None:
        if self.category not in QA_CATEGORIES:
            raise ValueError(f"unknown QA category {self.category!r}")

    def to_dict(self) -> Dict[str, object]:
        return {"category": self.category, "question": self.question, "answer": self.answer}


def project_point(cam: CameraModel, x: float, y: float, z: float) -> Tuple[float, float, float]:
    """Pinhole-project a point given in vehicle coords (x fwd, y left, z up).

    Positive pitch tilts the camera downward. Returns (u, v, x') where x' is
    the depth along the optical axis after the pitch rotation; u/v are NaN
    when the point sits essentially in the camera plane.
    """
    cphi, sphi = math.cos(cam.pitch), math.sin(cam.pitch)
    xp = x * cphi - z * sphi
    zp = x * sphi + z * cphi
    if xp <= 1e-9:
        return math.nan, math.nan, xp
    u = cam.cx + cam.fx * (-y / xp)
    v = cam.cy + cam.fy * (-zp / xp)
    return u, v, xp


def project_waypoints(
    traj: Trajectory, cam: CameraModel, trajectory_id: Optional[int] = None
) -> VisualPrompt:
    """Project ego-frame waypoints as ground-plane points into the image.

    The ground sits mount_height below the camera (z = -mount_height).
    Points with post-pitch depth x' <= 0.1 m are flagged out-of-frame, as are
    points projecting outside the pixel bounds.
    """
    if traj.frame is not Frame.EGO:
        raise ValueError("project_waypoints expects an ego-frame trajectory")
    pts = []
    for wp in traj.waypoints:
        u, v, xp = project_point(cam, wp.x, wp.y, -cam.mount_height)
        in_frame = xp > 0.1 and 0.0 <= u < cam.width and 0.0 <= v < cam.height
        pts.append(PixelPoint(u, v, in_frame))
    return VisualPrompt(tuple(pts), trajectory_id)


def write_overlay_svg(prompt: VisualPrompt, cam: CameraModel, path: str) -> None:
    """Write the visual prompt as an SVG overlay (frame + projected path)."""
    visible = [(p.u, p.v) for p in prompt.pixel_points if p.in_frame]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{cam.width}" height="{cam.height}">',
        f'<rect width="{cam.width}" height="{cam.height}" fill="none" stroke="black"/>',
    ]
    if len(visible) > 1:
        pts = " ".join(f"{u:.1f},{v:.1f}" for u, v in visible)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="green" stroke-width="3"/>')
    for u, v in visible:
        parts.append(f'<circle cx="{u:.1f}" cy="{v:.1f}" r="5" fill="green"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


# ------- ground-truth scene queries -------


def _to_ego(scene: Scene, x: float, y: float) -> Tuple[float, float]:
    c, s = math.cos(scene.ego.heading), math.sin(scene.ego.heading)
    dx, dy = x - scene.ego.x, y - scene.ego.y
    return c * dx + s * dy, -s * dx + c * dy


def _agent_range_bearing(scene: Scene, agent: AgentState) -> Tuple[float, float]:
    ex, ey = _to_ego(scene, agent.x, agent.y)
    return math.hypot(ex, ey), math.atan2(ey, ex)


def element_distance_ahead(scene: Scene, el: MapElement) -> Optional[float]:
    """Ego-frame forward distance to a map element, None if behind/off-corridor."""
    best = None
    for px, py in el.points:
        ex, ey = _to_ego(scene, px, py)
        if ex > 0.0 and abs(ey) <= 6.0:
            best = ex if best is None else min(best, ex)
    return best


def _nearest_red_light(scene: Scene) -> Optional[float]:
    dists = [
        element_distance_ahead(scene, el)
        for el in scene.map_elements
        if el.kind is MapElementKind.TRAFFIC_LIGHT and el.state is LightState.RED
    ]
    dists = [d for d in dists if d is not None]
    return min(dists) if dists else None


def _nearest_stop_line(scene: Scene) -> Optional[float]:
    dists = [
        element_distance_ahead(scene, el)
        for el in scene.map_elements
        if el.kind is MapElementKind.STOP_LINE
    ]
    dists = [d for d in dists if d is not None]
    return min(dists) if dists else None


def _vehicle_in_box(scene: Scene, x_lo: float, x_hi: float, y_lo: float, y_hi: float) -> bool:
    for agent in scene.agents:
        ex, ey = _to_ego(scene, agent.x, agent.y)
        if x_lo < ex <= x_hi and y_lo <= ey <= y_hi:
            return True
    return False


def evaluate_planning_state(scene: Scene) -> PlanningState:
    """Answer the default K=8 planning queries from simulator ground truth.

    The same evaluator backs both the oracle feedback and the QA dataset, so
    their bits can never disagree. Lane-change feasibility is purely
    geometric (no occupant in the adjacent corridor); there is no lane graph.
    """
    lead = False
    pedestrian = False
    for agent in scene.agents:
        ex, ey = _to_ego(scene, agent.x, agent.y)
        if agent.kind in (AgentKind.CAR, AgentKind.CYCLIST, AgentKind.STATIC):
            if 0.0 < ex <= LEAD_GAP and abs(ey) <= CORRIDOR_HALF_WIDTH:
                lead = True
        if agent.kind is AgentKind.PEDESTRIAN:
            if 0.0 < ex <= PED_RANGE and abs(ey) <= CORRIDOR_HALF_WIDTH + 0.5:
                pedestrian = True

    red = _nearest_red_light(scene)
    stop_line = _nearest_stop_line(scene)

    half = ADJACENT_LANE_OFFSET / 2.0
    left_free = not _vehicle_in_box(scene, -6.0, 15.0, half, ADJACENT_LANE_OFFSET + half)
    right_free = not _vehicle_in_box(scene, -6.0, 15.0, -(ADJACENT_LANE_OFFSET + half), -half)

    intersection = False
    for el in scene.map_elements:
        if el.kind in (MapElementKind.TRAFFIC_LIGHT, MapElementKind.CROSSWALK):
            d = element_distance_ahead(scene, el)
            if d is not None and d <= INTERSECTION_RANGE:
                intersection = True
                break

    bits = (
        lead,
        red is not None and red <= LIGHT_DETECTION_RANGE,
        pedestrian,
        stop_line is not None and stop_line <= STOP_SIGN_RANGE,
        left_free,
        right_free,
        scene.ego.speed > speed_limit(scene),
        intersection,
    )
    return PlanningState(bits, DEFAULT_QUERIES)


def stopping_distance(speed: float) -> float:
    """Distance needed to stop from `speed` at 3 m/s^2, plus a 2 m margin."""
    return speed * speed / 6.0 + 2.0


def build_bev_prompt(scene: Scene) -> BevPrompt:
    """Structured top-down text: ego line, light/sign lines, one agent line
    per agent within 50 m, sorted by range ascending (ties by id)."""
    lines = [
        f"ego speed {scene.ego.speed:.1f} command {scene.command.value}",
    ]
    red = _nearest_red_light(scene)
    if red is not None:
        lines.append(f"red light ahead {red:.1f}")
    stop_line = _nearest_stop_line(scene)
    if stop_line is not None:
        lines.append(f"stop line ahead {stop_line:.1f}")
    limit = speed_limit(scene)
    lines.append(f"speed limit {limit:.1f}")

    ranged = []
    for agent in scene.agents:
        rng, bearing = _agent_range_bearing(scene, agent)
        if rng <= BEV_AGENT_RANGE:
            ranged.append((rng, agent.agent_id, bearing, agent))
    ranged.sort(key=lambda t: (t[0], t[1]))
    for rng, _aid, bearing, agent in ranged:
        rel = agent.speed - scene.ego.speed
        lines.append(
            f"{agent.kind.value} range {rng:.1f} bearing {math.degrees(bearing):.1f} relspeed {rel:.1f}"
        )
    return BevPrompt("\n".join(lines))


def _command_lateral(command: NavigationCommand) -> LatAction:
    if command is NavigationCommand.TURN_LEFT:
        return LatAction.TURN_LEFT
    if command is NavigationCommand.TURN_RIGHT:
        return LatAction.TURN_RIGHT
    return LatAction.KEEP_LANE


def plan_from_rules(scene: Scene, state: PlanningState) -> Tuple[Tuple[MetaAction, ...], str]:
    """Deterministic meta-action plan plus a one-line rule trace."""
    ego_speed = scene.ego.speed
    envelope = stopping_distance(ego_speed)
    red = _nearest_red_light(scene)
    stop_line = _nearest_stop_line(scene)

    hazard = None
    if red is not None and red <= LIGHT_DETECTION_RANGE:
        hazard = ("red light", red)
    if stop_line is not None and stop_line <= STOP_SIGN_RANGE:
        if hazard is None or stop_line < hazard[1]:
            hazard = ("stop line", stop_line)

    steady = MetaAction(LonAction.KEEP_SPEED, _command_lateral(scene.command))

    if hazard is not None:
        kind, dist = hazard
        lon = LonAction.STOP if dist <= envelope else LonAction.DECELERATE
        primary = MetaAction(lon, LatAction.KEEP_LANE)
        trace = f"{kind} at {dist:.1f} m, stopping envelope {envelope:.1f} m -> {lon.value}"
        return (primary, steady), trace

    if state.get("pedestrian-in-path"):
        lon = LonAction.STOP if ego_speed < 3.0 else LonAction.DECELERATE
        return (
            (MetaAction(lon, LatAction.KEEP_LANE), steady),
            f"pedestrian in path -> {lon.value}, hold lane",
        )

    if state.get("lead-vehicle-within-10m"):
        if state.get("lane-change-feasible-left"):
            lat = LatAction.CHANGE_LEFT
        elif state.get("lane-change-feasible-right"):
            lat = LatAction.CHANGE_RIGHT
        else:
            lat = LatAction.KEEP_LANE
        return (
            (MetaAction(LonAction.DECELERATE, lat), steady),
            f"lead vehicle within {LEAD_GAP:.0f} m -> Decelerate, {lat.value}",
        )

    if state.get("speed-over-limit"):
        return (
            (MetaAction(LonAction.DECELERATE, LatAction.KEEP_LANE), steady),
            "speed over limit -> Decelerate",
        )

    return (steady,), "no hazards -> KeepSpeed"


def oracle_feedback(
    scene: Scene,
    candidate: Trajectory,
    prompts: Tuple[VisualPrompt, BevPrompt],
) -> SlowFeedback:
    """Rule-based stand-in for the remote reasoner: pure and deterministic."""
    state = evaluate_planning_state(scene)
    plan, trace = plan_from_rules(scene, state)
    _visual, bev = prompts
    return SlowFeedback(
        planning_state=state,
        plan=plan,
        scene_description=bev.text,
        analysis=trace,
        source=FeedbackSource.ORACLE,
        latency=0.0,
    )


# ------- remote protocol -------


def _parse_remote_payload(payload: object, k: int) -> Tuple[PlanningState, Tuple[MetaAction, ...], str, str]:
    if not isinstance(payload, dict):
        raise MalformedResponseError("response is not a JSON object")
    bits = payload.get("planning_state")
    if not isinstance(bits, list) or len(bits) != k or any(b not in (0, 1) for b in bits):
        raise MalformedResponseError(f"planning_state must be a list of {k} 0/1 values")
    raw_plan = payload.get("plan")
    if not isinstance(raw_plan, list) or not raw_plan:
        raise MalformedResponseError("plan must be a non-empty list")
    plan = []
    for item in raw_plan:
        if not isinstance(item, dict):
            raise MalformedResponseError("plan entries must be objects")
        try:
            plan.append(MetaAction.from_names(item["long"], item["lat"]))
        except (KeyError, ValueError) as exc:
            raise MalformedResponseError(f"invalid plan entry {item!r}") from exc
    labels = DEFAULT_QUERIES if k == len(DEFAULT_QUERIES) else tuple(f"query-{i}" for i in range(k))
    state = PlanningState(tuple(bool(b) for b in bits), labels)
    description = str(payload.get("description", ""))
    analysis = str(payload.get("analysis", ""))
    return state, tuple(plan), description, analysis


def remote_feedback(
    scene_id: str,
    prompts: Tuple[VisualPrompt, BevPrompt],
    endpoint: str,
    timeout: float = 1.0,
    k: int = len(DEFAULT_QUERIES),
) -> SlowFeedback:
    """Ask the remote slow system over the JSON wire protocol.

    Raises RemoteTimeoutError when no answer arrives within `timeout`
    seconds and MalformedResponseError when the answer fails validation;
    callers treat both as "fall back to the fast path this tick".
    """
    visual, bev = prompts
    request = {
        "scene_id": scene_id,
        "bev_prompt": bev.text,
        "visual_prompt": [[p.u, p.v, bool(p.in_frame)] for p in visual.pixel_points],
        "qa_template": list(QA_TEMPLATE),
        "k": k,
    }
    start = time.monotonic()
    try:
        resp = requests.post(endpoint, json=request, timeout=timeout)
    except requests.exceptions.Timeout as exc:
        raise RemoteTimeoutError(f"no response from {endpoint} within {timeout}s") from exc
    except requests.exceptions.RequestException as exc:
        raise MalformedResponseError(f"transport failure talking to {endpoint}: {exc}") from exc
    latency = time.monotonic() - start
    try:
        payload = resp.json()
    except ValueError as exc:
        raise MalformedResponseError("response body is not JSON") from exc
    state, plan, description, analysis = _parse_remote_payload(payload, k)
    return SlowFeedback(
        planning_state=state,
        plan=plan,
        scene_description=description,
        analysis=analysis,
        source=FeedbackSource.REMOTE,
        latency=latency,
    )


# ------- QA dataset -------


def _traffic_sign_answer(scene: Scene) -> str:
    parts = []
    for el in scene.map_elements:
        d = element_distance_ahead(scene, el)
        if d is None:
            continue
        if el.kind is MapElementKind.TRAFFIC_LIGHT and d <= LIGHT_DETECTION_RANGE:
            parts.append(f"{el.state.value.lower()} light ahead {d:.1f}")
        elif el.kind is MapElementKind.STOP_LINE and d <= STOP_SIGN_RANGE:
            parts.append(f"stop line ahead {d:.1f}")
        elif el.kind is MapElementKind.SPEED_LIMIT_SIGN and d <= LIGHT_DETECTION_RANGE:
            parts.append(f"speed limit {el.limit:.1f}")
    return "; ".join(parts) if parts else "none"


def _key_object_answer(scene: Scene) -> str:
    bev = build_bev_prompt(scene)
    agent_lines = [
        ln for ln in bev.lines() if ln.split(" ", 1)[0] in {k.value for k in AgentKind}
    ]
    return "; ".join(agent_lines[:3]) if agent_lines else "none"


def qa_records_for_scene(scene: Scene) -> List[QaRecord]:
    """The five ground-truth QA records for one tick."""
    state = evaluate_planning_state(scene)
    plan, _trace = plan_from_rules(scene, state)
    bev = build_bev_prompt(scene)
    n_close = sum(1 for a in scene.agents if _agent_range_bearing(scene, a)[0] <= BEV_AGENT_RANGE)
    scene_answer = f"{bev.lines()[0]}; {n_close} agents within {BEV_AGENT_RANGE:.0f} m"
    return [
        QaRecord(QA_CATEGORIES[0], QA_TEMPLATE[0], scene_answer),
        QaRecord(QA_CATEGORIES[1], QA_TEMPLATE[1], _traffic_sign_answer(scene)),
        QaRecord(QA_CATEGORIES[2], QA_TEMPLATE[2], _key_object_answer(scene)),
        QaRecord(QA_CATEGORIES[3], QA_TEMPLATE[3], list(state.as_ints())),
        QaRecord(
            QA_CATEGORIES[4],
            QA_TEMPLATE[4],
            [{"long": a.longitudinal.value, "lat": a.lateral.value} for a in plan],
        ),
    ]


def generate_qa_dataset(scenes: Sequence[Scene]) -> List[QaRecord]:
    """Five records per logged tick, all answers from ground truth."""
    out: List[QaRecord] = []
    for scene in scenes:
        out.extend(qa_records_for_scene(scene))
    return out


def validate_qa_record(record: Dict[str, object]) -> None:
    """Schema check for one exported QA record; raises ValueError on failure."""
    if set(record.keys()) != {"category", "question", "answer"}:
        raise ValueError(f"record keys must be category/question/answer, got {sorted(record)}")
    category = record["category"]
    if category not in QA_CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if not isinstance(record["question"], str) or not record["question"]:
        raise ValueError("question must be a non-empty string")
    answer = record["answer"]
    if category == "PlanningState":
        if not isinstance(answer, list) or any(b not in (0, 1) for b in answer):
            raise ValueError("PlanningState answer must be a list of 0/1")
    elif category == "HighLevelPlan":
        if not isinstance(answer, list) or not answer:
            raise ValueError("HighLevelPlan answer must be a non-empty list")
        for item in answer:
            if not isinstance(item, dict) or set(item) != {"long", "lat"}:
                raise ValueError(f"bad plan item {item!r}")
            MetaAction.from_names(item["long"], item["lat"])
    else:
        if not isinstance(answer, str):
            raise ValueError(f"{category} answer must be text")


def write_qa_ndjson(records: Sequence[QaRecord], path: str) -> int:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return len(records)
