"""Four-factor trajectory reward: safety, comfort, efficiency, economy.

Each term is rule-based, clamped to [0, 1], and combined with normalized
weights, so a total is always a convex combination of the four terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from dualdrive import geometry
from dualdrive.core import (
    EGO_HALF_LENGTH,
    EGO_HALF_WIDTH,
    AgentState,
    Frame,
    LightState,
    MapElementKind,
    Scene,
    Trajectory,
    transform_trajectory,
    wrap_angle,
)
from dualdrive.fastplan import CandidateSet

D_SAFE = 5.0          # clearance normalizer (m)
A_MAX = 3.0           # |accel| normalizer (m/s^2)
J_MAX = 5.0           # |jerk| normalizer (m/s^3)
LAT_MAX = 3.0         # |lateral accel| normalizer (m/s^2)
V_LIMIT_DEFAULT = 15.0  # assumed limit when no sign is posted (m/s)
STOP_CROSS_SPEED = 0.5  # crossing a stop line faster than this is a violation (m/s)


class DegenerateTrajectoryError(ValueError):
    """Trajectory too short to differentiate (needs >= 2 waypoints)."""


class EmptySetError(ValueError):
    """select_best called with no candidates."""


@dataclass(frozen=True)
class RewardWeights:
    """Term weights, normalized to sum to 1 on construction."""

    safety: float = 0.4
    comfort: float = 0.2
    efficiency: float = 0.2
    economic: float = 0.2

    def __post_init__(self) -> None:
        vals = (self.safety, self.comfort, self.efficiency, self.economic)
        if any(v < 0.0 or not math.isfinite(v) for v in vals):
            raise ValueError(f"weights must be finite and >= 0, got {vals}")
        total = sum(vals)
        if total <= 0.0:
            raise ValueError("at least one weight must be positive")
        if not math.isclose(total, 1.0, rel_tol=0.0, abs_tol=1e-12):
            object.__setattr__(self, "safety", self.safety / total)
            object.__setattr__(self, "comfort", self.comfort / total)
            object.__setattr__(self, "efficiency", self.efficiency / total)
            object.__setattr__(self, "economic", self.economic / total)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.safety, self.comfort, self.efficiency, self.economic)


@dataclass(frozen=True)
class RewardBreakdown:
    c_safety: float
    c_comfort: float
    c_efficiency: float
    c_economic: float
    total: float

    def terms(self) -> Tuple[float, float, float, float]:
        return (self.c_safety, self.c_comfort, self.c_efficiency, self.c_economic)


def _clamp01(v: float) -> float:
    return min(max(v, 0.0), 1.0)


def speed_limit(scene: Scene) -> float:
    """Limit from the nearest posted sign, else the default."""
    best = None
    best_d = math.inf
    ex, ey = scene.ego.x, scene.ego.y
    for el in scene.map_elements:
        if el.kind is not MapElementKind.SPEED_LIMIT_SIGN:
            continue
        d = min(math.hypot(px - ex, py - ey) for px, py in el.points)
        if d < best_d:
            best_d = d
            best = el.limit
    return best if best is not None else V_LIMIT_DEFAULT


def _propagate_agent(agent: AgentState, t: float) -> Tuple[float, float]:
    return (
        agent.x + agent.speed * t * math.cos(agent.heading),
        agent.y + agent.speed * t * math.sin(agent.heading),
    )


def _path_kinematics(
    world_pts: Sequence[Tuple[float, float]], scene: Scene, dt: float
) -> Tuple[List[float], List[float], List[float], List[float]]:
    """Speeds, accels, jerks, lateral accels along the ego path.

    The current ego pose and speed are prepended so the first plan step is
    judged against the actual state, including the jump it asks for.
    """
    ego = scene.ego
    xs = [ego.x] + [p[0] for p in world_pts]
    ys = [ego.y] + [p[1] for p in world_pts]
    speeds = [ego.speed]
    headings = [ego.heading]
    for i in range(1, len(xs)):
        dx, dy = xs[i] - xs[i - 1], ys[i] - ys[i - 1]
        dist = math.hypot(dx, dy)
        speeds.append(dist / dt)
        # Stationary steps keep the previous heading.
        headings.append(math.atan2(dy, dx) if dist > 1e-9 else headings[-1])
    accels = [(speeds[i + 1] - speeds[i]) / dt for i in range(len(speeds) - 1)]
    jerks = [(accels[i + 1] - accels[i]) / dt for i in range(len(accels) - 1)]
    lat = [
        speeds[i] * wrap_angle(headings[i] - headings[i - 1]) / dt
        for i in range(1, len(headings))
    ]
    return speeds, accels, jerks, lat


def _safety_term(
    world_pts: Sequence[Tuple[float, float]],
    speeds: Sequence[float],
    scene: Scene,
    dt: float,
) -> float:
    """Clearance-scaled safety, zeroed by any predicted collision or violation.

    Clearance is point-to-footprint from each ego waypoint to every agent
    rectangle propagated at constant velocity; the collision test uses the
    full ego footprint. Crossing a red light's stop bar, or a stop line above
    walking speed, also zeroes the term.
    """
    ego = scene.ego
    min_clear = math.inf
    prev = (ego.x, ego.y)
    prev_heading = ego.heading
    for i, (px, py) in enumerate(world_pts):
        t = (i + 1) * dt
        dx, dy = px - prev[0], py - prev[1]
        heading = math.atan2(dy, dx) if math.hypot(dx, dy) > 1e-9 else prev_heading
        for agent in scene.agents:
            ax, ay = _propagate_agent(agent, t)
            clear = geometry.point_rect_distance(
                px, py, ax, ay, agent.heading, agent.half_length, agent.half_width
            )
            min_clear = min(min_clear, clear)
            if geometry.rects_overlap(
                px, py, heading, EGO_HALF_LENGTH, EGO_HALF_WIDTH,
                ax, ay, agent.heading, agent.half_length, agent.half_width,
            ):
                return 0.0
        seg = (prev, (px, py))
        for el in scene.map_elements:
            if el.kind is MapElementKind.TRAFFIC_LIGHT and el.state is LightState.RED:
                if geometry.segment_crosses_polyline(seg[0], seg[1], el.points):
                    return 0.0
            elif el.kind is MapElementKind.STOP_LINE:
                if speeds[i + 1] > STOP_CROSS_SPEED and geometry.segment_crosses_polyline(
                    seg[0], seg[1], el.points
                ):
                    return 0.0
        prev = (px, py)
        prev_heading = heading
    if not scene.agents:
        return 1.0
    return _clamp01(min_clear / D_SAFE)


def score(traj: Trajectory, scene: Scene, weights: RewardWeights) -> RewardBreakdown:
    """Score one ego-frame candidate against a scene.

    Raises DegenerateTrajectoryError for trajectories with fewer than two
    waypoints (no second difference exists).
    """
    if traj.frame is not Frame.EGO:
        raise ValueError("score expects an ego-frame trajectory")
    if len(traj) < 2:
        raise DegenerateTrajectoryError(
            f"need >= 2 waypoints to score, got {len(traj)}"
        )
    world = transform_trajectory(traj, scene.ego, Frame.WORLD)
    world_pts = world.points()
    speeds, accels, jerks, lat = _path_kinematics(world_pts, scene, traj.dt)

    c_safety = _safety_term(world_pts, speeds, scene, traj.dt)

    peak = max(
        max(abs(a) for a in accels) / A_MAX,
        max(abs(j) for j in jerks) / J_MAX,
        max(abs(l) for l in lat) / LAT_MAX,
    )
    c_comfort = 1.0 - _clamp01(peak)

    horizon = traj.horizon()
    s_start, d_start = geometry.project_to_polyline(scene.ego.x, scene.ego.y, scene.route)
    s_end, d_end = geometry.project_to_polyline(
        world_pts[-1][0], world_pts[-1][1], scene.route
    )
    # Route progress is arclength gained minus any growth in lateral offset:
    # drifting beside the route is not progress along it.
    progress = max(s_end - s_start - max(d_end - d_start, 0.0), 0.0)
    c_efficiency = _clamp01(progress / (speed_limit(scene) * horizon))

    mean_acc = sum(abs(a) for a in accels) / len(accels)
    c_economic = 1.0 - _clamp01(mean_acc / A_MAX)

    w = weights.as_tuple()
    terms = (c_safety, c_comfort, c_efficiency, c_economic)
    total = sum(wi * ci for wi, ci in zip(w, terms))
    return RewardBreakdown(*terms, total)


def score_all(
    cset: CandidateSet, scene: Scene, weights: RewardWeights
) -> Dict[int, RewardBreakdown]:
    return {c.candidate_id: score(c.trajectory, scene, weights) for c in cset}


def select_best(
    cset: CandidateSet,
    scene: Scene,
    weights: RewardWeights,
    breakdowns: Optional[Dict[int, RewardBreakdown]] = None,
) -> Tuple[int, RewardBreakdown]:
    """Argmax of total reward; exact ties go to the lowest candidate id.

    Pass precomputed breakdowns to avoid re-scoring in hot loops.
    """
    if len(cset) == 0:
        raise EmptySetError("no candidates to select from")
    if breakdowns is None:
        breakdowns = score_all(cset, scene, weights)
    best_id = None
    best = None
    for c in sorted(cset, key=lambda c: c.candidate_id):
        bd = breakdowns[c.candidate_id]
        if best is None or bd.total > best.total:
            best_id, best = c.candidate_id, bd
    return best_id, best
