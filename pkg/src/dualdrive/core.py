"""Shared domain vocabulary: poses, trajectories, scenes, meta-actions, feedback.

Everything here is an immutable value object. Mutation happens by building a
new instance, which keeps planner/simulator state transitions explicit and
makes the types safe to share across worker threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

# Ego footprint half-extents (m). A compact car: 4.5 m x 1.9 m.
EGO_HALF_LENGTH = 2.25
EGO_HALF_WIDTH = 0.95


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


class Frame(enum.Enum):
    EGO = "ego"
    WORLD = "world"


class NavigationCommand(enum.Enum):
    KEEP_FORWARD = "KeepForward"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"


class AgentKind(enum.Enum):
    CAR = "car"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"
    STATIC = "static"


class LightState(enum.Enum):
    RED = "Red"
    YELLOW = "Yellow"
    GREEN = "Green"


class MapElementKind(enum.Enum):
    LANE_CENTERLINE = "LaneCenterline"
    STOP_LINE = "StopLine"
    TRAFFIC_LIGHT = "TrafficLight"
    SPEED_LIMIT_SIGN = "SpeedLimitSign"
    CROSSWALK = "Crosswalk"


@dataclass(frozen=True)
class Waypoint:
    """A planned position (m) at a time offset (s) from plan start."""

    x: float
    y: float
    t_offset: float

    def __post_init__(self) -> None:
        _require_finite("waypoint", self.x, self.y, self.t_offset)
        if self.t_offset <= 0.0:
            raise ValueError(f"t_offset must be positive, got {self.t_offset}")


@dataclass(frozen=True)
class Trajectory:
    """A fixed-step sequence of waypoints in a single frame.

    Waypoint i sits at t_offset (i+1)*dt; the implicit start point (the ego
    pose at t=0) is not stored. Build instances with `from_points` so the
    time grid is exact by construction.
    """

    waypoints: Tuple[Waypoint, ...]
    dt: float
    frame: Frame

    def __post_init__(self) -> None:
        if not self.waypoints:
            raise ValueError("trajectory needs at least one waypoint")
        if not (self.dt > 0.0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        for i, wp in enumerate(self.waypoints):
            if wp.t_offset != (i + 1) * self.dt:
                raise ValueError(
                    f"waypoint {i} at t={wp.t_offset} breaks the (i+1)*dt grid (dt={self.dt})"
                )

    @classmethod
    def from_points(
        cls, points: Sequence[Tuple[float, float]], dt: float, frame: Frame
    ) -> "Trajectory":
        wps = tuple(Waypoint(float(x), float(y), (i + 1) * dt) for i, (x, y) in enumerate(points))
        return cls(wps, dt, frame)

    def points(self) -> Tuple[Tuple[float, float], ...]:
        return tuple((wp.x, wp.y) for wp in self.waypoints)

    def horizon(self) -> float:
        return self.waypoints[-1].t_offset

    def __len__(self) -> int:
        return len(self.waypoints)


@dataclass(frozen=True)
class EgoState:
    """Ego pose plus longitudinal speed/acceleration, world frame."""

    x: float
    y: float
    heading: float
    speed: float
    accel: float = 0.0

    def __post_init__(self) -> None:
        _require_finite("ego state", self.x, self.y, self.heading, self.speed, self.accel)
        if self.speed < 0.0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")
        if not (-math.pi < self.heading <= math.pi):
            raise ValueError(f"heading must lie in (-pi, pi], got {self.heading}")


@dataclass(frozen=True)
class AgentState:
    """Another road user: pose, speed, and a rectangular footprint."""

    agent_id: str
    kind: AgentKind
    x: float
    y: float
    heading: float
    speed: float
    half_length: float
    half_width: float

    def __post_init__(self) -> None:
        _require_finite(
            "agent state", self.x, self.y, self.heading, self.speed, self.half_length, self.half_width
        )
        if self.half_length <= 0.0 or self.half_width <= 0.0:
            raise ValueError("agent footprint half-extents must be positive")
        if self.speed < 0.0:
            raise ValueError(f"agent speed must be >= 0, got {self.speed}")


@dataclass(frozen=True)
class MapElement:
    """A map primitive: polyline geometry plus kind-specific payload.

    TrafficLight carries `state` and its polyline is the stop bar.
    SpeedLimitSign carries `limit` (m/s). Other kinds are pure geometry.
    """

    kind: MapElementKind
    points: Tuple[Tuple[float, float], ...]
    state: Optional[LightState] = None
    limit: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("map element needs at least one point")
        if self.kind is MapElementKind.TRAFFIC_LIGHT and self.state is None:
            raise ValueError("traffic light elements require a state")
        if self.kind is MapElementKind.SPEED_LIMIT_SIGN:
            if self.limit is None or self.limit <= 0.0:
                raise ValueError("speed limit signs require a positive limit")


@dataclass(frozen=True)
class Scene:
    """One planning snapshot: ego, agents, map, navigation command, route."""

    timestamp: float
    ego: EgoState
    agents: Tuple[AgentState, ...]
    map_elements: Tuple[MapElement, ...]
    command: NavigationCommand
    route: Tuple[Tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.route) < 2:
            raise ValueError("scene route needs at least two points")


# Default yes/no planning queries, in bit order.
DEFAULT_QUERIES: Tuple[str, ...] = (
    "lead-vehicle-within-10m",
    "red-light-ahead",
    "pedestrian-in-path",
    "stop-sign-ahead",
    "lane-change-feasible-left",
    "lane-change-feasible-right",
    "speed-over-limit",
    "intersection-within-20m",
)


@dataclass(frozen=True)
class PlanningState:
    """Answers to the K binary planning queries."""

    bits: Tuple[bool, ...]
    labels: Tuple[str, ...] = DEFAULT_QUERIES

    def __post_init__(self) -> None:
        if len(self.bits) != len(self.labels):
            raise ValueError(
                f"{len(self.bits)} bits for {len(self.labels)} labels"
            )
        if not self.bits:
            raise ValueError("planning state needs at least one query")

    def as_ints(self) -> Tuple[int, ...]:
        return tuple(int(b) for b in self.bits)

    def get(self, label: str) -> bool:
        try:
            return self.bits[self.labels.index(label)]
        except ValueError:
            raise KeyError(label) from None


class LonAction(enum.Enum):
    ACCELERATE = "Accelerate"
    DECELERATE = "Decelerate"
    KEEP_SPEED = "KeepSpeed"
    STOP = "Stop"


class LatAction(enum.Enum):
    KEEP_LANE = "KeepLane"
    CHANGE_LEFT = "ChangeLeft"
    CHANGE_RIGHT = "ChangeRight"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"


_LON_ORDER = tuple(LonAction)
_LAT_ORDER = tuple(LatAction)
N_META_ACTIONS = len(_LON_ORDER) * len(_LAT_ORDER)


@dataclass(frozen=True)
class MetaAction:
    """A (longitudinal, lateral) high-level action pair."""

    longitudinal: LonAction
    lateral: LatAction

    def index(self) -> int:
        """Stable row index in [0, 20): longitudinal-major over enum order."""
        return _LON_ORDER.index(self.longitudinal) * len(_LAT_ORDER) + _LAT_ORDER.index(self.lateral)

    @classmethod
    def from_index(cls, idx: int) -> "MetaAction":
        if not 0 <= idx < N_META_ACTIONS:
            raise ValueError(f"meta-action index {idx} out of range [0, {N_META_ACTIONS})")
        return cls(_LON_ORDER[idx // len(_LAT_ORDER)], _LAT_ORDER[idx % len(_LAT_ORDER)])

    @classmethod
    def from_names(cls, longitudinal: str, lateral: str) -> "MetaAction":
        return cls(LonAction(longitudinal), LatAction(lateral))


class FeedbackSource(enum.Enum):
    ORACLE = "oracle"
    REMOTE = "remote"


@dataclass(frozen=True)
class SlowFeedback:
    """What the slow system returned for one planning tick."""

    planning_state: PlanningState
    plan: Tuple[MetaAction, ...]
    scene_description: str
    analysis: str
    source: FeedbackSource
    latency: float = 0.0

    def __post_init__(self) -> None:
        if not self.plan:
            raise ValueError("slow feedback plan must contain at least one action")
        if self.latency < 0.0:
            raise ValueError(f"latency must be >= 0, got {self.latency}")


def transform_trajectory(traj: Trajectory, ego: EgoState, target: Frame) -> Trajectory:
    """Rigidly transform a trajectory between the ego and world frames.

    `ego` is the world pose anchoring the ego frame. Raises ValueError when
    the trajectory is already in the target frame: silently returning the
    input would hide a double-transform bug at the call site.
    """
    if traj.frame is target:
        raise ValueError(f"trajectory already in {target.value} frame")
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    pts = []
    if target is Frame.WORLD:
        for wp in traj.waypoints:
            pts.append((ego.x + c * wp.x - s * wp.y, ego.y + s * wp.x + c * wp.y))
    else:
        for wp in traj.waypoints:
            dx, dy = wp.x - ego.x, wp.y - ego.y
            pts.append((c * dx + s * dy, -s * dx + c * dy))
    return Trajectory.from_points(pts, traj.dt, target)
