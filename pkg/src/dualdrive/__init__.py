"""Dual-system motion planning: fast lattice sampler, slow reviewer, uncertainty gate."""

from dualdrive.core import (
    AgentKind,
    AgentState,
    EgoState,
    Frame,
    LightState,
    LatAction,
    LonAction,
    MapElement,
    MapElementKind,
    MetaAction,
    NavigationCommand,
    PlanningState,
    Scene,
    SlowFeedback,
    Trajectory,
    Waypoint,
    transform_trajectory,
)

__all__ = [
    "AgentKind",
    "AgentState",
    "EgoState",
    "Frame",
    "LightState",
    "LatAction",
    "LonAction",
    "MapElement",
    "MapElementKind",
    "MetaAction",
    "NavigationCommand",
    "PlanningState",
    "Scene",
    "SlowFeedback",
    "Trajectory",
    "Waypoint",
    "transform_trajectory",
]

__version__ = "0.1.0"
