"""Shared builders and the acceptance-result registry for the test suite."""

from __future__ import annotations

import collections
import math
from typing import List, Tuple

from dualdrive.core import (
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
)

# (index, label, passed, detail) rows collected by the acceptance module and
# re-printed by the conftest terminal-summary hook.
ACCEPTANCE_RESULTS: List[Tuple[int, str, bool, str]] = []


def record_acceptance(
    index: int, label: str, passed: bool, detail: str = "", echo: bool = True
) -> None:
    ACCEPTANCE_RESULTS.append((index, label, passed, detail))
    if not echo:
        return
    status = "PASS" if passed else "FAIL"
    line = f"acceptance {index:02d} {status}  {label}"
    if detail:
        line += f"  [{detail}]"
    print(line)


def straight_route(length: float = 200.0, step: float = 10.0) -> Tuple[Tuple[float, float], ...]:
    n = int(round(length / step))
    return tuple((i * step, 0.0) for i in range(n + 1))


def make_scene(
    speed: float = 10.0,
    agents=(),
    elements=(),
    command: NavigationCommand = NavigationCommand.KEEP_FORWARD,
    ego: EgoState = None,
    route=None,
    timestamp: float = 0.0,
) -> Scene:
    if ego is None:
        ego = EgoState(0.0, 0.0, 0.0, speed)
    if route is None:
        route = straight_route()
    return Scene(timestamp, ego, tuple(agents), tuple(elements), command, tuple(route))


def car(agent_id: str, x: float, y: float, heading: float = 0.0, speed: float = 0.0,
        half_len: float = 2.0, half_wid: float = 1.0) -> AgentState:
    return AgentState(agent_id, AgentKind.CAR, x, y, heading, speed, half_len, half_wid)


def walker(agent_id: str, x: float, y: float, heading: float = -math.pi / 2,
           speed: float = 1.5) -> AgentState:
    return AgentState(agent_id, AgentKind.PEDESTRIAN, x, y, heading, speed, 0.4, 0.4)


def light_bar(x: float, state: LightState = LightState.RED) -> MapElement:
    # Same full-width stop-bar shape the bundled scenarios use.
    return MapElement(
        MapElementKind.TRAFFIC_LIGHT, ((x, -14.0), (x, 0.0), (x, 14.0)), state
    )


def speed_sign(x: float, limit: float) -> MapElement:
    return MapElement(MapElementKind.SPEED_LIMIT_SIGN, ((x, 3.0),), limit=limit)


def straight_traj(speed: float, n: int = 6, dt: float = 0.5,
                  frame: Frame = Frame.EGO, y: float = 0.0) -> Trajectory:
    return Trajectory.from_points([((i + 1) * dt * speed, y) for i in range(n)], dt, frame)


def gate_replica(rewards, tau_r, tau_b, ema_alpha=0.2, window=20,
                 hysteresis_ticks=2, min_b=1e-6):
    """Independent re-derivation of the gate semantics for cross-checking.

    Kept deliberately different in style from the library (deque window,
    explicit streak counter instead of history scans). Returns a list of
    (mode, reason, mu, b) tuples with string mode/reason names.
    """
    resids = collections.deque(maxlen=window)
    mu = None
    prev_mode = None
    streak = 0  # trailing hysteresis holds of prev_mode
    out = []
    for r in rewards:
        if mu is None:
            mu = r
        resids.append(abs(r - mu))
        b = sum(resids) / len(resids)
        if b < min_b:
            b = min_b
        mu = ema_alpha * r + (1.0 - ema_alpha) * mu
        if r < tau_r:
            base, reason = "Slow", "LowReward"
        elif b > tau_b:
            base, reason = "Slow", "HighUncertainty"
        else:
            base, reason = "Fast", "Routine"
        if prev_mode is None or base == prev_mode or 1 + streak >= hysteresis_ticks:
            mode, streak = base, 0
        else:
            mode, reason = prev_mode, "Hysteresis"
            streak += 1
        prev_mode = mode
        out.append((mode, reason, mu, b))
    return out
