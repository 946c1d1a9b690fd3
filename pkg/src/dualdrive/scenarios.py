"""Built-in scenario suites.

Two 20-scenario suites: "routine" covers nominal driving where the fast
system should stay in charge, "adversarial" covers sudden behavior changes
(hard-braking leads, crossing pedestrians, cut-ins, blockages, light
switches) where constant-velocity prediction goes stale inside the horizon.
Variants within a family get small seeded perturbations so the suites are
deterministic for a given seed but not literal copies.
"""

from __future__ import annotations

import math
import random
from typing import Callable, Dict, List, Optional, Sequence, Tuple

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
from dualdrive.simworld import LightSwitch, Scenario, ScriptSegment

CAR_HALF = (2.25, 0.95)
PED_HALF = (0.3, 0.3)


def _point_at_arclength(route: Sequence[Tuple[float, float]], s: float) -> Tuple[float, float]:
    if s <= 0.0:
        return route[0]
    run = 0.0
    for (x0, y0), (x1, y1) in zip(route, route[1:]):
        seg = math.hypot(x1 - x0, y1 - y0)
        if run + seg >= s:
            f = (s - run) / seg
            return (x0 + f * (x1 - x0), y0 + f * (y1 - y0))
        run += seg
    return route[-1]


def expert_along_route(
    route: Sequence[Tuple[float, float]],
    v0: float,
    accel: float = 0.0,
    steps: int = 6,
    dt: float = 0.5,
) -> Trajectory:
    """Reference trajectory: follow the route at a clamped speed profile."""
    pts = []
    s = 0.0
    v = v0
    for _ in range(steps):
        v = max(0.0, v + accel * dt)
        s += v * dt
        pts.append(_point_at_arclength(route, s))
    return Trajectory.from_points(pts, dt, Frame.WORLD)


def straight_route(length: float) -> Tuple[Tuple[float, float], ...]:
    return ((0.0, 0.0), (length, 0.0))


def arc_route(
    lead_in: float, radius: float, sweep_deg: float, lead_out: float, step: float = 4.0
) -> Tuple[Tuple[float, float], ...]:
    """Straight lead-in, circular arc (positive radius turns left), straight exit."""
    pts: List[Tuple[float, float]] = [(0.0, 0.0), (lead_in, 0.0)]
    sweep = math.radians(sweep_deg)
    sign = 1.0 if sweep >= 0 else -1.0
    r = abs(radius)
    cx, cy = lead_in, sign * r
    n = max(2, int(abs(sweep) * r / step))
    for i in range(1, n + 1):
        a = abs(sweep) * i / n
        pts.append((cx + r * math.sin(a), cy - sign * r * math.cos(a)))
    hx, hy = math.cos(sweep), math.sin(sweep)
    lx, ly = pts[-1]
    pts.append((lx + lead_out * hx, ly + lead_out * hy))
    return tuple(pts)


def _car(agent_id: str, x: float, y: float, speed: float, heading: float = 0.0,
         kind: AgentKind = AgentKind.CAR) -> AgentState:
    half = PED_HALF if kind is AgentKind.PEDESTRIAN else CAR_HALF
    return AgentState(agent_id, kind, x, y, heading, speed, half[0], half[1])


def _limit_sign(x: float, limit: float) -> MapElement:
    return MapElement(MapElementKind.SPEED_LIMIT_SIGN, ((x, 5.0),), None, limit)


def _light(x: float, state: LightState) -> MapElement:
    # Full-width stop bar: the midpoint keeps it visible to forward-corridor
    # checks, the +-14 m ends put its ends beyond any comfortable swerve.
    return MapElement(
        MapElementKind.TRAFFIC_LIGHT, ((x, -14.0), (x, 0.0), (x, 14.0)), state
    )


def _scene(
    ego_speed: float,
    route: Tuple[Tuple[float, float], ...],
    agents: Tuple[AgentState, ...] = (),
    elements: Tuple[MapElement, ...] = (),
    command: NavigationCommand = NavigationCommand.KEEP_FORWARD,
) -> Scene:
    ego = EgoState(0.0, 0.0, 0.0, ego_speed, 0.0)
    return Scene(0.0, ego, agents, elements, command, route)


# ------- routine families -------


def cruise_scenario(name: str, speed: float, length: float = 140.0) -> Scenario:
    route = straight_route(length)
    return Scenario(
        name=name,
        scene=_scene(speed, route, elements=(_limit_sign(length, 15.0),)),
        expert=expert_along_route(route, speed),
        description=f"empty straight road, cruise at {speed:.1f} m/s",
    )


def green_light_scenario(name: str, speed: float, light_at: float) -> Scenario:
    route = straight_route(140.0)
    return Scenario(
        name=name,
        scene=_scene(speed, route, elements=(_light(light_at, LightState.GREEN),)),
        expert=expert_along_route(route, speed),
        description=f"green light {light_at:.0f} m ahead, no reason to slow",
    )


def far_lead_scenario(name: str, speed: float, gap: float) -> Scenario:
    route = straight_route(160.0)
    lead = _car("lead", gap, 0.0, speed)
    return Scenario(
        name=name,
        scene=_scene(speed, route, agents=(lead,)),
        expert=expert_along_route(route, speed),
        description=f"lead car {gap:.0f} m ahead at matched speed",
    )


def turn_scenario(name: str, direction: str, speed: float, radius: float) -> Scenario:
    sweep = 55.0 if direction == "left" else -55.0
    route = arc_route(35.0, radius, sweep, 35.0)
    command = (
        NavigationCommand.TURN_LEFT if direction == "left" else NavigationCommand.TURN_RIGHT
    )
    return Scenario(
        name=name,
        scene=_scene(speed, route, elements=(_limit_sign(10.0, 8.0),), command=command),
        expert=expert_along_route(route, speed),
        description=f"{direction} turn of radius {radius:.0f} m at {speed:.1f} m/s",
    )


def bend_scenario(name: str, speed: float) -> Scenario:
    route = arc_route(30.0, 100.0, 18.0, 60.0)
    return Scenario(
        name=name,
        scene=_scene(speed, route, elements=(_limit_sign(20.0, 12.0),)),
        expert=expert_along_route(route, speed),
        description=f"gentle left bend at {speed:.1f} m/s",
    )


def routine_suite(seed: int = 0) -> List[Scenario]:
    rng = random.Random(seed)

    def j(scale: float) -> float:
        return rng.uniform(-scale, scale)

    out: List[Scenario] = []
    for i, v in enumerate((6.0, 8.0, 10.0, 12.0)):
        out.append(cruise_scenario(f"routine-cruise-{i:02d}", v + j(0.3)))
    for i, (v, d) in enumerate(((7.0, 55.0), (9.0, 65.0), (11.0, 75.0), (8.0, 60.0))):
        out.append(green_light_scenario(f"routine-green-{i:02d}", v + j(0.3), d + j(4.0)))
    for i, (v, g) in enumerate(((6.0, 35.0), (8.0, 40.0), (10.0, 45.0), (12.0, 50.0))):
        out.append(far_lead_scenario(f"routine-lead-{i:02d}", v + j(0.3), g + j(2.0)))
    for i, (d, v, r) in enumerate(
        (("left", 5.0, 20.0), ("right", 5.0, 20.0), ("left", 4.5, 18.0), ("right", 5.5, 22.0))
    ):
        out.append(turn_scenario(f"routine-turn-{i:02d}", d, v + j(0.2), r + j(1.0)))
    for i, v in enumerate((7.0, 9.0, 8.0, 10.0)):
        out.append(bend_scenario(f"routine-bend-{i:02d}", v + j(0.3)))
    return out


# ------- adversarial families -------


def brake_lead_scenario(
    name: str, speed: float, gap: float, brake_at: float = 2.0, brake_rate: float = 4.5
) -> Scenario:
    route = straight_route(160.0)
    lead = _car("lead", gap, 0.0, speed)
    script = (ScriptSegment("time", brake_at, accel=brake_rate, kappa=0.0, target_speed=0.0),)
    return Scenario(
        name=name,
        scene=_scene(speed, route, agents=(lead,)),
        scripts={"lead": script},
        expert=expert_along_route(route, speed, accel=-2.0),
        description=f"lead at {gap:.0f} m brakes hard to a stop at t={brake_at:.1f} s",
    )


def ped_cross_scenario(name: str, speed: float, ped_x: float, ped_y: float = 4.0) -> Scenario:
    route = straight_route(140.0)
    ped = _car("walker", ped_x, ped_y, 0.0, heading=-math.pi / 2, kind=AgentKind.PEDESTRIAN)
    script = (ScriptSegment("ego_gap", 24.0, accel=1.5, kappa=0.0, target_speed=1.6),)
    return Scenario(
        name=name,
        scene=_scene(speed, route, agents=(ped,)),
        scripts={"walker": script},
        expert=expert_along_route(route, speed, accel=-2.0),
        description=f"pedestrian at {ped_x:.0f} m steps into the road when ego closes",
    )


def cutin_scenario(name: str, speed: float, gap: float) -> Scenario:
    route = straight_route(160.0)
    other = _car("merger", gap, 3.5, speed - 1.0)
    script = (
        ScriptSegment("ego_gap", gap + 1.0, accel=0.0, kappa=-0.030),
        ScriptSegment("ego_gap", gap - 1.0, accel=0.0, kappa=0.030),
        ScriptSegment("ego_gap", gap - 2.5, accel=0.0, kappa=0.0),
    )
    return Scenario(
        name=name,
        scene=_scene(speed, route, agents=(other,)),
        scripts={"merger": script},
        expert=expert_along_route(route, speed, accel=-2.0),
        description=f"adjacent car {gap:.0f} m ahead merges into the ego lane",
    )


def static_block_scenario(
    name: str, speed: float, block_at: float, adjacent_free: bool
) -> Scenario:
    route = straight_route(150.0)
    agents = [_car("block", block_at, 0.0, 0.0, kind=AgentKind.STATIC)]
    if not adjacent_free:
        agents.append(_car("parked", block_at - 6.0, 3.5, 0.0, kind=AgentKind.STATIC))
    return Scenario(
        name=name,
        scene=_scene(speed, route, agents=tuple(agents)),
        expert=expert_along_route(route, speed, accel=-2.0),
        description=f"stationary vehicle blocking the lane {block_at:.0f} m ahead",
    )


def red_light_scenario(
    name: str = "adversarial-red-stop-00",
    speed: float = 8.0,
    light_at: float = 40.0,
    green_at: float = 12.0,
) -> Scenario:
    """Red light ahead from the start; turns green after green_at seconds."""
    route = straight_route(100.0)
    return Scenario(
        name=name,
        scene=_scene(speed, route, elements=(_light(light_at, LightState.RED),)),
        light_switches=(LightSwitch(green_at, 0, LightState.GREEN),),
        expert=expert_along_route(route, speed, accel=-2.0),
        description=f"red light {light_at:.0f} m ahead, green after {green_at:.0f} s",
    )


def red_switch_scenario(
    name: str, speed: float, light_at: float, switch_at: float, green_at: float
) -> Scenario:
    route = straight_route(120.0)
    return Scenario(
        name=name,
        scene=_scene(speed, route, elements=(_light(light_at, LightState.GREEN),)),
        light_switches=(
            LightSwitch(switch_at, 0, LightState.RED),
            LightSwitch(green_at, 0, LightState.GREEN),
        ),
        expert=expert_along_route(route, speed, accel=-2.0),
        description=f"light {light_at:.0f} m ahead flips red at t={switch_at:.1f} s",
    )


def adversarial_suite(seed: int = 0) -> List[Scenario]:
    rng = random.Random(seed + 1)

    def j(scale: float) -> float:
        return rng.uniform(-scale, scale)

    out: List[Scenario] = []
    for i, (v, g) in enumerate(((10.0, 18.0), (11.0, 20.0), (9.0, 16.0), (12.0, 22.0))):
        out.append(
            brake_lead_scenario(f"adversarial-brake-lead-{i:02d}", v + j(0.2), g + j(0.5))
        )
    for i, (v, d) in enumerate(((9.0, 26.0), (10.0, 30.0), (9.5, 28.0), (10.5, 32.0))):
        out.append(ped_cross_scenario(f"adversarial-ped-cross-{i:02d}", v + j(0.2), d + j(1.0)))
    for i, (v, g) in enumerate(((9.0, 14.0), (10.0, 16.0), (8.0, 13.0), (11.0, 17.0))):
        out.append(cutin_scenario(f"adversarial-cutin-{i:02d}", v + j(0.2), g + j(0.5)))
    for i, (v, d, free) in enumerate(
        ((12.0, 48.0, True), (13.0, 52.0, True), (10.0, 40.0, False), (11.0, 44.0, False))
    ):
        out.append(
            static_block_scenario(f"adversarial-block-{i:02d}", v + j(0.2), d + j(1.5), free)
        )
    out.append(red_light_scenario("adversarial-red-stop-00"))
    out.append(red_light_scenario("adversarial-red-stop-01", speed=9.0, light_at=45.0,
                                  green_at=13.0))
    out.append(red_switch_scenario("adversarial-red-switch-02", 12.0, 60.0, 2.0, 14.0))
    out.append(red_switch_scenario("adversarial-red-switch-03", 10.0, 55.0, 2.5, 13.0))
    return out


SUITES: Dict[str, Callable[[int], List[Scenario]]] = {
    "routine": routine_suite,
    "adversarial": adversarial_suite,
}


def build_suite(name: str, seed: int = 0) -> List[Scenario]:
    try:
        factory = SUITES[name]
    except KeyError:
        raise KeyError(f"unknown suite {name!r}; available: {sorted(SUITES)}") from None
    return factory(seed)


def find_scenario(suite: Sequence[Scenario], name: str) -> Optional[Scenario]:
    for sc in suite:
        if sc.name == name:
            return sc
    return None
