"""Closed-loop simulator: kinematics, tracking, scenario IO, loop, metrics."""

import json
import math
import random

import pytest

from dualdrive import gate as gatemod
from dualdrive import simworld
from dualdrive.core import (
    EGO_HALF_LENGTH,
    EGO_HALF_WIDTH,
    EgoState,
    Frame,
    LightState,
    Trajectory,
)
from dualdrive.scenarios import (
    adversarial_suite,
    cruise_scenario,
    red_light_scenario,
    routine_suite,
)
from helpers import car, make_scene, straight_traj, walker


# ---------------------------------------------------------------- kinematics

def test_step_kinematics_straight():
    s = simworld.step_kinematics(EgoState(0.0, 0.0, 0.0, 10.0), 0.0, 0.0, 0.1)
    assert (s.x, s.y, s.heading, s.speed) == (1.0, 0.0, 0.0, 10.0)


def test_step_kinematics_brakes_to_zero_not_reverse():
    s = EgoState(0.0, 0.0, 0.0, 0.3)
    s = simworld.step_kinematics(s, -4.0, 0.0, 0.1)
    assert s.speed == 0.0
    assert s.x == 0.0  # no motion once stopped


def test_step_kinematics_turn_updates_heading_first():
    # heading advances by v*kappa*dt before the position update
    s = simworld.step_kinematics(EgoState(0.0, 0.0, 0.0, 5.0), 0.0, 0.1, 0.1)
    want_heading = 5.0 * 0.1 * 0.1
    assert abs(s.heading - want_heading) < 1e-15
    assert abs(s.x - 5.0 * math.cos(want_heading) * 0.1) < 1e-15
    assert abs(s.y - 5.0 * math.sin(want_heading) * 0.1) < 1e-15


def test_step_kinematics_matches_duplicate_integrator():
    # independent re-implementation, integrated 100 steps
    rng = random.Random(77)
    x, y, h, v = 0.0, 0.0, 0.0, 8.0
    state = EgoState(x, y, h, v)
    for _ in range(100):
        a = rng.uniform(-2.0, 2.0)
        k = rng.uniform(-0.1, 0.1)
        v2 = max(0.0, v + a * 0.1)
        h2 = math.atan2(math.sin(h + v2 * k * 0.1), math.cos(h + v2 * k * 0.1))
        x, y = x + v2 * math.cos(h2) * 0.1, y + v2 * math.sin(h2) * 0.1
        h, v = h2, v2
        state = simworld.step_kinematics(state, a, k, 0.1)
        assert abs(state.x - x) < 1e-9
        assert abs(state.y - y) < 1e-9
        assert abs(state.heading - h) < 1e-9
        assert abs(state.speed - v) < 1e-9


def test_step_kinematics_rejects_bad_dt():
    with pytest.raises(ValueError):
        simworld.step_kinematics(EgoState(0, 0, 0, 1), 0.0, 0.0, 0.0)


def test_check_collision():
    agents = (car("a", 3.0, 0.0), car("b", 50.0, 0.0))
    hit = simworld.check_collision(0.0, 0.0, 0.0, agents)
    assert hit is not None and hit.agent_id == "a"
    assert simworld.check_collision(0.0, 0.0, 0.0, agents[1:]) is None
    # symmetric: viewing the same pair from the agent's pose also overlaps
    assert (
        simworld.check_collision(3.0, 0.0, 0.0, (car("e", 0.0, 0.0),)) is not None
    )


# ---------------------------------------------------------------- tracking

def _plan(points, speeds, dt=0.5):
    return simworld._PlanExec(list(points), tuple(speeds), 0.0, dt)


def test_pure_pursuit_straight_line_no_steer():
    plan = _plan([(5.0, 0.0), (10.0, 0.0)], (10.0, 10.0))
    accel, kappa = simworld.pure_pursuit(EgoState(0, 0, 0, 10.0), plan, 0.0, 0.1)
    assert kappa == 0.0
    assert accel == 0.0


def test_pure_pursuit_steers_toward_offset_target():
    plan = _plan([(5.0, 2.0)], (10.0,))
    _, kappa = simworld.pure_pursuit(EgoState(0, 0, 0, 10.0), plan, 0.0, 0.1)
    assert kappa > 0.0
    plan = _plan([(5.0, -2.0)], (10.0,))
    _, kappa = simworld.pure_pursuit(EgoState(0, 0, 0, 10.0), plan, 0.0, 0.1)
    assert kappa < 0.0


def test_pure_pursuit_clamps_authority():
    plan = _plan([(0.2, 5.0)], (30.0,))
    accel, kappa = simworld.pure_pursuit(EgoState(0, 0, 0, 0.5), plan, 0.0, 0.1)
    assert kappa == simworld.TRACKER_MAX_KAPPA
    assert accel == simworld.TRACKER_MAX_ACCEL
    plan = _plan([(50.0, 0.0)], (0.0,))
    accel, _ = simworld.pure_pursuit(EgoState(0, 0, 0, 15.0), plan, 0.0, 0.1)
    assert accel == -simworld.TRACKER_MAX_BRAKE


def test_pure_pursuit_follows_speed_schedule():
    plan = _plan([(100.0, 0.0)], (10.0, 8.0, 6.0), dt=0.5)
    # at t=0.45 the next sim step lands in profile slot 1 (8 m/s)
    accel, _ = simworld.pure_pursuit(EgoState(0, 0, 0, 8.0), plan, 0.45, 0.1)
    assert accel == 0.0
    # deep into the plan the last speed holds
    accel, _ = simworld.pure_pursuit(EgoState(0, 0, 0, 6.0), plan, 5.0, 0.1)
    assert accel == 0.0


# ---------------------------------------------------------------- scenarios io

def test_scenario_round_trip(tmp_path):
    for sc in (cruise_scenario("c1", 10.0), adversarial_suite()[0]):
        path = tmp_path / f"{sc.name}.json"
        simworld.save_scenario(sc, str(path))
        back = simworld.load_scenario(str(path))
        assert simworld.scenario_to_dict(back) == simworld.scenario_to_dict(sc)


def test_scenario_validation_errors(tmp_path):
    doc = simworld.scenario_to_dict(cruise_scenario("ok", 10.0))
    bad = dict(doc, schema_version=99)
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.scenario_from_dict(bad)
    bad = dict(doc, name="")
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.scenario_from_dict(bad)
    bad = dict(doc, route=[[0.0, 0.0]])
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.scenario_from_dict(bad)
    bad = dict(doc, command="Backwards")
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.scenario_from_dict(bad)
    bad = dict(doc, ego={"x": 0.0})
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.scenario_from_dict(bad)
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.scenario_from_dict("not a dict")
    missing = tmp_path / "absent.json"
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.load_scenario(str(missing))
    garbled = tmp_path / "garbled.json"
    garbled.write_text("{{{{")
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.load_scenario(str(garbled))


def test_scenario_semantic_checks():
    sc = cruise_scenario("ok", 10.0)
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.Scenario(
            name="x",
            scene=sc.scene,
            scripts={"ghost": (simworld.ScriptSegment("time", 0.0),)},
        )
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.ScriptSegment("sound", 1.0)
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.Scenario(
            name="x",
            scene=sc.scene,
            light_switches=(simworld.LightSwitch(1.0, 5, LightState.GREEN),),
        )
    short_expert = Trajectory.from_points(
        [(i * 5.0, 0.0) for i in range(1, 5)], 0.5, Frame.WORLD
    )
    with pytest.raises(simworld.ScenarioInvalidError):
        simworld.Scenario(name="x", scene=sc.scene, expert=short_expert)


# ---------------------------------------------------------------- closed loop

def test_fast_only_cruise_completes():
    sc = cruise_scenario("cruise", 10.0, length=60.0)
    cfg = simworld.SimConfig(mode=simworld.SimMode.FAST_ONLY, max_ticks=200)
    report = simworld.run_scenario(sc, cfg, simworld.default_stack())
    assert report.completed
    assert report.metrics["route_completion"] == 1.0
    assert report.metrics["collisions"] == 0
    assert report.slow_rate() == 0.0
    assert all(not row.slow_invoked for row in report.ticks)


def test_always_slow_rate_is_one():
    sc = cruise_scenario("cruise", 10.0, length=60.0)
    cfg = simworld.SimConfig(mode=simworld.SimMode.ALWAYS_SLOW, max_ticks=100)
    report = simworld.run_scenario(sc, cfg, simworld.default_stack())
    assert report.slow_rate() == 1.0


def test_dual_sync_stops_for_red_light():
    # light at 45 m, green again at t = 12 s
    sc = red_light_scenario("red", 10.0, light_at=45.0)
    cfg = simworld.SimConfig(mode=simworld.SimMode.DUAL_SYNC, max_ticks=300)
    report = simworld.run_scenario(sc, cfg, simworld.default_stack())
    assert report.metrics["red_light_violations"] == 0
    assert report.metrics["collisions"] == 0
    # while the light is red the ego brakes to a crawl and holds short of
    # the bar instead of idling at the start line
    red_rows = [row for row in report.ticks if row.t < 12.0]
    assert all(row.x < 45.0 for row in red_rows)
    assert min(row.speed for row in red_rows) < 0.5
    assert max(row.x for row in red_rows) > 30.0


def test_replay_rule_table_from_report():
    # the gate decisions logged in a report replay exactly from its rewards
    sc = red_light_scenario("red", 10.0, light_at=45.0)
    cfg = simworld.SimConfig(mode=simworld.SimMode.DUAL_SYNC, max_ticks=200)
    stack = simworld.default_stack()
    report = simworld.run_scenario(sc, cfg, stack)
    plan_rows = [row for row in report.ticks if row.reason != ""]
    rewards = [row.reward for row in plan_rows]
    replayed = gatemod.replay(rewards, stack.gate_cfg)
    for row, dec in zip(plan_rows, replayed):
        assert row.mu == dec.params.mu
        assert row.b == dec.params.b
        expected_slow = dec.mode is gatemod.Mode.SLOW
        assert row.slow_invoked == expected_slow


def test_runs_are_deterministic():
    sc = adversarial_suite()[0]
    cfg = simworld.SimConfig(mode=simworld.SimMode.DUAL_SYNC, max_ticks=150)
    a = simworld.run_scenario(sc, cfg, simworld.default_stack())
    b = simworld.run_scenario(sc, cfg, simworld.default_stack())
    assert a.to_json() == b.to_json()


def test_max_ticks_and_timestamps():
    sc = cruise_scenario("cruise", 3.0, length=500.0)
    cfg = simworld.SimConfig(mode=simworld.SimMode.FAST_ONLY, max_ticks=40)
    report = simworld.run_scenario(sc, cfg, simworld.default_stack())
    assert not report.completed
    assert len(report.ticks) == 40
    for i, row in enumerate(report.ticks):
        assert row.tick == i
        assert abs(row.t - i * cfg.dt_sim) < 1e-12
    assert 0.0 < report.route_completion < 1.0


def test_collision_ends_run():
    sc = next(s for s in adversarial_suite() if "block" in s.name)
    cfg = simworld.SimConfig(mode=simworld.SimMode.FAST_ONLY, max_ticks=400)
    report = simworld.run_scenario(sc, cfg, simworld.default_stack())
    if report.count_events("collision"):
        last_event = report.events[-1]
        assert last_event.kind == "collision"
        assert report.ticks[-1].t <= last_event.t
        assert report.metrics["infraction_score"] <= 0.5


def test_component_checks():
    sc = cruise_scenario("cruise", 10.0)
    stack = simworld.default_stack()
    stack.slow_fn = None
    cfg = simworld.SimConfig(mode=simworld.SimMode.DUAL_SYNC)
    with pytest.raises(simworld.ComponentMissingError):
        simworld.run_scenario(sc, cfg, stack)
    # fast-only does not need the slow side
    cfg = simworld.SimConfig(mode=simworld.SimMode.FAST_ONLY, max_ticks=5)
    simworld.run_scenario(sc, cfg, stack)


def test_dual_async_smoke_and_fallback():
    sc = cruise_scenario("cruise", 10.0, length=80.0)
    cfg = simworld.SimConfig(mode=simworld.SimMode.DUAL_ASYNC, max_ticks=150)
    report = simworld.run_scenario(sc, cfg, simworld.default_stack())
    assert report.metrics["collisions"] == 0

    def exploding(scene, traj, prompts):
        raise simworld.slowsys.MalformedResponseError("boom")

    stack = simworld.default_stack()
    stack.slow_fn = exploding
    cfg = simworld.SimConfig(mode=simworld.SimMode.ALWAYS_SLOW, max_ticks=30)
    report = simworld.run_scenario(
        cruise_scenario("cruise", 10.0), cfg, stack
    )
    assert report.count_events("slow_fallback") >= 1
    assert len(report.ticks) == 30  # the loop survives every failure


def test_script_time_trigger_brakes_agent():
    sc = next(s for s in adversarial_suite() if "brake-lead" in s.name)
    cfg = simworld.SimConfig(mode=simworld.SimMode.FAST_ONLY, max_ticks=100)
    report = simworld.run_scenario(sc, cfg, simworld.default_stack())
    lead_speeds = [
        a["speed"] for row in report.ticks for a in row.agents if a["id"] == "lead"
    ]
    assert lead_speeds[0] > lead_speeds[-1]


def test_light_switch_applies_at_time():
    # starts green, flips red at the first switch, green again at the second
    sc = next(s for s in adversarial_suite() if "switch" in s.name)
    red_at = sc.light_switches[0].t
    green_at = sc.light_switches[1].t
    cfg = simworld.SimConfig(mode=simworld.SimMode.FAST_ONLY, max_ticks=200)
    report = simworld.run_scenario(sc, cfg, simworld.default_stack())
    before = [row for row in report.ticks if row.t < red_at]
    during = [row for row in report.ticks if red_at <= row.t < green_at]
    assert before and during
    assert all(row.lights[0] == "Green" for row in before)
    assert all(row.lights[0] == "Red" for row in during)
    for row in report.ticks:
        if row.t >= green_at:
            assert row.lights[0] == "Green"


# ---------------------------------------------------------------- report io

def test_report_round_trip_and_csv():
    sc = cruise_scenario("cruise", 10.0, length=40.0)
    cfg = simworld.SimConfig(mode=simworld.SimMode.DUAL_SYNC, max_ticks=60)
    report = simworld.run_scenario(sc, cfg, simworld.default_stack())
    back = simworld.report_from_dict(json.loads(report.to_json()))
    assert back.to_json() == report.to_json()
    csv_text = report.tick_csv()
    lines = csv_text.splitlines()
    assert lines[0] == ",".join(simworld.CSV_COLUMNS)
    assert len(lines) == len(report.ticks) + 1


def test_load_report_missing_file(tmp_path):
    with pytest.raises(simworld.LogNotFoundError):
        simworld.load_report(str(tmp_path / "nope.json"))


def test_scenes_from_report_reconstructs_world():
    sc = red_light_scenario("red", 10.0, light_at=45.0)
    cfg = simworld.SimConfig(mode=simworld.SimMode.FAST_ONLY, max_ticks=50)
    report = simworld.run_scenario(sc, cfg, simworld.default_stack())
    scenes = simworld.scenes_from_report(report)
    assert len(scenes) == len(report.ticks)
    for scene, row in zip(scenes, report.ticks):
        assert scene.timestamp == row.t
        assert scene.ego.x == row.x and scene.ego.speed == row.speed
        assert len(scene.agents) == len(row.agents)
    # light states flow through
    light_states = {
        el.state for s in scenes for el in s.map_elements
        if el.kind.value == "TrafficLight"
    }
    assert LightState.RED in light_states


def test_slow_rate_counts_planning_rows_only():
    report = simworld.RunReport("s", "DualSync", 0, {}, {})
    assert report.slow_rate() == 0.0
    mk = lambda reason, slow: simworld.TickRow(
        0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, "Fast", reason, 0.0, 0.0, 0.0,
        0, slow, 0.0, 0.0, [], [],
    )
    report.ticks = [mk("Routine", True), mk("", False), mk("Routine", False)]
    assert report.slow_rate() == 0.5


# ---------------------------------------------------------------- metrics

def test_round_half_up():
    assert simworld.round_half_up(0.185) == 0.19
    assert simworld.round_half_up(0.184999) == 0.18
    assert simworld.round_half_up(0.5, 0) == 1.0
    assert simworld.round_half_up(-0.5, 0) == -1.0  # away from zero on .5


def test_average_horizons_examples():
    assert simworld.average_horizons([0.19, 0.62, 1.25]) == 0.69
    assert simworld.average_horizons([0.02, 0.09, 0.44]) == 0.18
    with pytest.raises(ValueError):
        simworld.average_horizons([])


def _world_traj(points):
    return Trajectory.from_points(points, 0.5, Frame.WORLD)


def test_open_loop_identity_is_zero():
    traj = _world_traj([(i * 5.0, 0.0) for i in range(1, 7)])
    m = simworld.open_loop_metrics(traj, traj)
    assert m["l2_point"] == {"1s": 0.0, "2s": 0.0, "3s": 0.0, "avg": 0.0}
    assert m["l2_frame"]["avg"] == 0.0
    assert m["collision"]["avg"] == 0.0


def test_open_loop_crafted_offsets():
    # axis-aligned lateral offsets make every displacement exact
    expert = _world_traj([(i * 5.0, 0.0) for i in range(1, 7)])
    pred = _world_traj(
        [
            (5.0, 0.1), (10.0, 0.19),
            (15.0, 0.4), (20.0, 0.62),
            (25.0, 1.0), (30.0, 1.25),
        ]
    )
    m = simworld.open_loop_metrics(pred, expert)
    assert m["l2_point"]["1s"] == 0.19
    assert m["l2_point"]["2s"] == 0.62
    assert m["l2_point"]["3s"] == 1.25
    assert m["l2_point"]["avg"] == 0.69
    # frame convention averages all displacements up to each horizon
    assert abs(m["l2_frame"]["1s"] - (0.1 + 0.19) / 2.0) < 1e-12
    assert abs(m["l2_frame"]["3s"] - (0.1 + 0.19 + 0.4 + 0.62 + 1.0 + 1.25) / 6.0) < 1e-12


def test_open_loop_collision_latches_at_horizon():
    expert = _world_traj([(i * 5.0, 0.0) for i in range(1, 7)])
    pred = _world_traj([(i * 5.0, 0.0) for i in range(1, 7)])
    # static blocker sits on the 2 s point (x = 20)
    blocker = car("b", 20.0, 0.0)
    m = simworld.open_loop_metrics(pred, expert, (blocker,))
    assert m["collision"]["1s"] == 0.0
    assert m["collision"]["2s"] == 1.0
    assert m["collision"]["3s"] == 1.0   # sticky once hit
    assert m["collision"]["avg"] == simworld.average_horizons([0.0, 1.0, 1.0])


def test_open_loop_moving_agent_propagates():
    expert = _world_traj([(i * 5.0, 0.0) for i in range(1, 7)])
    pred = _world_traj([(i * 5.0, 0.0) for i in range(1, 7)])
    # oncoming car meets the ego's 1 s point (x = 10) exactly at t = 1
    oncoming = car("o", 20.0, 0.0, heading=math.pi, speed=10.0)
    m = simworld.open_loop_metrics(pred, expert, (oncoming,))
    assert m["collision"]["1s"] == 1.0


def test_open_loop_errors():
    short = _world_traj([(5.0, 0.0)] * 5)
    full = _world_traj([(i * 5.0, 0.0) for i in range(1, 7)])
    with pytest.raises(simworld.HorizonTooShortError):
        simworld.open_loop_metrics(short, full)
    coarse = Trajectory.from_points([(i * 5.0, 0.0) for i in range(1, 7)], 1.0, Frame.WORLD)
    with pytest.raises(ValueError):
        simworld.open_loop_metrics(coarse, full)
    ego_frame = Trajectory.from_points([(i * 5.0, 0.0) for i in range(1, 7)], 0.5, Frame.EGO)
    with pytest.raises(ValueError):
        simworld.open_loop_metrics(ego_frame, full)
    with pytest.raises(simworld.HorizonTooShortError):
        simworld.open_loop_metrics(full, full, horizons=(4.0,))


def _stub_report(rc, collisions=0, red_lights=0):
    report = simworld.RunReport("s", "FastOnly", 0, {}, {})
    report.route_completion = rc
    for _ in range(collisions):
        report.events.append(simworld.Event(0.0, "collision", {}))
    for _ in range(red_lights):
        report.events.append(simworld.Event(0.0, "red_light", {}))
    return report


def test_closed_loop_metrics_product():
    m = simworld.closed_loop_metrics(_stub_report(1.0))
    assert m["driving_score"] == 1.0
    m = simworld.closed_loop_metrics(_stub_report(0.8, collisions=1))
    assert m["infraction_score"] == 0.5
    assert m["driving_score"] == 0.4
    m = simworld.closed_loop_metrics(_stub_report(1.0, red_lights=2))
    assert abs(m["infraction_score"] - 0.49) < 1e-12


def test_closed_loop_metrics_fuzz_product_identity():
    rng = random.Random(41)
    for _ in range(200):
        rc = rng.uniform(0.0, 1.0)
        nc = rng.randint(0, 3)
        nr = rng.randint(0, 3)
        m = simworld.closed_loop_metrics(_stub_report(rc, nc, nr))
        assert m["driving_score"] == m["route_completion"] * m["infraction_score"]
        assert m["infraction_score"] == (0.5 ** nc) * (0.7 ** nr)


def test_closed_loop_metrics_custom_factors():
    m = simworld.closed_loop_metrics(
        _stub_report(0.8904, red_lights=1), red_light_factor=0.7281
    )
    assert abs(m["driving_score"] - 0.8904 * 0.7281) < 1e-12
