"""Fast trajectory proposer: a command-conditioned kinematic lattice.

Stands in for an end-to-end planning network: for each navigation command it
rolls out constant-curvature arcs under trapezoidal speed profiles and emits
the resulting candidate set. Everything is deterministic given the config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

from dualdrive.core import Frame, NavigationCommand, Scene, Trajectory

# Straight-line degenerate branch below this curvature magnitude.
KAPPA_EPS = 1e-12


class EmptyConfigError(ValueError):
    """Sampler config yields no candidates (n_k = 0 or an empty curvature set)."""


def _default_curvatures() -> Dict[NavigationCommand, Tuple[float, ...]]:
    return {
        NavigationCommand.KEEP_FORWARD: (0.0, 0.01, -0.01),
        NavigationCommand.TURN_LEFT: (0.05, 0.1),
        NavigationCommand.TURN_RIGHT: (-0.05, -0.1),
    }


@dataclass(frozen=True)
class SamplerConfig:
    """Lattice shape: per-command curvature sets crossed with speed deltas."""

    n_k: int = 5
    speed_deltas: Tuple[float, ...] = (-4.0, -2.0, 0.0, 2.0)
    curvatures: Mapping[NavigationCommand, Tuple[float, ...]] = field(
        default_factory=_default_curvatures
    )
    horizon_steps: int = 6
    dt: float = 0.5
    comfort_accel: float = 2.0

    def __post_init__(self) -> None:
        if self.n_k < 1:
            raise EmptyConfigError(f"n_k must be >= 1, got {self.n_k}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.horizon_steps < 1:
            raise ValueError(f"horizon_steps must be >= 1, got {self.horizon_steps}")
        if not self.speed_deltas:
            raise EmptyConfigError("speed_deltas must be non-empty")
        if self.comfort_accel <= 0.0:
            raise ValueError(f"comfort_accel must be positive, got {self.comfort_accel}")
        for cmd, kappas in self.curvatures.items():
            for k in kappas:
                if abs(k) > 0.2:
                    raise ValueError(f"|curvature| must be <= 0.2 1/m, got {k} for {cmd.value}")


@dataclass(frozen=True)
class Candidate:
    candidate_id: int
    command: NavigationCommand
    trajectory: Trajectory
    curvature: float
    speed_delta: float
    speeds: Tuple[float, ...]


@dataclass(frozen=True)
class CandidateSet:
    candidates: Tuple[Candidate, ...]

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def by_id(self, candidate_id: int) -> Candidate:
        for c in self.candidates:
            if c.candidate_id == candidate_id:
                return c
        raise KeyError(candidate_id)


def speed_profile(
    v0: float, delta: float, steps: int, dt: float, comfort_accel: float
) -> Tuple[float, ...]:
    """Per-step speeds ramping from v0 toward max(0, v0 + delta).

    Trapezoidal: the speed moves toward the target by at most
    comfort_accel*dt per step, then holds. speeds[i] is the speed held
    during step i (between waypoints i-1 and i).
    """
    target = max(0.0, v0 + delta)
    out = []
    v = v0
    max_step = comfort_accel * dt
    for _ in range(steps):
        gap = target - v
        if abs(gap) <= max_step:
            v = target
        else:
            v += math.copysign(max_step, gap)
        out.append(v)
    return tuple(out)


def rollout_arc(
    speeds: Sequence[float],
    kappa: float,
    dt: float,
    start: Tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> Trajectory:
    """Integrate a constant-curvature arc through per-step speeds.

    Each step advances by arc length v*dt along curvature kappa, i.e. along
    the exact circle, not its chord: with delta = v*kappa*dt the displacement
    is v*dt * sinc(delta/2) in the direction heading + delta/2, and the new
    heading is heading + delta. For |kappa| < 1e-12 the rollout degenerates
    to exact straight-line steps.
    """
    x, y, heading = start
    straight = abs(kappa) < KAPPA_EPS
    pts = []
    for v in speeds:
        step = v * dt
        if straight:
            x += step * math.cos(heading)
            y += step * math.sin(heading)
        else:
            delta = step * kappa
            half = 0.5 * delta
            if abs(half) < 1e-8:
                chord = 1.0 - half * half / 6.0
            else:
                chord = math.sin(half) / half
            x += step * chord * math.cos(heading + half)
            y += step * chord * math.sin(heading + half)
            heading += delta
        pts.append((x, y))
    return Trajectory.from_points(pts, dt, Frame.EGO)


def sample_candidates(
    scene: Scene,
    cfg: SamplerConfig,
    commands: Optional[Sequence[NavigationCommand]] = None,
) -> CandidateSet:
    """Build the candidate lattice for a scene.

    With commands=None every navigation command is sampled (N_C * n_k
    candidates); pass [scene.command] for the command-conditioned variant.
    Candidate ids number the emission order: commands in enum order, then
    (curvature, speed delta) in curvature-major product order, truncated to
    n_k per command.
    """
    if commands is None:
        commands = tuple(NavigationCommand)
    out = []
    cid = 0
    for cmd in commands:
        kappas = tuple(cfg.curvatures.get(cmd, ()))
        if not kappas:
            raise EmptyConfigError(f"no curvature set for command {cmd.value}")
        combos = [(k, d) for k in kappas for d in cfg.speed_deltas]
        for kappa, delta in combos[: cfg.n_k]:
            speeds = speed_profile(
                scene.ego.speed, delta, cfg.horizon_steps, cfg.dt, cfg.comfort_accel
            )
            traj = rollout_arc(speeds, kappa, cfg.dt)
            out.append(Candidate(cid, cmd, traj, kappa, delta, speeds))
            cid += 1
    return CandidateSet(tuple(out))
