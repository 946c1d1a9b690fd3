"""Reward-uncertainty gate between the fast and slow planning paths.

Rewards are modeled per tick as Laplace(mu, b) around an EMA reward
expectation. The fast path keeps control while the observed reward is high
and the fitted scale b (the uncertainty proxy) is low; otherwise the slow
path is consulted. Switches are debounced by a consecutive-tick hysteresis.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple


class EmptyWindowError(ValueError):
    """Laplace fit requested over zero samples."""


class Mode(enum.Enum):
    FAST = "Fast"
    SLOW = "Slow"


class Reason(enum.Enum):
    ROUTINE = "Routine"
    LOW_REWARD = "LowReward"
    HIGH_UNCERTAINTY = "HighUncertainty"
    HYSTERESIS = "Hysteresis"


@dataclass(frozen=True)
class LaplaceParams:
    mu: float
    b: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mu) and math.isfinite(self.b)):
            raise ValueError(f"non-finite Laplace params ({self.mu}, {self.b})")
        if self.b <= 0.0:
            raise ValueError(f"scale b must be positive, got {self.b}")


@dataclass(frozen=True)
class GateConfig:
    tau_r: float = 0.6
    tau_b: float = 0.15
    ema_alpha: float = 0.2
    window: int = 20
    hysteresis_ticks: int = 2
    min_b: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError(f"ema_alpha must be in (0, 1], got {self.ema_alpha}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.hysteresis_ticks < 0:
            raise ValueError(f"hysteresis_ticks must be >= 0, got {self.hysteresis_ticks}")
        if self.min_b <= 0.0:
            raise ValueError(f"min_b must be positive, got {self.min_b}")
        if not math.isfinite(self.tau_r):
            raise ValueError("tau_r must be finite")
        # tau_b may be inf: that disables the uncertainty trigger entirely.
        if math.isnan(self.tau_b):
            raise ValueError("tau_b must not be NaN")


@dataclass(frozen=True)
class GateDecision:
    mode: Mode
    reason: Reason
    reward: float
    params: LaplaceParams


def fit_laplace(rewards: Sequence[float], mu: float, min_b: float = 1e-6) -> LaplaceParams:
    """Maximum-likelihood Laplace scale around a fixed location mu.

    b* = mean(|r - mu|), floored at min_b so the log-likelihood stays finite
    on constant windows.
    """
    if len(rewards) == 0:
        raise EmptyWindowError("cannot fit a Laplace scale over zero samples")
    b = sum(abs(r - mu) for r in rewards) / len(rewards)
    return LaplaceParams(mu, max(b, min_b))


def log_likelihood(rewards: Sequence[float], params: LaplaceParams) -> float:
    """Sum of Laplace log-densities: sum_t [-ln(2b) - |r_t - mu| / b]."""
    if len(rewards) == 0:
        raise EmptyWindowError("log-likelihood over zero samples")
    inv_b = 1.0 / params.b
    const = -math.log(2.0 * params.b)
    return sum(const - abs(r - params.mu) * inv_b for r in rewards)


def _base_mode(reward: float, b: float, cfg: GateConfig) -> Tuple[Mode, Reason]:
    if reward < cfg.tau_r:
        return Mode.SLOW, Reason.LOW_REWARD
    if b > cfg.tau_b:
        return Mode.SLOW, Reason.HIGH_UNCERTAINTY
    return Mode.FAST, Reason.ROUTINE


def decide(
    reward: float,
    params: LaplaceParams,
    cfg: GateConfig,
    history: Sequence[GateDecision] = (),
) -> GateDecision:
    """One gating decision given the fitted params and prior decisions.

    Base rule: Fast iff reward >= tau_r and b <= tau_b. A switch away from
    the previous mode requires the base rule to contradict it for
    hysteresis_ticks consecutive ticks (this one included); shorter streaks
    keep the previous mode with reason Hysteresis. The streak is recovered
    from the trailing Hysteresis entries in `history`, so the function stays
    stateless. With hysteresis_ticks = 0 the decision is a pure function of
    (reward, b). The first-ever tick has no previous mode and takes the base
    rule directly.
    """
    base, reason = _base_mode(reward, params.b, cfg)
    if not history:
        return GateDecision(base, reason, reward, params)
    prev = history[-1].mode
    if base is prev:
        return GateDecision(base, reason, reward, params)
    streak = 1
    for d in reversed(history):
        if d.reason is Reason.HYSTERESIS and d.mode is prev:
            streak += 1
        else:
            break
    if streak >= cfg.hysteresis_ticks:
        return GateDecision(base, reason, reward, params)
    return GateDecision(prev, Reason.HYSTERESIS, reward, params)


class UncertaintyGate:
    """Stateful wrapper: EMA reward expectation + residual window + decisions."""

    def __init__(self, cfg: GateConfig):
        self.cfg = cfg
        self.mu: Optional[float] = None
        self.residuals: List[float] = []
        self.history: List[GateDecision] = []

    def observe(self, reward: float) -> GateDecision:
        """Fold in one reward observation and decide the mode for this tick.

        The residual is measured against the pre-update EMA (the prediction
        held before seeing this reward); the EMA then absorbs the sample.
        Estimation never depends on the thresholds, so replaying one log
        across a threshold grid reuses identical (mu, b) sequences.
        """
        if not math.isfinite(reward):
            raise ValueError(f"reward must be finite, got {reward}")
        if self.mu is None:
            self.mu = reward
        self.residuals.append(abs(reward - self.mu))
        if len(self.residuals) > self.cfg.window:
            del self.residuals[: len(self.residuals) - self.cfg.window]
        b = max(sum(self.residuals) / len(self.residuals), self.cfg.min_b)
        self.mu = self.cfg.ema_alpha * reward + (1.0 - self.cfg.ema_alpha) * self.mu
        params = LaplaceParams(self.mu, b)
        decision = decide(reward, params, self.cfg, self.history)
        self.history.append(decision)
        return decision


def replay(rewards: Sequence[float], cfg: GateConfig) -> List[GateDecision]:
    """Run the full gate over a recorded reward log."""
    g = UncertaintyGate(cfg)
    return [g.observe(r) for r in rewards]


def trigger_count(decisions: Sequence[GateDecision]) -> int:
    return sum(1 for d in decisions if d.mode is Mode.SLOW)
