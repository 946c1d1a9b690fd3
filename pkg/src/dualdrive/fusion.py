"""Feedback fusion: cross-attention guidance and the IB alignment loss.

The slow system's meta-action plan steers the fast system here in two ways:
a scaled dot-product cross-attention between an ego token and the meta-action
embedding table (producing a guidance vector), and a score bonus on
compatible candidates with a hard safety floor. The information-bottleneck
head aligns scene features with the planning-state bits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from dualdrive.core import (
    LightState,
    MapElementKind,
    N_META_ACTIONS,
    LatAction,
    LonAction,
    MetaAction,
    NavigationCommand,
    Scene,
    SlowFeedback,
)
from dualdrive.fastplan import Candidate, CandidateSet
from dualdrive.geometry import project_to_polyline, polyline_length
from dualdrive.reward import RewardBreakdown, speed_limit

D_A = 16   # ego-token / embedding dimension
D_K = 16   # key dimension
D_V = 16   # value dimension
D_Z = 16   # IB feature dimension
D_LATENT = 8
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
GUIDANCE_STRENGTH = 0.3

WEIGHT_FILE_VERSION = 1


class ShapeMismatchError(ValueError):
    """Operand dimensions disagree with the declared table shapes."""


class WeightFileError(ValueError):
    """Weight file missing, wrong version, or shape header mismatch."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatchError(msg)


@dataclass(frozen=True)
class ActionEmbeddings:
    """One d_A-dim row per MetaAction, ordered by MetaAction.index()."""

    table: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.table, dtype=float)
        if t.ndim != 2:
            raise ShapeMismatchError(f"embedding table must be 2-D, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("embedding table has non-finite entries")
        object.__setattr__(self, "table", t)

    @classmethod
    def seeded(cls, seed: int = 0, n_a: int = N_META_ACTIONS, d_a: int = D_A) -> "ActionEmbeddings":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 1.0, (n_a, d_a)))

    def row(self, action: MetaAction) -> np.ndarray:
        return self.table[action.index()]


@dataclass(frozen=True)
class ProjectionSet:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self) -> None:
        for name in ("w_q", "w_k", "w_v"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.ndim != 2:
                raise ShapeMismatchError(f"{name} must be 2-D, got shape {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, m)
        if self.w_q.shape[0] != self.w_k.shape[0]:
            raise ShapeMismatchError("w_q and w_k must share the key dimension")
        if self.w_q.shape[1] != self.w_k.shape[1] or self.w_q.shape[1] != self.w_v.shape[1]:
            raise ShapeMismatchError("projections must share the input dimension")

    @classmethod
    def seeded(cls, seed: int = 0, d_a: int = D_A, d_k: int = D_K, d_v: int = D_V) -> "ProjectionSet":
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(d_a)
        return cls(
            rng.normal(0.0, scale, (d_k, d_a)),
            rng.normal(0.0, scale, (d_k, d_a)),
            rng.normal(0.0, scale, (d_v, d_a)),
        )


def save_weights(path: str, emb: ActionEmbeddings, proj: ProjectionSet) -> None:
    doc = {
        "version": WEIGHT_FILE_VERSION,
        "shapes": {
            "embeddings": list(emb.table.shape),
            "w_q": list(proj.w_q.shape),
            "w_k": list(proj.w_k.shape),
            "w_v": list(proj.w_v.shape),
        },
        "embeddings": emb.table.tolist(),
        "w_q": proj.w_q.tolist(),
        "w_k": proj.w_k.tolist(),
        "w_v": proj.w_v.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_weights(path: str) -> Tuple[ActionEmbeddings, ProjectionSet]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise WeightFileError(f"cannot read weight file {path}: {exc}") from exc
    except ValueError as exc:
        raise WeightFileError(f"weight file {path} is not valid JSON") from exc
    if doc.get("version") != WEIGHT_FILE_VERSION:
        raise WeightFileError(
            f"unsupported weight file version {doc.get('version')!r} (want {WEIGHT_FILE_VERSION})"
        )
    shapes = doc.get("shapes", {})
    arrays = {}
    for name in ("embeddings", "w_q", "w_k", "w_v"):
        if name not in doc or name not in shapes:
            raise WeightFileError(f"weight file missing {name!r}")
        arr = np.asarray(doc[name], dtype=float)
        if list(arr.shape) != list(shapes[name]):
            raise WeightFileError(
                f"{name} shape header {shapes[name]} disagrees with data shape {list(arr.shape)}"
            )
        arrays[name] = arr
    return ActionEmbeddings(arrays["embeddings"]), ProjectionSet(
        arrays["w_q"], arrays["w_k"], arrays["w_v"]
    )


# ------- feature encoders -------


def _nearest_agent(scene: Scene):
    best = None
    best_r = math.inf
    c, s = math.cos(scene.ego.heading), math.sin(scene.ego.heading)
    for agent in scene.agents:
        dx, dy = agent.x - scene.ego.x, agent.y - scene.ego.y
        ex, ey = c * dx + s * dy, -s * dx + c * dy
        r = math.hypot(ex, ey)
        if r < best_r:
            best_r = r
            best = (agent, ex, ey, r)
    return best


def _red_light_distance(scene: Scene) -> Optional[float]:
    from dualdrive.slowsys import element_distance_ahead  # local to avoid import cycle

    dists = [
        element_distance_ahead(scene, el)
        for el in scene.map_elements
        if el.kind is MapElementKind.TRAFFIC_LIGHT and el.state is LightState.RED
    ]
    dists = [d for d in dists if d is not None]
    return min(dists) if dists else None


def build_ego_token(scene: Scene, candidate: Candidate, breakdown: RewardBreakdown) -> np.ndarray:
    """Deterministic 16-dim encoding of ego state + best-candidate summary."""
    v_ref = speed_limit(scene)
    speeds = candidate.speeds
    end = candidate.trajectory.waypoints[-1]
    near = _nearest_agent(scene)
    red = _red_light_distance(scene)
    cmd_index = list(NavigationCommand).index(scene.command)
    feats = np.array(
        [
            scene.ego.speed / v_ref,
            scene.ego.accel / 3.0,
            (sum(speeds) / len(speeds)) / v_ref,
            speeds[-1] / v_ref,
            candidate.curvature / 0.2,
            end.y / 10.0,
            end.x / 30.0,
            breakdown.c_safety,
            breakdown.c_comfort,
            breakdown.c_efficiency,
            breakdown.c_economic,
            (near[3] / 50.0) if near else 1.0,
            (math.atan2(near[2], near[1]) / math.pi) if near else 0.0,
            0.0 if red is None else max(0.0, 1.0 - red / 40.0),
            cmd_index / 2.0,
            1.0,
        ]
    )
    return np.clip(feats, -3.0, 3.0)


def scene_features(scene: Scene) -> np.ndarray:
    """The 16-dim IB input z: ego kinematics, nearest agent, lights, route."""
    near = _nearest_agent(scene)
    red = _red_light_distance(scene)
    kind_onehot = [0.0, 0.0, 0.0, 0.0]
    if near:
        kind_onehot[["car", "pedestrian", "cyclist", "static"].index(near[0].kind.value)] = 1.0
    s_here, lateral = project_to_polyline(scene.ego.x, scene.ego.y, scene.route)
    total = polyline_length(scene.route)
    feats = np.array(
        [
            scene.ego.speed / 15.0,
            scene.ego.accel / 3.0,
            scene.ego.heading / math.pi,
            (near[3] / 50.0) if near else 1.0,
            (math.atan2(near[2], near[1]) / math.pi) if near else 0.0,
            ((near[0].speed - scene.ego.speed) / 15.0) if near else 0.0,
            (near[0].half_length / 3.0) if near else 0.0,
            *kind_onehot,
            0.0 if red is None else max(0.0, 1.0 - red / 40.0),
            min(lateral, 5.0) / 5.0,
            (s_here / total) if total > 0 else 0.0,
            min(scene.ego.speed / max(speed_limit(scene), 1e-9), 2.0),
            1.0,
        ]
    )
    return np.clip(feats, -3.0, 3.0)


# ------- cross-attention -------


def cross_attend(
    ego: np.ndarray, emb: ActionEmbeddings, proj: ProjectionSet
) -> Tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention of one ego token over the action table.

    Q = W_Q ego; K = emb W_K^T; V = emb W_V^T;
    weights = softmax(K Q / sqrt(d_k)); output = weights^T V.
    The softmax subtracts the max logit first, so uniform shifts of the
    logits are exactly neutral and large magnitudes cannot overflow.
    """
    ego = np.asarray(ego, dtype=float)
    _check(ego.ndim == 1, f"ego token must be a vector, got shape {ego.shape}")
    _check(
        ego.shape[0] == proj.w_q.shape[1],
        f"ego dim {ego.shape[0]} != projection input dim {proj.w_q.shape[1]}",
    )
    _check(
        emb.table.shape[1] == proj.w_k.shape[1],
        f"embedding dim {emb.table.shape[1]} != projection input dim {proj.w_k.shape[1]}",
    )
    if not np.all(np.isfinite(ego)):
        raise ValueError("ego token has non-finite entries")
    q = proj.w_q @ ego
    scale = 1.0 / math.sqrt(proj.w_q.shape[0])
    # Row projections and reductions are kept position-independent (per-row
    # matvecs, fsum) so permuting the embedding rows permutes the weights
    # exactly and leaves the output bit-identical.
    logits = [float(np.dot(proj.w_k @ row, q)) * scale for row in emb.table]
    v_rows = [proj.w_v @ row for row in emb.table]
    m = max(logits)
    exps = [math.exp(l - m) for l in logits]
    denom = math.fsum(exps)
    w = np.array([e / denom for e in exps])
    out = np.array(
        [
            math.fsum(w[i] * v_rows[i][j] for i in range(len(v_rows)))
            for j in range(proj.w_v.shape[0])
        ]
    )
    return out, w


# ------- information bottleneck -------


@dataclass(frozen=True)
class IbModel:
    """Linear IB head: z -> diagonal Gaussian posterior -> Bernoulli logits.

    The decoder consumes the posterior mean (the deterministic path), so the
    loss is smooth in every weight and the gradients below are exact.
    """

    w_mu: np.ndarray
    b_mu: np.ndarray
    w_logvar: np.ndarray
    b_logvar: np.ndarray
    w_dec: np.ndarray
    b_dec: np.ndarray
    beta: float = 1e-3

    def __post_init__(self) -> None:
        for name in ("w_mu", "b_mu", "w_logvar", "b_logvar", "w_dec", "b_dec"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.w_mu.shape != self.w_logvar.shape:
            raise ShapeMismatchError("w_mu and w_logvar must share a shape")
        if self.w_dec.shape[1] != self.w_mu.shape[0]:
            raise ShapeMismatchError("decoder input dim must equal the latent dim")
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")

    @classmethod
    def seeded(
        cls,
        seed: int = 0,
        d_z: int = D_Z,
        d_latent: int = D_LATENT,
        k: int = 8,
        beta: float = 1e-3,
    ) -> "IbModel":
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(d_z)
        return cls(
            rng.normal(0.0, scale, (d_latent, d_z)),
            np.zeros(d_latent),
            rng.normal(0.0, scale, (d_latent, d_z)),
            np.zeros(d_latent),
            rng.normal(0.0, 1.0 / math.sqrt(d_latent), (k, d_latent)),
            np.zeros(k),
            beta,
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def ib_loss(z: np.ndarray, bits, model: IbModel) -> Tuple[float, Dict[str, np.ndarray]]:
    """IB objective: Bernoulli reconstruction NLL + beta * KL(posterior || N(0, I)).

    Returns the scalar loss and analytic gradients for every weight array.
    The KL is the diagonal-Gaussian closed form 0.5*sum(exp(lv) + mu^2 - 1 - lv);
    log-variances are clamped to [-10, 10] with zero gradient at the clamp.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray([float(b) for b in (bits.bits if hasattr(bits, "bits") else bits)])
    if z.shape[0] != model.w_mu.shape[1]:
        raise ShapeMismatchError(f"z dim {z.shape[0]} != encoder input dim {model.w_mu.shape[1]}")
    if y.shape[0] != model.w_dec.shape[0]:
        raise ShapeMismatchError(f"{y.shape[0]} bits for {model.w_dec.shape[0]} decoder logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("z has non-finite entries")

    mu = model.w_mu @ z + model.b_mu
    raw_lv = model.w_logvar @ z + model.b_logvar
    lv = np.clip(raw_lv, LOGVAR_MIN, LOGVAR_MAX)
    lv_mask = ((raw_lv > LOGVAR_MIN) & (raw_lv < LOGVAR_MAX)).astype(float)

    logits = model.w_dec @ mu + model.b_dec
    # Bernoulli NLL from logits: softplus(l) - y*l, numerically stable.
    nll = float(np.sum(np.logaddexp(0.0, logits) - y * logits))
    kl = 0.5 * float(np.sum(np.exp(lv) + mu * mu - 1.0 - lv))
    loss = nll + model.beta * kl

    d_logits = _sigmoid(logits) - y
    d_mu = model.w_dec.T @ d_logits + model.beta * mu
    d_lv = model.beta * 0.5 * (np.exp(lv) - 1.0) * lv_mask
    grads = {
        "w_dec": np.outer(d_logits, mu),
        "b_dec": d_logits,
        "w_mu": np.outer(d_mu, z),
        "b_mu": d_mu,
        "w_logvar": np.outer(d_lv, z),
        "b_logvar": d_lv,
    }
    return loss, grads


# ------- guidance -------


@dataclass(frozen=True)
class GuidedSelection:
    candidate_id: int
    breakdown: RewardBreakdown
    bonus: float
    adjusted_total: float


def _mean_accel(candidate: Candidate) -> float:
    speeds = candidate.speeds
    if len(speeds) < 2:
        return 0.0
    horizon = (len(speeds) - 1) * candidate.trajectory.dt
    return (speeds[-1] - speeds[0]) / horizon


def compat(candidate: Candidate, action: MetaAction) -> float:
    """Agreement in [0, 1] between a candidate and one meta-action.

    Longitudinal and lateral agreement each contribute 0.5: mean accel sign
    against a 0.5 m/s^2 deadband (Stop: terminal speed <= 0.5 m/s), terminal
    lateral offset against a 1.5 m deadband (turns: curvature sign beyond
    0.02 1/m).
    """
    acc = _mean_accel(candidate)
    lon = action.longitudinal
    if lon is LonAction.ACCELERATE:
        lon_ok = acc >= 0.5
    elif lon is LonAction.DECELERATE:
        lon_ok = acc <= -0.5
    elif lon is LonAction.STOP:
        lon_ok = candidate.speeds[-1] <= 0.5
    else:
        lon_ok = abs(acc) < 0.5

    end_y = candidate.trajectory.waypoints[-1].y
    lat = action.lateral
    if lat is LatAction.KEEP_LANE:
        lat_ok = abs(end_y) <= 1.5
    elif lat is LatAction.CHANGE_LEFT:
        lat_ok = end_y > 1.5
    elif lat is LatAction.CHANGE_RIGHT:
        lat_ok = end_y < -1.5
    elif lat is LatAction.TURN_LEFT:
        lat_ok = candidate.curvature > 0.02
    else:
        lat_ok = candidate.curvature < -0.02

    return 0.5 * float(lon_ok) + 0.5 * float(lat_ok)


def apply_guidance(
    cset: CandidateSet,
    breakdowns: Mapping[int, RewardBreakdown],
    feedback: SlowFeedback,
    guidance: Optional[np.ndarray] = None,
    strength: float = GUIDANCE_STRENGTH,
) -> GuidedSelection:
    """Re-rank candidates under the slow plan's first meta-action.

    Each candidate's total gains strength * compat(candidate, plan[0]); the
    argmax is re-taken with ties to the lowest candidate id. While strength
    is positive a candidate with zero safety can never win unless every
    candidate has zero safety; at strength 0 the whole adjustment (floor
    included) is inert and the selection equals the plain reward argmax.
    The attention guidance vector is accepted for logging/inspection and
    does not enter the bonus.
    """
    if strength < 0.0:
        raise ValueError(f"strength must be >= 0, got {strength}")
    if len(cset) == 0:
        raise ValueError("no candidates to guide")
    action = feedback.plan[0]
    floor_active = strength > 0.0 and any(
        breakdowns[c.candidate_id].c_safety > 0.0 for c in cset
    )
    best: Optional[GuidedSelection] = None
    for c in sorted(cset, key=lambda c: c.candidate_id):
        bd = breakdowns[c.candidate_id]
        if floor_active and bd.c_safety == 0.0:
            continue
        bonus = strength * compat(c, action)
        adjusted = bd.total + bonus
        if best is None or adjusted > best.adjusted_total:
            best = GuidedSelection(c.candidate_id, bd, bonus, adjusted)
    assert best is not None
    return best
