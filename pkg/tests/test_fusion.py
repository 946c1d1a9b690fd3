"""Cross-attention guidance, the IB loss, and candidate re-ranking."""

import math
import random

import numpy as np
import pytest

from dualdrive import fusion, reward
from dualdrive.core import (
    DEFAULT_QUERIES,
    FeedbackSource,
    Frame,
    LatAction,
    LonAction,
    MetaAction,
    NavigationCommand,
    PlanningState,
    SlowFeedback,
    Trajectory,
)
from dualdrive.fastplan import Candidate, CandidateSet, SamplerConfig, sample_candidates
from helpers import make_scene, straight_traj


def seeded_pair(seed=0, n_a=20, d_a=8, d_k=8, d_v=8):
    emb = fusion.ActionEmbeddings.seeded(seed, n_a=n_a, d_a=d_a)
    proj = fusion.ProjectionSet.seeded(seed + 1, d_a=d_a, d_k=d_k, d_v=d_v)
    return emb, proj


# ------------------------------------------------------------- cross-attend

def test_attention_singleton_weight_is_one():
    emb, proj = seeded_pair(n_a=1)
    ego = np.linspace(-1.0, 1.0, 8)
    out, w = fusion.cross_attend(ego, emb, proj)
    assert w.shape == (1,)
    assert w[0] == 1.0
    assert np.array_equal(out, proj.w_v @ emb.table[0])


def test_attention_identical_rows_split_evenly():
    _, proj = seeded_pair()
    row = np.arange(8.0)
    emb = fusion.ActionEmbeddings(np.tile(row, (4, 1)))
    out, w = fusion.cross_attend(np.ones(8), emb, proj)
    assert np.array_equal(w, np.full(4, 0.25))
    assert np.array_equal(out, proj.w_v @ row)


def test_attention_scalar_fixture():
    # 1-d everything so the whole computation is checkable by hand:
    # q=2, logits = (2, 4), values = (3, 6)
    emb = fusion.ActionEmbeddings([[1.0], [2.0]])
    proj = fusion.ProjectionSet([[1.0]], [[1.0]], [[3.0]])
    out, w = fusion.cross_attend([2.0], emb, proj)
    e = math.exp(2.0 - 4.0)
    w0 = e / (e + 1.0)
    w1 = 1.0 / (e + 1.0)
    assert abs(w[0] - w0) < 1e-12
    assert abs(w[1] - w1) < 1e-12
    assert abs(out[0] - (w0 * 3.0 + w1 * 6.0)) < 1e-12


def test_attention_two_by_two_fixture():
    emb = fusion.ActionEmbeddings([[1.0, 0.0], [0.0, 1.0]])
    eye = [[1.0, 0.0], [0.0, 1.0]]
    proj = fusion.ProjectionSet(eye, eye, [[1.0, 1.0], [1.0, -1.0]])
    out, w = fusion.cross_attend([1.0, 2.0], emb, proj)
    s = 1.0 / math.sqrt(2.0)
    e0, e1 = math.exp(1.0 * s - 2.0 * s), 1.0
    w0, w1 = e0 / (e0 + e1), e1 / (e0 + e1)
    # values are rows of W_V applied to the unit embeddings: (1,1) and (1,-1)
    want = (w0 * 1.0 + w1 * 1.0, w0 * 1.0 + w1 * -1.0)
    assert abs(w[0] - w0) < 1e-12 and abs(w[1] - w1) < 1e-12
    assert abs(out[0] - want[0]) < 1e-12
    assert abs(out[1] - want[1]) < 1e-12


def test_attention_weights_form_distribution():
    rng = np.random.default_rng(11)
    for _ in range(30):
        n = int(rng.integers(1, 25))
        emb, proj = seeded_pair(int(rng.integers(1000)), n_a=n)
        ego = rng.normal(0.0, 2.0, 8)
        out, w = fusion.cross_attend(ego, emb, proj)
        assert np.all(w >= 0.0) and np.all(w <= 1.0)
        assert abs(math.fsum(w) - 1.0) < 1e-12
        # output stays inside the convex hull of the value rows
        v = emb.table @ proj.w_v.T
        assert np.all(out >= v.min(axis=0) - 1e-9)
        assert np.all(out <= v.max(axis=0) + 1e-9)


def test_attention_logit_shift_neutral():
    # adding delta to every embedding row shifts all logits by the same
    # constant; the weights must not move and the output shifts by W_V delta
    rng = np.random.default_rng(5)
    for _ in range(20):
        emb, proj = seeded_pair(int(rng.integers(1000)), n_a=12)
        ego = rng.normal(0.0, 1.0, 8)
        out, w = fusion.cross_attend(ego, emb, proj)
        u = proj.w_k.T @ (proj.w_q @ ego)
        c = rng.uniform(-40.0, 40.0) * math.sqrt(proj.w_q.shape[0])
        delta = c * u / float(u @ u)
        shifted = fusion.ActionEmbeddings(emb.table + delta)
        out2, w2 = fusion.cross_attend(ego, shifted, proj)
        assert np.max(np.abs(w2 - w)) < 1e-9
        assert np.max(np.abs(out2 - (out + proj.w_v @ delta))) < 1e-9


def test_attention_permutation_equivariant_exactly():
    rng = np.random.default_rng(23)
    for _ in range(50):
        n = int(rng.integers(2, 25))
        d = int(rng.integers(2, 12))
        emb = fusion.ActionEmbeddings(rng.normal(0.0, 1.0, (n, d)))
        proj = fusion.ProjectionSet.seeded(int(rng.integers(1000)), d_a=d, d_k=d, d_v=d)
        ego = rng.normal(0.0, 1.0, d)
        perm = rng.permutation(n)
        out, w = fusion.cross_attend(ego, emb, proj)
        out_p, w_p = fusion.cross_attend(
            ego, fusion.ActionEmbeddings(emb.table[perm]), proj
        )
        assert np.array_equal(w_p, w[perm])
        assert np.array_equal(out_p, out)


def test_attention_shape_errors():
    emb, proj = seeded_pair()
    with pytest.raises(fusion.ShapeMismatchError):
        fusion.cross_attend(np.ones(5), emb, proj)
    with pytest.raises(fusion.ShapeMismatchError):
        fusion.cross_attend(np.ones((2, 8)), emb, proj)
    with pytest.raises(ValueError):
        fusion.cross_attend(np.full(8, np.nan), emb, proj)
    bad_emb = fusion.ActionEmbeddings(np.ones((3, 5)))
    with pytest.raises(fusion.ShapeMismatchError):
        fusion.cross_attend(np.ones(8), bad_emb, proj)


def test_embedding_and_projection_validation():
    with pytest.raises(fusion.ShapeMismatchError):
        fusion.ActionEmbeddings(np.ones(4))
    with pytest.raises(ValueError):
        fusion.ActionEmbeddings(np.full((2, 2), np.inf))
    with pytest.raises(fusion.ShapeMismatchError):
        fusion.ProjectionSet(np.ones((3, 8)), np.ones((4, 8)), np.ones((4, 8)))
    with pytest.raises(fusion.ShapeMismatchError):
        fusion.ProjectionSet(np.ones((4, 8)), np.ones((4, 8)), np.ones((4, 7)))


def test_embedding_rows_follow_action_index():
    emb = fusion.ActionEmbeddings.seeded(3)
    action = MetaAction(LonAction.STOP, LatAction.CHANGE_LEFT)
    assert np.array_equal(emb.row(action), emb.table[action.index()])


# ------------------------------------------------------------- weight files

def test_weights_round_trip(tmp_path):
    emb, proj = seeded_pair(42)
    path = tmp_path / "weights.json"
    fusion.save_weights(str(path), emb, proj)
    emb2, proj2 = fusion.load_weights(str(path))
    assert np.array_equal(emb2.table, emb.table)
    assert np.array_equal(proj2.w_q, proj.w_q)
    assert np.array_equal(proj2.w_k, proj.w_k)
    assert np.array_equal(proj2.w_v, proj.w_v)


def test_weights_file_errors(tmp_path):
    with pytest.raises(fusion.WeightFileError):
        fusion.load_weights(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("not json {")
    with pytest.raises(fusion.WeightFileError):
        fusion.load_weights(str(bad))
    emb, proj = seeded_pair()
    good = tmp_path / "good.json"
    fusion.save_weights(str(good), emb, proj)
    import json

    doc = json.loads(good.read_text())
    doc["version"] = 99
    versioned = tmp_path / "versioned.json"
    versioned.write_text(json.dumps(doc))
    with pytest.raises(fusion.WeightFileError):
        fusion.load_weights(str(versioned))
    doc["version"] = fusion.WEIGHT_FILE_VERSION
    doc["shapes"]["w_q"] = [1, 1]
    lied = tmp_path / "lied.json"
    lied.write_text(json.dumps(doc))
    with pytest.raises(fusion.WeightFileError):
        fusion.load_weights(str(lied))


# ------------------------------------------------------------- ib loss

def _zero_model(k=8, d_z=16, d_latent=8, beta=1e-3, b_dec=None):
    return fusion.IbModel(
        np.zeros((d_latent, d_z)),
        np.zeros(d_latent),
        np.zeros((d_latent, d_z)),
        np.zeros(d_latent),
        np.zeros((k, d_latent)),
        np.zeros(k) if b_dec is None else np.asarray(b_dec, dtype=float),
        beta,
    )


def test_ib_loss_saturated_decoder_is_zero():
    # mu = 0 and lv = 0 kill the KL; +-500 logits make every bit certain
    bits = (1, 0, 1, 1, 0, 0, 1, 0)
    b_dec = [500.0 if b else -500.0 for b in bits]
    model = _zero_model(b_dec=b_dec, beta=1.0)
    loss, grads = fusion.ib_loss(np.ones(16), bits, model)
    # softplus(-500) leaves ~1e-217 of slack per zero bit, nothing more
    assert 0.0 <= loss < 1e-200
    assert all(np.max(np.abs(g)) == 0.0 for g in grads.values())


def test_ib_loss_uniform_decoder_is_k_ln2():
    model = _zero_model(beta=0.0)
    loss, _ = fusion.ib_loss(np.ones(16), (0, 1) * 4, model)
    assert abs(loss - 8.0 * math.log(2.0)) < 1e-12


def test_ib_loss_kl_zero_at_standard_posterior():
    # beta = 1 but mu = 0, lv = 0: loss is pure reconstruction
    model = _zero_model(beta=1.0)
    loss, _ = fusion.ib_loss(np.ones(16), (0,) * 8, model)
    assert abs(loss - 8.0 * math.log(2.0)) < 1e-12


def test_ib_loss_accepts_planning_state():
    state = PlanningState((True, False) * 4, DEFAULT_QUERIES)
    model = fusion.IbModel.seeded(0)
    z = np.linspace(-1.0, 1.0, 16)
    l1, _ = fusion.ib_loss(z, state, model)
    l2, _ = fusion.ib_loss(z, (1, 0) * 4, model)
    assert l1 == l2


def test_ib_loss_shape_and_finite_errors():
    model = fusion.IbModel.seeded(0)
    with pytest.raises(fusion.ShapeMismatchError):
        fusion.ib_loss(np.ones(5), (0,) * 8, model)
    with pytest.raises(fusion.ShapeMismatchError):
        fusion.ib_loss(np.ones(16), (0,) * 3, model)
    with pytest.raises(ValueError):
        fusion.ib_loss(np.full(16, np.nan), (0,) * 8, model)


def test_ib_model_validation():
    with pytest.raises(fusion.ShapeMismatchError):
        fusion.IbModel(
            np.zeros((8, 16)), np.zeros(8), np.zeros((7, 16)), np.zeros(7),
            np.zeros((8, 8)), np.zeros(8),
        )
    with pytest.raises(ValueError):
        fusion.IbModel.seeded(0, beta=-1.0)


def test_ib_gradients_match_central_differences():
    rng = np.random.default_rng(3)
    for trial in range(3):
        model = fusion.IbModel.seeded(trial, beta=0.05)
        z = rng.normal(0.0, 1.0, 16)
        bits = tuple(int(b) for b in rng.integers(0, 2, 8))
        _, grads = fusion.ib_loss(z, bits, model)
        h = 1e-6
        for name in ("w_dec", "b_dec", "w_mu", "b_mu", "w_logvar", "b_logvar"):
            arr = getattr(model, name)
            flat_idx = rng.choice(arr.size, size=min(5, arr.size), replace=False)
            for fi in flat_idx:
                idx = np.unravel_index(fi, arr.shape)
                bumped = {n: np.array(getattr(model, n)) for n in
                          ("w_mu", "b_mu", "w_logvar", "b_logvar", "w_dec", "b_dec")}
                bumped[name][idx] += h
                hi, _ = fusion.ib_loss(z, bits, fusion.IbModel(**bumped, beta=model.beta))
                bumped[name][idx] -= 2.0 * h
                lo, _ = fusion.ib_loss(z, bits, fusion.IbModel(**bumped, beta=model.beta))
                numeric = (hi - lo) / (2.0 * h)
                analytic = grads[name][idx]
                denom = max(abs(numeric), abs(analytic), 1e-8)
                assert abs(numeric - analytic) / denom < 1e-4


def test_ib_logvar_clamp_kills_gradient():
    model = _zero_model(beta=1.0)
    clamped = fusion.IbModel(
        model.w_mu, model.b_mu,
        np.full((8, 16), 10.0), model.b_logvar,  # raw lv = 160 >> 10
        model.w_dec, model.b_dec, 1.0,
    )
    _, grads = fusion.ib_loss(np.ones(16), (0,) * 8, clamped)
    assert np.all(grads["w_logvar"] == 0.0)
    assert np.all(grads["b_logvar"] == 0.0)


# ------------------------------------------------------------- feature encoders

def test_build_ego_token_shape_and_bias():
    scene = make_scene(speed=10.0)
    cset = sample_candidates(scene, SamplerConfig())
    cand = cset.candidates[0]
    bd = reward.score(cand.trajectory, scene, reward.RewardWeights())
    tok = fusion.build_ego_token(scene, cand, bd)
    assert tok.shape == (16,)
    assert tok[-1] == 1.0
    assert np.all(np.isfinite(tok))
    assert np.all(np.abs(tok) <= 3.0)
    assert np.array_equal(tok, fusion.build_ego_token(scene, cand, bd))


def test_scene_features_defaults_without_agents():
    feats = fusion.scene_features(make_scene(speed=7.5))
    assert feats.shape == (16,)
    assert feats[0] == 0.5
    assert feats[3] == 1.0   # agent range saturates when the road is empty
    assert feats[4] == 0.0
    assert feats[-1] == 1.0


# ------------------------------------------------------------- guidance

def _traj(points, dt=0.5):
    return Trajectory.from_points(points, dt, Frame.EGO)


def _cand(cid, speeds, curvature=0.0, end_y=0.0):
    n = len(speeds)
    pts = [((i + 1) * 2.0, end_y * (i + 1) / n) for i in range(n)]
    return Candidate(
        cid, NavigationCommand.KEEP_FORWARD, _traj(pts), curvature,
        speeds[-1] - speeds[0], tuple(speeds),
    )


def _feedback(action):
    return SlowFeedback(
        planning_state=PlanningState((False,) * 8, DEFAULT_QUERIES),
        plan=(action, MetaAction(LonAction.KEEP_SPEED, LatAction.KEEP_LANE)),
        scene_description="",
        analysis="",
        source=FeedbackSource.ORACLE,
        latency=0.0,
    )


def test_compat_longitudinal_deadbands():
    accel = _cand(0, (5.0, 6.0, 7.0))          # +2 m/s over 1 s
    cruise = _cand(1, (5.0, 5.0, 5.0))
    brake = _cand(2, (5.0, 4.0, 3.0))
    stopper = _cand(3, (2.0, 1.0, 0.0))
    keep_lane = LatAction.KEEP_LANE
    assert fusion.compat(accel, MetaAction(LonAction.ACCELERATE, keep_lane)) == 1.0
    assert fusion.compat(cruise, MetaAction(LonAction.ACCELERATE, keep_lane)) == 0.5
    assert fusion.compat(cruise, MetaAction(LonAction.KEEP_SPEED, keep_lane)) == 1.0
    assert fusion.compat(brake, MetaAction(LonAction.DECELERATE, keep_lane)) == 1.0
    assert fusion.compat(stopper, MetaAction(LonAction.STOP, keep_lane)) == 1.0
    assert fusion.compat(brake, MetaAction(LonAction.STOP, keep_lane)) == 0.5


def test_compat_lateral_deadbands():
    keep = MetaAction(LonAction.KEEP_SPEED, LatAction.KEEP_LANE)
    straight = _cand(0, (5.0, 5.0, 5.0), end_y=0.0)
    drift_left = _cand(1, (5.0, 5.0, 5.0), end_y=2.0)
    drift_right = _cand(2, (5.0, 5.0, 5.0), end_y=-2.0)
    bend_left = _cand(3, (5.0, 5.0, 5.0), curvature=0.05)
    bend_right = _cand(4, (5.0, 5.0, 5.0), curvature=-0.05)
    assert fusion.compat(straight, keep) == 1.0
    assert fusion.compat(drift_left, keep) == 0.5
    assert fusion.compat(
        drift_left, MetaAction(LonAction.KEEP_SPEED, LatAction.CHANGE_LEFT)
    ) == 1.0
    assert fusion.compat(
        drift_right, MetaAction(LonAction.KEEP_SPEED, LatAction.CHANGE_RIGHT)
    ) == 1.0
    assert fusion.compat(
        bend_left, MetaAction(LonAction.KEEP_SPEED, LatAction.TURN_LEFT)
    ) == 1.0
    assert fusion.compat(
        bend_right, MetaAction(LonAction.KEEP_SPEED, LatAction.TURN_RIGHT)
    ) == 1.0
    assert fusion.compat(
        straight, MetaAction(LonAction.KEEP_SPEED, LatAction.TURN_LEFT)
    ) == 0.5


def _bd(total, safety=1.0):
    return reward.RewardBreakdown(safety, 1.0, 1.0, 1.0, total)


def test_guidance_bonus_arithmetic():
    cands = (
        _cand(0, (5.0, 4.0, 3.0)),   # decel, keeps lane
        _cand(1, (5.0, 5.0, 5.0)),   # cruise
    )
    cset = CandidateSet(cands)
    bds = {0: _bd(0.5), 1: _bd(0.6)}
    fb = _feedback(MetaAction(LonAction.DECELERATE, LatAction.KEEP_LANE))
    sel = fusion.apply_guidance(cset, bds, fb, strength=0.3)
    # candidate 0: 0.5 + 0.3*1.0 = 0.8; candidate 1: 0.6 + 0.3*0.5 = 0.75
    assert sel.candidate_id == 0
    assert abs(sel.bonus - 0.3) < 1e-15
    assert abs(sel.adjusted_total - 0.8) < 1e-15


def test_guidance_zero_strength_is_plain_argmax():
    scene = make_scene(speed=10.0)
    cset = sample_candidates(scene, SamplerConfig())
    bds = {
        c.candidate_id: reward.score(c.trajectory, scene, reward.RewardWeights())
        for c in cset
    }
    want_id, want_bd = reward.select_best(cset, scene, reward.RewardWeights())
    sel = fusion.apply_guidance(cset, bds, _feedback(
        MetaAction(LonAction.DECELERATE, LatAction.CHANGE_LEFT)), strength=0.0)
    assert sel.candidate_id == want_id
    assert sel.bonus == 0.0
    assert sel.adjusted_total == want_bd.total


def test_guidance_safety_floor_blocks_unsafe_winner():
    cands = (_cand(0, (5.0, 5.0, 5.0)), _cand(1, (5.0, 4.0, 3.0)))
    cset = CandidateSet(cands)
    # unsafe candidate has the higher raw and adjusted total
    bds = {0: _bd(0.9, safety=0.0), 1: _bd(0.4, safety=0.2)}
    fb = _feedback(MetaAction(LonAction.KEEP_SPEED, LatAction.KEEP_LANE))
    sel = fusion.apply_guidance(cset, bds, fb, strength=0.3)
    assert sel.candidate_id == 1
    # but with zero strength the floor is inert
    sel0 = fusion.apply_guidance(cset, bds, fb, strength=0.0)
    assert sel0.candidate_id == 0


def test_guidance_floor_waived_when_all_unsafe():
    cands = (_cand(0, (5.0, 5.0, 5.0)), _cand(1, (5.0, 4.0, 3.0)))
    bds = {0: _bd(0.5, safety=0.0), 1: _bd(0.3, safety=0.0)}
    fb = _feedback(MetaAction(LonAction.KEEP_SPEED, LatAction.KEEP_LANE))
    sel = fusion.apply_guidance(CandidateSet(cands), bds, fb, strength=0.3)
    assert sel.candidate_id == 0


def test_guidance_tie_breaks_to_lowest_id():
    cands = (_cand(0, (5.0, 5.0, 5.0)), _cand(1, (5.0, 5.0, 5.0)))
    bds = {0: _bd(0.5), 1: _bd(0.5)}
    fb = _feedback(MetaAction(LonAction.KEEP_SPEED, LatAction.KEEP_LANE))
    sel = fusion.apply_guidance(CandidateSet(cands), bds, fb, strength=0.3)
    assert sel.candidate_id == 0


def test_guidance_input_validation():
    fb = _feedback(MetaAction(LonAction.KEEP_SPEED, LatAction.KEEP_LANE))
    with pytest.raises(ValueError):
        fusion.apply_guidance(CandidateSet(()), {}, fb)
    cands = (_cand(0, (5.0, 5.0, 5.0)),)
    with pytest.raises(ValueError):
        fusion.apply_guidance(CandidateSet(cands), {0: _bd(0.5)}, fb, strength=-0.1)
