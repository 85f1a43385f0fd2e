import math
import random

import numpy as np
import pytest

from vidpool.autograd import check_gradients
from vidpool.deeppool import AssignmentParams, PoolSpec
from vidpool.prng import Stream
from vidpool.reco import (
    DEFAULT_MARGIN,
    EmbedNet,
    GlmixModel,
    PoolingLayer,
    Triplet,
    WatchHistory,
    build_history,
    embed,
    glmix_fit,
    glmix_observations,
    glmix_predict,
    init_embed,
    penalized_loss,
    sim_scores,
    split_sessions,
    triplet_graph,
    triplet_loss,
)
from vidpool.synth import Interaction


def small_net(in_dim=6, embed_dim=4, hidden=5, seed=0):
    return init_embed(in_dim, embed_dim=embed_dim, hidden=hidden, seed=seed)


def identity_net(d):
    """relu stays linear for inputs > -10, so the net is the identity."""
    return EmbedNet(
        w1=np.eye(d), b1=np.full(d, 10.0), w2=np.eye(d), b2=np.full(d, -10.0)
    )


def small_layer(k=2, d=3, seed=0):
    s = Stream(seed, "layer")
    params = AssignmentParams(
        "diagonal", logit_w=s.normal((k,)) * 0.3, means=s.normal((k, d)),
        log_scale=s.normal((k, d)) * 0.1,
    )
    return PoolingLayer(PoolSpec("dsgmm", k, gamma=0.125), params)


# --- embeddings -----------------------------------------------------------


def test_embed_rows_are_unit_norm():
    net = small_net()
    codes = Stream(1, "c").normal((7, 6)) * 3.0
    out = embed(net, codes)
    assert out.shape == (7, 4)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_embed_zero_output_maps_to_first_basis_vector():
    net = small_net()
    net.w2[:] = 0.0
    net.b2[:] = 0.0
    out = embed(net, Stream(2, "c").normal((3, 6)))
    np.testing.assert_array_equal(out, np.tile([1.0, 0.0, 0.0, 0.0], (3, 1)))


def test_embed_single_vector_input():
    net = identity_net(2)
    out = embed(net, np.array([3.0, 4.0]))
    np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-12)


# --- triplet loss -----------------------------------------------------------


def unit_videos():
    # flattened codes picked so the identity net embeds them exactly
    return {
        "a": np.array([1.0, 0.0]),
        "p": np.array([0.0, 1.0]),
        "n": np.array([-1.0, 0.0]),
    }


def test_hinge_arithmetic_satisfied_margin():
    # d2(a,p)=2, d2(a,n)=4: term = max(2 - 4 + 0.2, 0) = 0
    net = identity_net(2)
    loss, grads = triplet_loss(net, None, unit_videos(), [Triplet("a", "p", "n")])
    assert loss == 0.0
    for g in grads.values():
        np.testing.assert_array_equal(g, np.zeros_like(g))


def test_hinge_arithmetic_violated_margin():
    # swap roles: d2(a,p)=4, d2(a,n)=2 -> term = 4 - 2 + 0.2 = 2.2
    net = identity_net(2)
    loss, grads = triplet_loss(net, None, unit_videos(), [Triplet("a", "n", "p")])
    assert abs(loss - 2.2) < 1e-12
    assert any(np.abs(g).max() > 0 for g in grads.values())


def test_hinge_sum_over_triplets_and_custom_alpha():
    net = identity_net(2)
    videos = unit_videos()
    trips = [Triplet("a", "n", "p"), Triplet("a", "p", "n")]
    loss, _ = triplet_loss(net, None, videos, trips, alpha=0.5)
    assert abs(loss - 2.5) < 1e-12  # 2.5 + 0
    loss0, _ = triplet_loss(net, None, videos, [Triplet("a", "p", "n")], alpha=2.0)
    assert abs(loss0 - 0.0) < 1e-12  # exactly at the boundary: max(-2+2,0)


def test_alpha_must_be_non_negative():
    with pytest.raises(ValueError):
        triplet_loss(identity_net(2), None, unit_videos(), [Triplet("a", "p", "n")], alpha=-0.1)


def test_triplet_gradients_match_finite_differences():
    net = small_net(seed=3)
    layer = small_layer(seed=4)
    s = Stream(5, "vids")
    videos = {name: s.spawn(name).normal((4, 3)) for name in "abcde"}
    trips = [Triplet("a", "b", "c"), Triplet("b", "d", "e"), Triplet("c", "e", "a")]
    loss, _ = triplet_loss(net, layer, videos, trips)
    assert loss > 0.1  # margins active, so the gradient is informative

    net_names = list(net.trainable())
    pool_names = list(layer.trainable())
    arrays = [net.trainable()[n] for n in net_names]
    arrays += [layer.trainable()[n] for n in pool_names]

    def build(leaves):
        nvars = dict(zip(net_names, leaves[: len(net_names)]))
        pvars = dict(zip(pool_names, leaves[len(net_names):]))
        return triplet_graph(nvars, layer, pvars, videos, trips)

    assert check_gradients(build, arrays) < 1e-4


def test_triplet_loss_gradient_names():
    net = small_net(seed=6)
    layer = small_layer(seed=7)
    videos = {name: Stream(8, name).normal((3, 3)) for name in "abc"}
    _, grads = triplet_loss(net, layer, videos, [Triplet("a", "b", "c")])
    assert set(grads) == {
        "net.w1", "net.b1", "net.w2", "net.b2",
        "pool.logit_w", "pool.means", "pool.log_scale",
    }


# --- similarity scores --------------------------------------------------------


def test_sim_scores_hand_cases():
    r = math.sqrt(0.5)
    emb = {
        "a": np.array([1.0, 0.0]),
        "b": np.array([0.0, 1.0]),
        "c": np.array([r, r]),
    }
    hist = WatchHistory({"u": {"a", "b"}})
    avg, mx = sim_scores(emb, hist, "u", "c")
    assert abs(avg - r) < 1e-12 and abs(mx - r) < 1e-12
    avg, mx = sim_scores(emb, hist, "u", "a")
    assert abs(avg - 0.5) < 1e-12 and mx == 1.0  # self-similarity caps max


def test_sim_scores_self_only_history():
    emb = {"a": np.array([0.6, 0.8])}
    avg, mx = sim_scores(emb, WatchHistory({"u": {"a"}}), "u", "a")
    assert abs(avg - 1.0) < 1e-12 and abs(mx - 1.0) < 1e-12


def test_sim_scores_orthogonal_history():
    emb = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
    avg, mx = sim_scores(emb, WatchHistory({"u": {"a"}}), "u", "b")
    assert avg == 0.0 and mx == 0.0


def test_sim_scores_match_brute_force_loop():
    rng = random.Random(9)
    s = Stream(10, "emb")
    ids = [f"v{i}" for i in range(12)]
    emb = {}
    for vid in ids:
        v = s.spawn(vid).normal((5,))
        emb[vid] = v / np.linalg.norm(v)
    for _ in range(10):
        watched = set(rng.sample(ids, 3))
        cand = rng.choice(ids)
        avg, mx = sim_scores(emb, WatchHistory({"u": watched}), "u", cand)
        sims = [float(emb[w] @ emb[cand]) for w in watched]
        assert abs(avg - np.mean(sims)) < 1e-12
        assert abs(mx - max(sims)) < 1e-12
        assert avg <= mx + 1e-15
        assert -1.0 - 1e-12 <= avg <= 1.0 + 1e-12


def test_sim_scores_empty_history_raises():
    emb = {"a": np.array([1.0, 0.0])}
    with pytest.raises(ValueError):
        sim_scores(emb, WatchHistory({}), "u", "a")
    with pytest.raises(ValueError):
        sim_scores(emb, WatchHistory({"u": set()}), "u", "a")


def test_watch_history_users_listing():
    hist = WatchHistory({"b": {"v"}, "a": {"w"}, "empty": set()})
    assert hist.users() == ["a", "b"]


# --- GLMix ----------------------------------------------------------------


def test_glmix_degenerate_all_watched():
    obs = [("u", np.zeros(2), 1) for _ in range(30)]
    model = glmix_fit(obs)
    assert glmix_predict(model, "u", np.zeros(2)) > 0.9


def test_glmix_balanced_labels_near_half():
    obs = [("u", np.zeros(1), i % 2) for i in range(40)]
    model = glmix_fit(obs)
    assert abs(glmix_predict(model, "u", np.zeros(1)) - 0.5) < 1e-6


def test_glmix_coefficient_sign_follows_correlation():
    rng = Stream(11, "g")
    obs = []
    for i in range(60):
        f = rng.normal((1,))
        y = 1 if f[0] > 0 else 0
        obs.append(("u", f, y))
    model = glmix_fit(obs)
    assert model.user_coef["u"][0] > 0.5
    flipped = glmix_fit([(u, f, 1 - y) for u, f, y in obs])
    assert flipped.user_coef["u"][0] < -0.5


def newton_reference(observations, prior):
    """Full-batch Newton on the complete parameter vector."""
    users = sorted({u for u, _, _ in observations})
    dim = observations[0][1].shape[0]
    blk = 1 + dim
    p_total = 1 + blk * len(users)
    X = np.zeros((len(observations), p_total))
    y = np.array([float(lab) for _, _, lab in observations])
    for i, (u, f, _) in enumerate(observations):
        X[i, 0] = 1.0
        off = 1 + users.index(u) * blk
        X[i, off] = 1.0
        X[i, off + 1 : off + blk] = f
    pen = np.full(p_total, prior)
    pen[0] = 0.0
    theta = np.zeros(p_total)
    for _ in range(60):
        z = X @ theta
        p = 1.0 / (1.0 + np.exp(-z))
        grad = X.T @ (p - y) + pen * theta
        w = p * (1.0 - p)
        hess = (X * w[:, None]).T @ X + np.diag(pen) + 1e-12 * np.eye(p_total)
        theta -= np.linalg.solve(hess, grad)
    model = GlmixModel(
        beta0=float(theta[0]),
        user_intercept={}, user_coef={}, prior_strength=prior, feature_dim=dim,
    )
    for j, u in enumerate(users):
        off = 1 + j * blk
        model.user_intercept[u] = float(theta[off])
        model.user_coef[u] = theta[off + 1 : off + blk].copy()
    return model


def test_glmix_matches_joint_newton_reference():
    rng = Stream(12, "g2")
    users = ["u1", "u2", "u3"]
    obs = []
    for u_idx, u in enumerate(users):
        bias = (u_idx - 1) * 0.8
        for _ in range(20):
            f = rng.normal((2,))
            z = bias + 1.5 * f[0] - 0.5 * f[1]
            y = 1 if rng.uniform((1,))[0] < 1.0 / (1.0 + math.exp(-z)) else 0
            obs.append((u, f, y))
    # both solvers run to tight convergence; the optima must coincide
    fitted = glmix_fit(obs, prior_strength=1.0, max_rounds=300, tol=1e-12)
    reference = newton_reference(obs, prior=1.0)
    ours = penalized_loss(fitted, obs)
    best = penalized_loss(reference, obs)
    assert ours <= best + 1e-5
    assert abs(ours - best) < 1e-5
    # the default stopping rule lands close too (looser bound)
    default_fit = glmix_fit(obs, prior_strength=1.0)
    assert abs(penalized_loss(default_fit, obs) - best) < 1e-3


def test_glmix_loss_not_worse_than_zero_model():
    rng = Stream(13, "g3")
    obs = [("u", rng.normal((2,)), int(rng.uniform((1,))[0] < 0.3)) for _ in range(40)]
    zero = GlmixModel(0.0, {"u": 0.0}, {"u": np.zeros(2)}, 1.0, 2)
    fitted = glmix_fit(obs)
    assert penalized_loss(fitted, obs) <= penalized_loss(zero, obs) + 1e-12


def test_glmix_prior_shrinks_user_effects():
    rng = Stream(14, "g4")
    obs = []
    for i in range(30):
        f = rng.normal((1,))
        obs.append(("u", f, 1 if f[0] > 0 else 0))
    weak = glmix_fit(obs, prior_strength=0.01)
    strong = glmix_fit(obs, prior_strength=100.0)
    assert abs(strong.user_coef["u"][0]) < abs(weak.user_coef["u"][0])


def test_glmix_predict_hand_cases():
    zero = GlmixModel(0.0, {}, {}, 1.0, 2)
    assert glmix_predict(zero, "anyone", np.zeros(2)) == 0.5

    model = GlmixModel(0.0, {"u": 1.0}, {"u": np.array([1.0, 0.0])}, 1.0, 2)
    p = glmix_predict(model, "u", np.array([1.0, 5.0]))
    assert abs(p - 0.8807970779778823) < 1e-12  # sigmoid(2)

    fallback = GlmixModel(2.0, {"u": 9.0}, {"u": np.ones(1)}, 1.0, 1)
    p = glmix_predict(fallback, "stranger", np.array([4.0]))
    assert abs(p - 0.8807970779778823) < 1e-12  # sigmoid(beta0) only


def test_glmix_fit_rejects_empty():
    with pytest.raises(ValueError):
        glmix_fit([])


# --- co-watch pipeline helpers ---------------------------------------------------


def interactions_fixture():
    return [
        Interaction("u1", 0, "a", 1),
        Interaction("u1", 0, "b", 0),
        Interaction("u1", 1, "c", 1),
        Interaction("u1", 2, "d", 1),   # final session for u1
        Interaction("u2", 0, "a", 0),
        Interaction("u2", 1, "e", 1),   # final session for u2
    ]


def test_split_sessions_takes_last_session_per_user():
    train, test = split_sessions(
        type("CW", (), {"interactions": interactions_fixture()})()
    )
    assert {(it.user_id, it.video_id) for it in test} == {("u1", "d"), ("u2", "e")}
    assert {(it.user_id, it.video_id) for it in train} == {
        ("u1", "a"), ("u1", "b"), ("u1", "c"), ("u2", "a")
    }


def test_build_history_keeps_only_watches():
    hist = build_history(interactions_fixture())
    assert hist.user_videos == {"u1": {"a", "c", "d"}, "u2": {"e"}}


def test_glmix_observations_with_and_without_embeddings():
    inter = interactions_fixture()[:2]
    none = glmix_observations(inter, None, 3)
    assert [(u, y) for u, _, y in none] == [("u1", 1), ("u1", 0)]
    for _, f, _ in none:
        np.testing.assert_array_equal(f, np.zeros(3))
    emb = {"a": np.array([1.0, 2.0, 3.0]), "b": np.array([4.0, 5.0, 6.0])}
    with_f = glmix_observations(inter, emb, 3)
    np.testing.assert_array_equal(with_f[0][1], emb["a"])
    np.testing.assert_array_equal(with_f[1][1], emb["b"])
