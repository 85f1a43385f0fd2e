"""Release gate: every check the library must pass before shipping.

Each test prints one `criterion NN <name>: PASS/FAIL (...)` line to the
terminal (bypassing capture) so a full run reads as a checklist.  The
heavyweight synthetic-classification experiments share module fixtures.
"""

import math
import random
import time

import numpy as np
import pytest

from vidpool import deeppool, metrics, pooling, reco, synth, training
from vidpool.classifier import HeadConfig, init_head
from vidpool.data import Dataset, VideoRecord, read_vseq, split_dataset, write_vseq
from vidpool.gmm import CovarianceSpec, EmConfig, GmmModel, em_fit, posteriors, read_gmm, write_gmm
from vidpool.metrics import ScoredPrediction
from vidpool.prng import Stream, derive_seed

GRAD_TOL = 1e-4
NORM_SETTINGS = ((False, False), (True, False), (False, True), (True, True))


@pytest.fixture
def report(capfd):
    def _report(num, name, ok, detail=""):
        with capfd.disabled():
            print(f"criterion {num:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, f"criterion {num:02d} {name}: {detail}"
    return _report


# --- shared synthetic classification task (criteria 8, 9, 10) -----------------


def _fit_task_ubm(train_ds, seed=42):
    s = Stream(seed, "ubm-frames")
    chunks = []
    for rec in train_ds.records:
        t = rec.frames.shape[0]
        idx = s.permutation(t)[: min(30, t)]
        chunks.append(rec.frames[np.sort(idx)])
    model, _ = em_fit(
        np.concatenate(chunks), 16, "diagonal", EmConfig(max_iters=30, seed=derive_seed(seed, "ubm"))
    )
    return model


@pytest.fixture(scope="module")
def task():
    cfg = synth.SynthConfig(
        num_classes=8, num_clusters_true=16, dim=16, videos_per_class=400,
        frames_min=20, frames_max=60, cluster_spread=0.25, seed=42,
    )
    ds = synth.gen_classification(cfg)
    train_ds, test_ds = split_dataset(ds, (0.8, 0.2), seed=7)
    return {"train": train_ds, "test": test_ds, "ubm": _fit_task_ubm(train_ds)}


def _head_for(in_dim, num_classes, seed=42):
    return init_head(HeadConfig(in_dim, num_classes, 2), seed=derive_seed(seed, "head"))


def _train_and_score(model, train_ds, test_ds, lr, steps):
    cfg = training.TrainConfig(
        lr=lr, max_steps=steps, batch_size=64, eval_every=max(steps // 4, 1),
        frames_per_video=30, val_fraction=0.1, seed=42,
    )
    result = training.train(train_ds, model, cfg)
    _, gap_val, _ = training.evaluate(result.best_model, test_ds)
    return gap_val


def _dsgmm_gap(task_data, gamma, steps, lr=0.002):
    ubm = task_data["ubm"]
    num_classes = task_data["train"].num_classes
    params, spec = deeppool.init_from_ubm(
        ubm, "diagonal", "dsgmm", gamma=gamma, intra_norm=True, final_norm=False
    )
    model = training.Model(
        "dsgmm", num_classes, _head_for(spec.k * ubm.dim, num_classes), spec, params
    )
    return _train_and_score(model, task_data["train"], task_data["test"], lr, steps)


def _code_dataset(src, ubm, gamma):
    recs = []
    for rec in src.records:
        stats = pooling.accumulate(ubm, rec, second_moment="none")
        code = pooling.sgmm_code(stats, ubm, gamma, True, False)
        recs.append(VideoRecord(rec.id, rec.labels, code.reshape(1, -1).astype(np.float32)))
    return Dataset(recs, src.num_classes, ubm.k * ubm.dim)


@pytest.fixture(scope="module")
def headline(task):
    """Test-split GAP of the trained model and both frozen baselines."""
    t0 = time.monotonic()
    num_classes = task["train"].num_classes
    dsgmm_gap = _dsgmm_gap(task, gamma=0.125, steps=1000)
    avg_model = training.Model("avg", num_classes, _head_for(task["train"].dim, num_classes))
    avg_gap = _train_and_score(avg_model, task["train"], task["test"], lr=0.01, steps=4000)
    code_train = _code_dataset(task["train"], task["ubm"], 0.125)
    code_test = _code_dataset(task["test"], task["ubm"], 0.125)
    frozen_model = training.Model(
        "avg", num_classes, _head_for(task["ubm"].k * task["ubm"].dim, num_classes)
    )
    frozen_gap = _train_and_score(frozen_model, code_train, code_test, lr=0.01, steps=1500)
    return {"dsgmm": dsgmm_gap, "avg": avg_gap, "frozen_sgmm": frozen_gap,
            "seconds": time.monotonic() - t0}


# --- 1: gradient suite ---------------------------------------------------------


def _random_pool_model(variant, code_kind, intra, final, seed):
    s = Stream(seed, "accept-grad")
    k, d, classes = 3, 4, 3
    if variant == "decoupled":
        params = deeppool.AssignmentParams(variant, u=s.normal((k, d)), b=s.normal(k) * 0.1)
        anchors = s.normal((k, d))
    else:
        if variant in ("uniform_priors", "shared_spherical"):
            ls = np.array(s.normal() * 0.2)
        elif variant == "spherical":
            ls = s.normal(k) * 0.2
        elif variant == "shared_diagonal":
            ls = s.normal(d) * 0.2
        else:
            ls = s.normal((k, d)) * 0.2
        logit_w = None if variant == "uniform_priors" else s.normal(k) * 0.3
        params = deeppool.AssignmentParams(variant, logit_w=logit_w, means=s.normal((k, d)), log_scale=ls)
        anchors = None
    spec = deeppool.PoolSpec(
        code_kind, k, gamma=0.125, anchor_means=anchors, intra_norm=intra, final_norm=final
    )
    head = init_head(HeadConfig(k * d, classes), seed=derive_seed(seed, "head"))
    return training.Model("dsgmm" if code_kind == "dsgmm" else "vlad", classes, head, spec, params)


def test_01_gradient_suite(report):
    t0 = time.monotonic()
    worst = 0.0
    combos = 0
    for variant in deeppool.VARIANTS:
        for code_kind in ("vlad", "dsgmm"):
            for intra, final in NORM_SETTINGS:
                model = _random_pool_model(variant, code_kind, intra, final, seed=combos)
                errs = training.gradcheck(model, seed=combos)
                worst = max(worst, max(errs.values()))
                combos += 1
    elapsed = time.monotonic() - t0
    ok = worst < GRAD_TOL and elapsed < 120.0 and combos == 48
    report(1, "gradient-suite", ok,
           f"{combos} variant/code/norm combos, max rel err {worst:.2e} < 1e-4, {elapsed:.1f}s")


# --- 2: smoothing limit identities ----------------------------------------------


def test_02_limit_identities(report):
    s = Stream(21, "limits")
    k, d = 4, 3
    ubm = GmmModel(
        np.full(k, 1.0 / k),
        s.normal((k, d)) * 2.0,
        CovarianceSpec("diagonal", np.abs(s.normal((k, d))) + 0.5),
    )
    frames = s.normal((60, d)) * 2.0
    stats = pooling.accumulate(ubm, frames, second_moment="diag")
    assert (stats.n > 0).all()

    ml = pooling.ml_estimates(stats)
    cfg_all = pooling.SmoothingConfig(0.0, weights=True, means=True, covariances=True)
    sm0 = pooling.smoothed_estimates(stats, ubm, cfg_all)
    ml_err = max(
        np.max(np.abs(sm0.weights - ml.weights)),
        np.max(np.abs(sm0.means - ml.means)),
        np.max(np.abs(sm0.covariances - ml.covariances)),
    )

    big = pooling.smoothed_estimates(stats, ubm, pooling.SmoothingConfig(1e12, True, True, True))
    ubm_err = max(
        np.max(np.abs(big.means - ubm.means)),
        np.max(np.abs(big.covariances - ubm.cov.as_diag(k, d))),
    )

    empty = pooling.SufficientStats(
        n=np.array([5.0, 0.0, 3.0, 0.0]),
        sx=s.normal((k, d)),
        sx2_diag=np.abs(s.normal((k, d))) + 1.0,
        frame_count=8,
    )
    sm = pooling.smoothed_estimates(empty, ubm, cfg_all)
    zero_rows_exact = np.array_equal(sm.means[[1, 3]], ubm.means[[1, 3]])

    ok = ml_err <= 1e-9 and ubm_err <= 1e-6 and zero_rows_exact
    report(2, "limit-identities", ok,
           f"gamma=0 vs ML {ml_err:.1e} <= 1e-9, gamma=1e12 vs background {ubm_err:.1e} <= 1e-6, "
           f"zero-count rows exact: {zero_rows_exact}")


# --- 3: residual aggregation identity --------------------------------------------


def test_03_vlad_identity(report):
    s = Stream(31, "vlad")
    worst = 0.0
    for i in range(100):
        k = 2 + i % 5
        d = 2 + i % 4
        ubm = GmmModel(
            np.full(k, 1.0 / k),
            s.normal((k, d)) * 1.5,
            CovarianceSpec("diagonal", np.abs(s.normal((k, d))) + 0.4),
        )
        frames = s.normal((5 + i % 36, d)) * 1.5
        stats = pooling.accumulate(ubm, frames, second_moment="none")
        agg = pooling.vlad_code(stats, ubm)
        q, _ = posteriors(ubm, frames)
        per_frame = np.stack(
            [(q[:, j : j + 1] * (frames - ubm.means[j])).sum(axis=0) for j in range(k)]
        )
        worst = max(worst, float(np.max(np.abs(agg - per_frame))))
    ok = worst < 1e-10
    report(3, "residual-identity", ok, f"100 random videos, max abs diff {worst:.1e} < 1e-10")


# --- 4: decoupled initialization equivalence --------------------------------------


def test_04_decoupled_init(report):
    s = Stream(41, "decoupled")
    k, d = 8, 6
    a = s.normal((d, d)) * 0.4
    src = GmmModel(
        (lambda w: w / w.sum())(np.abs(s.normal(k)) + 0.2),
        s.normal((k, d)),
        CovarianceSpec("shared_full", a @ a.T + np.eye(d) * 0.5),
    )
    params, _ = deeppool.init_from_ubm(src, "decoupled", "dsgmm", gamma=0.125)
    frames = s.normal((1000, d)) * 1.5
    q_src, _ = posteriors(src, frames)
    q_dec = deeppool.assign(params, frames)
    err = float(np.max(np.abs(q_src - q_dec)))
    ok = err < 1e-6
    report(4, "decoupled-init", ok, f"1000 frames, max abs posterior diff {err:.1e} < 1e-6")


# --- 5: EM behaviour ---------------------------------------------------------------


def test_05_em(report):
    t0 = time.monotonic()
    s = Stream(51, "em")
    monotone = True
    for kind in ("shared_full", "shared_spherical", "spherical", "shared_diagonal", "diagonal"):
        x = np.concatenate([s.normal((300, 3)) + off for off in (-2.0, 0.0, 2.5)])
        _, hist = em_fit(x, 3, kind, EmConfig(max_iters=40, seed=5))
        monotone &= all(b >= a - 1e-8 * abs(a) for a, b in zip(hist, hist[1:]))

    data = np.concatenate([s.normal((1000, 1)) - 3.0, s.normal((1000, 1)) + 3.0])
    model, hist = em_fit(data, 2, "diagonal", EmConfig(max_iters=100, seed=11))
    mus = np.sort(model.means.ravel())
    recovered = abs(mus[0] + 3.0) < 0.15 and abs(mus[1] - 3.0) < 0.15
    elapsed = time.monotonic() - t0
    ok = monotone and recovered and elapsed < 30.0
    report(5, "em-fit", ok,
           f"monotone all kinds: {monotone}, recovered means {mus.round(3)}, {elapsed:.1f}s")


# --- 6: constraint transforms stay valid -------------------------------------------


def test_06_constraints(report):
    s = Stream(61, "adam")
    k, d = 5, 4
    params = deeppool.AssignmentParams(
        "diagonal", logit_w=s.normal(k) * 0.3, means=s.normal((k, d)),
        log_scale=s.normal((k, d)) * 0.2,
    )
    arrays = params.trainable()
    state = training.AdamState()
    cfg = training.TrainConfig(lr=0.01, max_steps=1000, seed=61)
    for step in range(1000):
        g = Stream(61, "grad", step)
        grads = {name: g.normal(arr.shape) for name, arr in arrays.items()}
        training.adam_step(arrays, grads, state, cfg, lr=training.lr_at(cfg, step))
    w = np.exp(params.logit_w - params.logit_w.max())
    w = w / w.sum()
    scales = np.exp(params.log_scale)
    ok = (
        abs(w.sum() - 1.0) < 1e-6
        and np.all(scales > 0)
        and np.all(np.isfinite(scales))
        and np.all(np.isfinite(w))
    )
    report(6, "constraint-transforms", ok,
           f"after 1000 steps: weight sum err {abs(w.sum() - 1.0):.1e}, min scale {scales.min():.3g}")


# --- 7: ranking metrics --------------------------------------------------------------


def _brute_force_gap(preds, truth):
    ordered = sorted(preds, key=lambda p: (-p.confidence, p.video_id, p.label))
    total = sum(len(v) for v in truth.values())
    ap, hits = 0.0, 0
    for rank, p in enumerate(ordered, start=1):
        if p.label in truth.get(p.video_id, set()):
            hits += 1
            ap += hits / rank
    return ap / total


def test_07_metrics(report):
    rng = random.Random(7)
    exact = 0
    for _ in range(50):
        truth, preds = {}, []
        for v in range(rng.randint(1, 8)):
            vid = f"v{v:02d}"
            truth[vid] = set(rng.sample(range(12), rng.randint(1, 3)))
            for _ in range(rng.randint(1, 12)):
                preds.append(ScoredPrediction(vid, rng.randrange(12), rng.randint(0, 5) / 5.0))
        assert len(preds) <= 100
        exact += metrics.gap(preds, truth, n_per_video=20) == _brute_force_gap(preds, truth)

    hand = metrics.gap(
        [ScoredPrediction("a", 0, 0.9), ScoredPrediction("a", 1, 0.8), ScoredPrediction("a", 2, 0.7)],
        {"a": {0, 2}},
    )
    hand_ok = abs(hand - 5.0 / 6.0) < 1e-12
    hit = metrics.hit_at_1(
        [ScoredPrediction("a", 0, 0.9), ScoredPrediction("b", 1, 0.9), ScoredPrediction("c", 2, 0.9)],
        {"a": {0}, "b": {5}, "c": {7}},
    )
    hit_ok = hit == pytest.approx(1.0 / 3.0)
    auc_ok = metrics.auc(np.array([0.9, 0.1]), np.array([1, 0])) == 1.0

    chi2, p = metrics.mcnemar(
        np.array([True] * 10 + [False] * 2 + [True] * 5),
        np.array([False] * 10 + [True] * 2 + [True] * 5),
    )
    mc_ok = chi2 == 49.0 / 12.0 and 0.04 < p < 0.05
    ok = exact == 50 and hand_ok and hit_ok and auc_ok and mc_ok
    report(7, "metrics", ok,
           f"brute-force match {exact}/50, hand case 5/6: {hand_ok}, chi2=49/12: {mc_ok}")


# --- 8, 9: synthetic separability -----------------------------------------------------


def test_08_synthetic_separability(report, headline):
    margin = headline["dsgmm"] - headline["avg"]
    ok = (
        margin >= 0.05
        and headline["dsgmm"] >= headline["frozen_sgmm"]
        and headline["seconds"] < 600.0
    )
    report(8, "synthetic-separability", ok,
           f"dsgmm {headline['dsgmm']:.3f} vs avg {headline['avg']:.3f} (margin {margin:+.3f} >= 0.05) "
           f"vs frozen codes {headline['frozen_sgmm']:.3f}, {headline['seconds']:.0f}s")


def test_09_trained_beats_unsupervised(report, headline):
    ok = headline["dsgmm"] > headline["frozen_sgmm"]
    report(9, "trained-beats-frozen", ok,
           f"trained {headline['dsgmm']:.3f} > frozen background codes {headline['frozen_sgmm']:.3f}")


# --- 10: smoothing sweep shape ---------------------------------------------------------


def test_10_gamma_sweep(report, task):
    gammas = [2.0 ** e for e in range(-9, 8)]
    gaps = {g: _dsgmm_gap(task, gamma=g, steps=300) for g in gammas}
    best_gamma = max(gaps, key=gaps.get)
    drop = gaps[best_gamma] - gaps[2.0 ** 7]
    ok = drop >= 0.02
    report(10, "gamma-sweep", ok,
           f"best gamma 2^{math.log2(best_gamma):+.0f} gap {gaps[best_gamma]:.3f}, "
           f"gamma 2^+7 gap {gaps[2.0 ** 7]:.3f}, drop {drop:+.3f} >= 0.02")


# --- 11: recommendation stack -----------------------------------------------------------


def _identity_net(d):
    # relu stays linear for inputs > -10, so the net reduces to normalization
    return reco.EmbedNet(w1=np.eye(d), b1=np.full(d, 10.0), w2=np.eye(d), b2=np.full(d, -10.0))


def _newton_reference(observations, prior):
    users = sorted({u for u, _, _ in observations})
    dim = observations[0][1].shape[0]
    blk = 1 + dim
    p_total = 1 + blk * len(users)
    x = np.zeros((len(observations), p_total))
    y = np.array([float(lab) for _, _, lab in observations])
    for i, (u, f, _) in enumerate(observations):
        x[i, 0] = 1.0
        off = 1 + users.index(u) * blk
        x[i, off] = 1.0
        x[i, off + 1 : off + blk] = f
    pen = np.full(p_total, prior)
    pen[0] = 0.0
    theta = np.zeros(p_total)
    for _ in range(60):
        z = x @ theta
        p = 1.0 / (1.0 + np.exp(-z))
        grad = x.T @ (p - y) + pen * theta
        w = p * (1.0 - p)
        hess = (x * w[:, None]).T @ x + np.diag(pen) + 1e-12 * np.eye(p_total)
        theta -= np.linalg.solve(hess, grad)
    model = reco.GlmixModel(
        beta0=float(theta[0]), user_intercept={}, user_coef={},
        prior_strength=prior, feature_dim=dim,
    )
    for j, u in enumerate(users):
        off = 1 + j * blk
        model.user_intercept[u] = float(theta[off])
        model.user_coef[u] = theta[off + 1 : off + blk].copy()
    return model


def _cowatch_auc_margin():
    """Watch-prediction AUC with trained video embeddings vs intercepts only."""
    seed = 5
    cfg = synth.SynthConfig(
        num_classes=4, num_clusters_true=8, dim=8, videos_per_class=30,
        frames_min=12, frames_max=30, cluster_spread=0.25, seed=seed,
    )
    ds = synth.gen_classification(cfg)
    cw = synth.gen_cowatch(80, ds, affinity_seed=seed, sessions_per_user=8,
                           videos_per_session=8, affinity=8.0)
    s = Stream(seed, "ubm-frames")
    chunks = [rec.frames[np.sort(s.permutation(rec.frames.shape[0])[:12])] for rec in ds.records]
    ubm, _ = em_fit(np.concatenate(chunks), 8, "diagonal",
                    EmConfig(max_iters=20, seed=derive_seed(seed, "ubm")))

    params, spec = deeppool.init_from_ubm(ubm, "diagonal", "dsgmm", gamma=0.125)
    layer = reco.PoolingLayer(spec, params)
    net = reco.init_embed(spec.k * ds.dim, 16, 32, seed=derive_seed(seed, "embed"))
    frames_by_id = {rec.id: rec.frames for rec in ds.records}
    trainable = {"net." + n: a for n, a in net.trainable().items()}
    trainable.update({"pool." + n: a for n, a in layer.trainable().items()})
    state = training.AdamState()
    tcfg = training.TrainConfig(lr=0.001, seed=seed, max_steps=400)
    for step in range(400):
        pick = Stream(seed, "trip", step)
        idx = pick.integers(len(cw.triplets), size=16)
        batch = [reco.Triplet(*cw.triplets[int(i)]) for i in idx]
        _, grads = reco.triplet_loss(net, layer, frames_by_id, batch, alpha=0.2)
        training.adam_step(trainable, grads, state, tcfg, lr=training.lr_at(tcfg, step))

    embeddings = {}
    for rec in ds.records:
        code, _ = deeppool.forward(layer.spec, layer.params, rec.frames)
        embeddings[rec.id] = reco.embed(net, code.reshape(1, -1))[0]
    train_it, test_it = reco.split_sessions(cw)
    history = reco.build_history(train_it)
    rows = [it for it in test_it if it.user_id in set(history.users())]
    labels = np.array([it.label for it in rows])
    glm_feat = reco.glmix_fit(reco.glmix_observations(train_it, embeddings, net.embed_dim),
                              prior_strength=1.0)
    glm_none = reco.glmix_fit(reco.glmix_observations(train_it, None, 0), prior_strength=1.0)
    feat_scores = np.array(
        [reco.glmix_predict(glm_feat, it.user_id, embeddings[it.video_id]) for it in rows]
    )
    none_scores = np.array([reco.glmix_predict(glm_none, it.user_id, np.zeros(0)) for it in rows])
    auc_feat = metrics.auc(feat_scores, labels)
    auc_none = metrics.auc(none_scores, labels)
    return auc_feat, auc_none, embeddings, history, ds


def test_11_recommendation_stack(report):
    # hinge arithmetic through the embedding net
    net = _identity_net(2)
    videos = {"a": np.array([1.0, 0.0]), "p": np.array([0.0, 1.0]), "n": np.array([-1.0, 0.0])}
    satisfied, _ = reco.triplet_loss(net, None, videos, [reco.Triplet("a", "p", "n")])
    violated, _ = reco.triplet_loss(net, None, videos, [reco.Triplet("a", "n", "p")])
    s = Stream(111, "hinge")
    rand_videos = {f"v{i}": s.normal((3,)) for i in range(12)}
    rand_batch = [reco.Triplet("v0", f"v{1 + i % 11}", f"v{1 + (i + 3) % 11}") for i in range(8)]
    rand_loss, _ = reco.triplet_loss(_identity_net(3), None, rand_videos, rand_batch)
    hinge_ok = satisfied == 0.0 and violated > 0.0 and rand_loss >= 0.0

    obs = []
    rng = Stream(12, "g2")
    for u_idx, u in enumerate(["u1", "u2", "u3"]):
        bias = (u_idx - 1) * 0.8
        for _ in range(20):
            f = rng.normal((2,))
            z = bias + 1.5 * f[0] - 0.5 * f[1]
            y = 1 if rng.uniform((1,))[0] < 1.0 / (1.0 + math.exp(-z)) else 0
            obs.append((u, f, y))
    fitted = reco.glmix_fit(obs, prior_strength=1.0, max_rounds=300, tol=1e-12)
    loss_gap = abs(reco.penalized_loss(fitted, obs) - reco.penalized_loss(_newton_reference(obs, 1.0), obs))
    glmix_ok = loss_gap < 1e-5

    auc_feat, auc_none, embeddings, history, ds = _cowatch_auc_margin()
    avg_le_max = all(
        a <= m + 1e-12
        for user in history.users()
        for a, m in (reco.sim_scores(embeddings, history, user, rec.id) for rec in ds.records[::7])
    )
    auc_ok = auc_feat > auc_none

    ok = hinge_ok and avg_le_max and glmix_ok and auc_ok
    report(11, "recommendation-stack", ok,
           f"hinge zero/positive: {hinge_ok}, avg<=max: {avg_le_max}, "
           f"glmix loss gap {loss_gap:.1e} < 1e-5, auc {auc_feat:.3f} > no-feature {auc_none:.3f}")


# --- 12: determinism and round trips -------------------------------------------------------


def _tiny_training_run(root, tag):
    cfg = synth.SynthConfig(
        num_classes=2, num_clusters_true=4, dim=5, videos_per_class=8,
        frames_min=6, frames_max=10, cluster_spread=0.25, seed=3,
    )
    ds = synth.gen_classification(cfg)
    frames = np.concatenate([rec.frames for rec in ds.records])
    ubm, _ = em_fit(frames, 2, "diagonal", EmConfig(max_iters=10, seed=9))
    params, spec = deeppool.init_from_ubm(ubm, "diagonal", "dsgmm", gamma=0.125)
    model = training.Model("dsgmm", 2, _head_for(spec.k * ds.dim, 2, seed=9), spec, params)
    tcfg = training.TrainConfig(lr=0.01, max_steps=6, batch_size=4, eval_every=3,
                                frames_per_video=4, val_fraction=0.25, seed=9)
    ckpt_path = str(root / f"{tag}.ckpt")
    log_path = str(root / f"{tag}.csv")
    training.train(ds, model, tcfg, log_path=log_path, checkpoint_path=ckpt_path)
    return open(ckpt_path, "rb").read(), open(log_path, "rb").read(), ds, ubm


def test_12_determinism_and_round_trips(report, tmp_path):
    ckpt_a, log_a, ds, ubm = _tiny_training_run(tmp_path, "a")
    ckpt_b, log_b, _, _ = _tiny_training_run(tmp_path, "b")
    same_run = ckpt_a == ckpt_b and log_a == log_b

    p1, p2 = str(tmp_path / "r1.vseq"), str(tmp_path / "r2.vseq")
    write_vseq(ds, p1)
    write_vseq(read_vseq(p1), p2)
    vseq_ok = open(p1, "rb").read() == open(p2, "rb").read()

    codes = [(rec.id, pooling.avg_pool(rec)) for rec in ds.records]
    c1, c2 = str(tmp_path / "r1.vcod"), str(tmp_path / "r2.vcod")
    pooling.write_vcod(c1, codes)
    pooling.write_vcod(c2, list(pooling.read_vcod(c1).items()))
    vcod_ok = open(c1, "rb").read() == open(c2, "rb").read()

    g1, g2 = str(tmp_path / "r1.gmm1"), str(tmp_path / "r2.gmm1")
    write_gmm(ubm, g1)
    write_gmm(read_gmm(g1), g2)
    gmm_ok = open(g1, "rb").read() == open(g2, "rb").read()

    k1, k2 = str(tmp_path / "r1.ckpt"), str(tmp_path / "r2.ckpt")
    with open(k1, "wb") as fh:
        fh.write(ckpt_a)
    training.save_checkpoint(training.load_checkpoint(k1), k2)
    ckpt_ok = open(k2, "rb").read() == ckpt_a

    ok = same_run and vseq_ok and vcod_ok and gmm_ok and ckpt_ok
    report(12, "determinism", ok,
           f"repeat run byte-identical: {same_run}, round trips vseq/vcod/gmm1/ckpt: "
           f"{vseq_ok}/{vcod_ok}/{gmm_ok}/{ckpt_ok}")
