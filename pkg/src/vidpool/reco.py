"""Co-watch recommendation: triplet-loss video embeddings and watch models.

A two-layer network maps flattened video codes to unit-norm embeddings;
it trains jointly with the pooling layer on (anchor, positive, negative)
video triplets mined from co-watch sessions.  Watch prediction uses either
similarity aggregates against the user's history (average and max cosine)
or a per-user logistic model (global intercept + per-user intercept and
coefficient vector, L2 prior on the user effects only).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Var
from .data import VideoRecord
from .deeppool import AssignmentParams, PoolSpec, pooling_graph
from .prng import Stream
from .synth import CowatchData

DEFAULT_MARGIN = 0.2


# --- embedding network ------------------------------------------------------


@dataclass
class EmbedNet:
    """Affine -> relu -> affine -> row L2 normalization."""

    w1: np.ndarray  # (hidden, in_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (embed_dim, hidden)
    b2: np.ndarray  # (embed_dim,)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_embed(in_dim: int, embed_dim: int = 64, hidden: int = 256, seed: int = 0) -> EmbedNet:
    s = Stream(seed, "embed")
    return EmbedNet(
        w1=s.normal((hidden, in_dim)) / np.sqrt(in_dim),
        b1=np.zeros(hidden),
        w2=s.normal((embed_dim, hidden)) / np.sqrt(hidden),
        b2=np.zeros(embed_dim),
    )


def embed_graph(nvars: dict[str, Var], x: Var) -> Var:
    """(B, E) unit-norm embeddings of (B, in_dim) codes, differentiable."""
    h = ag.relu(ag.add(ag.matmul(x, ag.transpose(nvars["w1"])), nvars["b1"]))
    out = ag.add(ag.matmul(h, ag.transpose(nvars["w2"])), nvars["b2"])
    return ag.l2_normalize(out, axis=1)


def embed(net: EmbedNet, codes: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings; an all-zero pre-norm row maps to e1."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    h = np.maximum(codes @ net.w1.T + net.b1, 0.0)
    out = h @ net.w2.T + net.b2
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    out = np.where(norms > 0, out / np.where(norms > 0, norms, 1.0), 0.0)
    if zero.any():
        out[zero] = 0.0
        out[zero, 0] = 1.0
    return out


# --- triplet loss ------------------------------------------------------------


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str


@dataclass
class PoolingLayer:
    """The trainable code extractor feeding the embedding net."""

    spec: PoolSpec
    params: AssignmentParams

    def trainable(self) -> dict[str, np.ndarray]:
        out = {name: arr for name, arr in self.params.trainable().items()}
        out.update(self.spec.trainable())
        return out

    def code_dim(self) -> int:
        return self.spec.k * self.params.dim


def _embed_by_id(
    nvars: dict[str, Var],
    pooling: PoolingLayer | None,
    pvars: dict[str, Var],
    videos: dict[str, np.ndarray],
    ids: list[str],
) -> dict[str, Var]:
    """id -> (1, E) embedding Var; video codes go through the pooling graph."""
    rows = []
    for vid in ids:
        frames = videos[vid]
        if pooling is not None:
            code = pooling_graph(pooling.spec, pooling.params, pvars, Var(frames))
            rows.append(ag.reshape(code, (1, -1)))
        else:
            rows.append(Var(np.asarray(frames, dtype=np.float64).reshape(1, -1)))
    batch = rows[0] if len(rows) == 1 else ag.concat(rows, axis=0)
    emb = embed_graph(nvars, batch)
    return {vid: ag.getitem(emb, (slice(i, i + 1), slice(None))) for i, vid in enumerate(ids)}


def triplet_graph(
    nvars: dict[str, Var],
    pooling: PoolingLayer | None,
    pvars: dict[str, Var],
    videos: dict[str, np.ndarray],
    triplets: list[Triplet],
    alpha: float = DEFAULT_MARGIN,
) -> Var:
    """Sum of hinge terms max(d2(a,p) - d2(a,n) + alpha, 0)."""
    ids = sorted({v for t in triplets for v in (t.anchor, t.positive, t.negative)})
    emb = _embed_by_id(nvars, pooling, pvars, videos, ids)
    terms = []
    for t in triplets:
        d_ap = ag.vsum(pow2(ag.sub(emb[t.anchor], emb[t.positive])))
        d_an = ag.vsum(pow2(ag.sub(emb[t.anchor], emb[t.negative])))
        terms.append(ag.relu(ag.add(ag.sub(d_ap, d_an), alpha)))
    total = terms[0]
    for term in terms[1:]:
        total = ag.add(total, term)
    return total


def pow2(v: Var) -> Var:
    return ag.mul(v, v)


def triplet_loss(
    net: EmbedNet,
    pooling: PoolingLayer | None,
    videos: dict[str, np.ndarray],
    triplets: list[Triplet],
    alpha: float = DEFAULT_MARGIN,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus gradients for the net ("net.*") and pooling ("pool.*")."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    nvars = {name: Var(arr) for name, arr in net.trainable().items()}
    pvars = (
        {name: Var(arr) for name, arr in pooling.trainable().items()}
        if pooling is not None
        else {}
    )
    loss = triplet_graph(nvars, pooling, pvars, videos, triplets, alpha)
    ag.backward(loss)
    grads = {"net." + name: v.grad.copy() for name, v in nvars.items()}
    grads.update({"pool." + name: v.grad.copy() for name, v in pvars.items()})
    return float(loss.value), grads


# --- similarity scoring -------------------------------------------------------


@dataclass
class WatchHistory:
    """Per-user sets of validly watched video ids."""

    user_videos: dict[str, set[str]]
    watch_threshold_seconds: float = 30.0  # metadata in the synthetic setting

    def users(self) -> list[str]:
        return sorted(u for u, vids in self.user_videos.items() if vids)


def sim_scores(
    embeddings: dict[str, np.ndarray], history: WatchHistory, user: str, candidate: str
) -> tuple[float, float]:
    """(average, max) cosine between the candidate and the user's history.

    Embeddings are unit vectors, so cosine is a plain dot product.
    """
    watched = history.user_videos.get(user)
    if not watched:
        raise ValueError(f"user {user!r} has no watch history")
    cand = embeddings[candidate]
    sims = [float(embeddings[vid] @ cand) for vid in sorted(watched)]
    return float(np.mean(sims)), float(np.max(sims))


# --- GLMix watch model ---------------------------------------------------------


@dataclass
class GlmixModel:
    """Logistic model: logit p = beta0 + user intercept + feature . user coef."""

    beta0: float
    user_intercept: dict[str, float]
    user_coef: dict[str, np.ndarray]
    prior_strength: float
    feature_dim: int


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _nll(z: np.ndarray, y: np.ndarray) -> float:
    # -sum[y log p + (1-y) log(1-p)] in the stable log1p(exp) form
    return float(np.sum(np.logaddexp(0.0, z) - y * z))


def penalized_loss(model: GlmixModel, observations: list[tuple[str, np.ndarray, int]]) -> float:
    """Negative log-likelihood plus the L2 prior on the user effects."""
    total = 0.0
    for user, feat, y in observations:
        z = model.beta0 + model.user_intercept.get(user, 0.0)
        coef = model.user_coef.get(user)
        if coef is not None:
            z += float(np.dot(coef, feat))
        total += _nll(np.array([z]), np.array([float(y)]))
    for user in model.user_intercept:
        total += 0.5 * model.prior_strength * (
            model.user_intercept[user] ** 2 + float(np.sum(model.user_coef[user] ** 2))
        )
    return total


def glmix_fit(
    observations: list[tuple[str, np.ndarray, int]],
    prior_strength: float = 1.0,
    max_rounds: int = 50,
    tol: float = 1e-6,
) -> GlmixModel:
    """Block coordinate ascent with damped Newton steps.

    Alternates a global-intercept update with per-user updates of
    (intercept, coefficient vector); each step backtracks until the
    penalized loss does not increase, so the loss is non-increasing
    across rounds.
    """
    if not observations:
        raise ValueError("no observations")
    dim = int(np.asarray(observations[0][1]).shape[0])
    users = sorted({u for u, _, _ in observations})
    by_user: dict[str, list[int]] = {u: [] for u in users}
    feats = np.array([np.asarray(f, dtype=np.float64) for _, f, _ in observations])
    ys = np.array([float(y) for _, _, y in observations])
    for i, (u, _, _) in enumerate(observations):
        by_user[u].append(i)

    model = GlmixModel(
        beta0=0.0,
        user_intercept={u: 0.0 for u in users},
        user_coef={u: np.zeros(dim) for u in users},
        prior_strength=prior_strength,
        feature_dim=dim,
    )

    def user_offsets() -> np.ndarray:
        off = np.empty(len(observations))
        for u in users:
            idx = by_user[u]
            off[idx] = model.user_intercept[u] + feats[idx] @ model.user_coef[u]
        return off

    prev = penalized_loss(model, observations)
    for _ in range(max_rounds):
        # (a) global intercept
        off = user_offsets()
        z = model.beta0 + off
        p = _sigmoid(z)
        g = float(np.sum(p - ys))
        hess = float(np.sum(p * (1.0 - p))) + 1e-12
        step = -g / hess
        base_nll = _nll(z, ys)
        scale = 1.0
        for _ in range(30):
            cand = model.beta0 + scale * step
            if _nll(cand + off, ys) <= base_nll:
                model.beta0 = cand
                break
            scale *= 0.5

        # (b) per-user blocks: joint Newton on (intercept, coef)
        for u in users:
            idx = by_user[u]
            fu = feats[idx]
            yu = ys[idx]
            zu = np.hstack([np.ones((len(idx), 1)), fu])  # design with intercept column
            c = np.concatenate([[model.user_intercept[u]], model.user_coef[u]])

            def block_loss(cvec: np.ndarray) -> float:
                zz = model.beta0 + zu @ cvec
                return _nll(zz, yu) + 0.5 * prior_strength * float(np.sum(cvec * cvec))

            pz = _sigmoid(model.beta0 + zu @ c)
            grad = zu.T @ (pz - yu) + prior_strength * c
            w = pz * (1.0 - pz)
            hess_m = (zu * w[:, None]).T @ zu + prior_strength * np.eye(dim + 1)
            try:
                step_vec = np.linalg.solve(hess_m, -grad)
            except np.linalg.LinAlgError:
                step_vec = -grad / (np.trace(hess_m) / (dim + 1))
            base = block_loss(c)
            scale = 1.0
            for _ in range(30):
                cand_vec = c + scale * step_vec
                if block_loss(cand_vec) <= base:
                    model.user_intercept[u] = float(cand_vec[0])
                    model.user_coef[u] = cand_vec[1:].copy()
                    break
                scale *= 0.5

        cur = penalized_loss(model, observations)
        if abs(prev - cur) <= tol * max(1.0, abs(prev)):
            break
        prev = cur
    return model


def glmix_predict(model: GlmixModel, user: str, feature: np.ndarray) -> float:
    """Watch probability; unseen users fall back to the global intercept."""
    z = model.beta0 + model.user_intercept.get(user, 0.0)
    coef = model.user_coef.get(user)
    if coef is not None:
        z += float(np.dot(coef, np.asarray(feature, dtype=np.float64)))
    return float(_sigmoid(z))


# --- co-watch pipeline helpers --------------------------------------------------


def split_sessions(cowatch: CowatchData) -> tuple[list, list]:
    """(training interactions, final-session interactions) per user."""
    last = {}
    for it in cowatch.interactions:
        last[it.user_id] = max(last.get(it.user_id, 0), it.session)
    train, test = [], []
    for it in cowatch.interactions:
        (test if it.session == last[it.user_id] else train).append(it)
    return train, test


def build_history(interactions) -> WatchHistory:
    """Valid watches (label 1) per user."""
    user_videos: dict[str, set[str]] = {}
    for it in interactions:
        if it.label == 1:
            user_videos.setdefault(it.user_id, set()).add(it.video_id)
    return WatchHistory(user_videos)


def glmix_observations(
    interactions, embeddings: dict[str, np.ndarray] | None, dim: int
) -> list[tuple[str, np.ndarray, int]]:
    """(user, candidate feature, watched) rows; None embeddings => zeros."""
    zero = np.zeros(dim)
    out = []
    for it in interactions:
        feat = embeddings[it.video_id] if embeddings is not None else zero
        out.append((it.user_id, feat, it.label))
    return out
