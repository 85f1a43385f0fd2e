"""Trainable cluster-assignment + aggregation layer.

Six ways to softly assign frames to clusters:

  decoupled          softmax(u_k . x + b_k), parameters independent of any
                     density model
  uniform_priors     mixture posterior, weights fixed at 1/K, one shared
                     scalar scale
  shared_spherical   mixture posterior, trainable weights, shared scalar
                     scale
  spherical          per-cluster scalar scales
  shared_diagonal    one shared per-dimension scale vector
  diagonal           per-cluster per-dimension scales

and two aggregations of the resulting statistics: residual codes
(sum of posterior-weighted frame residuals against anchor points) and
smoothed-mean codes (count-weighted interpolation between per-cluster
frame means and the anchors).  Everything is differentiable; constrained
quantities live in unconstrained form (weights as softmax logits, scales
as log-scales) so any real-valued update keeps them feasible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Var
from .gmm import GmmModel

VARIANTS = (
    "decoupled",
    "uniform_priors",
    "shared_spherical",
    "spherical",
    "shared_diagonal",
    "diagonal",
)
COUPLED_VARIANTS = VARIANTS[1:]
CODE_KINDS = ("vlad", "dsgmm")

# covariance kind of a background model that can seed each variant
_INIT_COV_KIND = {
    "decoupled": "shared_full",
    "uniform_priors": "shared_spherical",
    "shared_spherical": "shared_spherical",
    "spherical": "spherical",
    "shared_diagonal": "shared_diagonal",
    "diagonal": "diagonal",
}


@dataclass
class AssignmentParams:
    """Raw (unconstrained) assignment parameters for one variant."""

    variant: str
    u: np.ndarray | None = None  # (K, D) decoupled only
    b: np.ndarray | None = None  # (K,)  decoupled only
    logit_w: np.ndarray | None = None  # (K,)  coupled, absent for uniform_priors
    means: np.ndarray | None = None  # (K, D) coupled only
    log_scale: np.ndarray | None = None  # (), (K,), (D,) or (K, D) by variant

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def k(self) -> int:
        return (self.u if self.variant == "decoupled" else self.means).shape[0]

    @property
    def dim(self) -> int:
        return (self.u if self.variant == "decoupled" else self.means).shape[1]

    def trainable(self) -> dict[str, np.ndarray]:
        """Name -> array for every trainable block, in a fixed order."""
        if self.variant == "decoupled":
            return {"u": self.u, "b": self.b}
        out: dict[str, np.ndarray] = {}
        if self.variant != "uniform_priors":
            out["logit_w"] = self.logit_w
        out["means"] = self.means
        out["log_scale"] = self.log_scale
        return out

    def weights(self) -> np.ndarray:
        """Constrained mixture weights (coupled variants)."""
        if self.variant == "decoupled":
            raise ValueError("decoupled assignment has no mixture weights")
        if self.variant == "uniform_priors":
            return np.full(self.k, 1.0 / self.k)
        z = self.logit_w - self.logit_w.max()
        e = np.exp(z)
        return e / e.sum()

    def scales(self) -> np.ndarray:
        """Constrained standard deviations, broadcast to (K, D)."""
        if self.variant == "decoupled":
            raise ValueError("decoupled assignment has no scales")
        return np.broadcast_to(np.exp(self._log_scale_kd()), (self.k, self.dim)).copy()

    def _log_scale_kd(self) -> np.ndarray:
        ls = self.log_scale
        if self.variant in ("uniform_priors", "shared_spherical"):
            return np.reshape(ls, (1, 1))
        if self.variant == "spherical":
            return np.reshape(ls, (-1, 1))
        if self.variant == "shared_diagonal":
            return np.reshape(ls, (1, -1))
        return ls


@dataclass
class PoolSpec:
    """What to aggregate and how to normalize it.

    ``anchor_means`` holds the residual centroids / smoothing anchors.
    None means the coupled assignment means double as anchors (shared
    storage, one gradient); decoupled assignments need an explicit copy.
    """

    code_kind: str
    k: int
    gamma: float = 0.125
    anchor_means: np.ndarray | None = None
    intra_norm: bool = False
    final_norm: bool = False

    def __post_init__(self):
        if self.code_kind not in CODE_KINDS:
            raise ValueError(f"unknown code kind {self.code_kind!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    def trainable(self) -> dict[str, np.ndarray]:
        if self.anchor_means is None:
            return {}
        return {"anchor_means": self.anchor_means}


@dataclass
class LayerGradients:
    """Gradients for every trainable block plus the input frames."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    frames: np.ndarray | None = None


def _materialize_log_scale(params: AssignmentParams, ls: Var) -> Var:
    """Broadcast the raw log-scale Var to a (K, D) Var."""
    k, d = params.k, params.dim
    if params.variant in ("uniform_priors", "shared_spherical"):
        shaped = ls
    elif params.variant == "spherical":
        shaped = ag.reshape(ls, (k, 1))
    elif params.variant == "shared_diagonal":
        shaped = ag.reshape(ls, (1, d))
    else:
        shaped = ls
    return ag.mul(shaped, np.ones((k, d)))


def assign_graph(params: AssignmentParams, pvars: dict[str, Var], frames: Var) -> Var:
    """(T, K) posterior Var; log-space softmax in every branch."""
    if params.variant == "decoupled":
        logits = ag.add(ag.matmul(frames, ag.transpose(pvars["u"])), pvars["b"])
        return ag.softmax(logits, axis=1)

    k = params.k
    means = pvars["means"]
    ls_kd = _materialize_log_scale(params, pvars["log_scale"])
    inv_var = ag.exp(ag.mul(ls_kd, -2.0))  # 1 / sigma^2

    sq_x = ag.mul(frames, frames)
    term1 = ag.matmul(sq_x, ag.transpose(inv_var))
    term2 = ag.mul(ag.matmul(frames, ag.transpose(ag.mul(means, inv_var))), -2.0)
    term3 = ag.vsum(ag.mul(ag.mul(means, means), inv_var), axis=1)
    quad = ag.add(ag.add(term1, term2), term3)

    if params.variant == "uniform_priors":
        log_prior = Var(np.full(k, -np.log(k)))  # constant, not trainable
    else:
        lw = pvars["logit_w"]
        log_prior = ag.sub(lw, ag.logsumexp(lw, axis=0, keepdims=True))
    log_det = ag.vsum(ls_kd, axis=1)  # sum_i log sigma_ki

    logits = ag.sub(ag.sub(log_prior, log_det), ag.mul(quad, 0.5))
    return ag.softmax(logits, axis=1)


def code_graph(spec: PoolSpec, posteriors: Var, frames: Var, anchors: Var) -> Var:
    """(K, D) code Var from posteriors and frames."""
    k = spec.k
    n = ag.reshape(ag.vsum(posteriors, axis=0), (k, 1))
    sx = ag.matmul(ag.transpose(posteriors), frames)
    if spec.code_kind == "vlad":
        code = ag.sub(sx, ag.mul(n, anchors))
    else:
        denom = ag.add(n, spec.gamma)
        # lam * (Sx/n) + (1-lam) * anchor  ==  Sx/(n+gamma) + anchor * gamma/(n+gamma)
        # which is finite at n = 0 whenever gamma > 0.
        code = ag.add(ag.div(sx, denom), ag.mul(anchors, ag.div(Var(np.float64(spec.gamma)), denom)))
    if spec.intra_norm:
        code = row_normalize(code, axis=1)
    if spec.final_norm:
        flat = ag.reshape(code, (1, -1))
        code = ag.reshape(row_normalize(flat, axis=1), code.value.shape)
    return code


def row_normalize(a: Var, axis: int = 1) -> Var:
    """Exact unit-norm rows; zero rows stay zero with zero gradient."""
    sq = ag.vsum(ag.mul(a, a), axis=axis, keepdims=True)
    mask = (sq.value > 0).astype(np.float64)  # detached branch choice
    norm = ag.sqrt(ag.add(sq, 1.0 - mask))
    return ag.mul(ag.div(a, norm), mask)


def pooling_graph(
    spec: PoolSpec, params: AssignmentParams, pvars: dict[str, Var], frames: Var
) -> Var:
    """Full layer as one Var graph; pvars carries the trainable leaves."""
    post = assign_graph(params, pvars, frames)
    if "anchor_means" in pvars:
        anchors = pvars["anchor_means"]
    elif params.variant != "decoupled":
        anchors = pvars["means"]
    else:
        raise ValueError("decoupled pooling needs explicit anchor means")
    return code_graph(spec, post, frames, anchors)


def make_leaf_vars(spec: PoolSpec, params: AssignmentParams) -> dict[str, Var]:
    leaves = {name: Var(arr) for name, arr in params.trainable().items()}
    for name, arr in spec.trainable().items():
        leaves[name] = Var(arr)
    return leaves


def assign(params: AssignmentParams, frames: np.ndarray) -> np.ndarray:
    """(T, K) posterior matrix; rows sum to 1."""
    frames = np.asarray(frames, dtype=np.float64)
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames must be finite")
    pvars = {name: Var(arr) for name, arr in params.trainable().items()}
    return assign_graph(params, pvars, Var(frames)).value


@dataclass
class PoolCache:
    leaves: dict[str, Var]
    frames: Var
    code: Var


def forward(
    spec: PoolSpec, params: AssignmentParams, frames: np.ndarray
) -> tuple[np.ndarray, PoolCache]:
    frames_v = Var(np.asarray(frames, dtype=np.float64))
    leaves = make_leaf_vars(spec, params)
    code = pooling_graph(spec, params, leaves, frames_v)
    return code.value, PoolCache(leaves, frames_v, code)


def backward(
    spec: PoolSpec,
    params: AssignmentParams,
    frames: np.ndarray,
    upstream: np.ndarray,
    cache: PoolCache | None = None,
) -> LayerGradients:
    """Gradients of sum(code * upstream) for every trainable block."""
    if cache is None:
        raise ValueError("missing forward cache; call forward() first")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.code.value.shape:
        raise ValueError("upstream gradient shape mismatch")
    ag.backward(cache.code, seed=upstream)
    grads = {name: leaf.grad.copy() for name, leaf in cache.leaves.items()}
    return LayerGradients(params=grads, frames=cache.frames.grad.copy())


def init_from_ubm(
    ubm: GmmModel,
    variant: str,
    code_kind: str,
    gamma: float = 0.125,
    intra_norm: bool = False,
    final_norm: bool = False,
) -> tuple[AssignmentParams, PoolSpec]:
    """Seed a trainable layer so assign() reproduces the model's posteriors.

    The decoupled variant folds a shared full covariance into linear scores
    (u_k = inv(Sigma) mu_k, b_k = log w_k - mu_k' inv(Sigma) mu_k / 2); the
    frame-quadratic term is row-constant and cancels in the softmax.
    Coupled variants copy the matching parameterization directly.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    want = _INIT_COV_KIND[variant]
    if ubm.cov.kind != want:
        raise ValueError(f"variant {variant!r} needs a {want!r} covariance model, got {ubm.cov.kind!r}")
    k, d = ubm.k, ubm.dim

    if variant == "decoupled":
        chol = ubm.cov.chol
        u = np.linalg.solve(chol.T, np.linalg.solve(chol, ubm.means.T)).T
        b = np.log(ubm.weights) - 0.5 * np.sum(ubm.means * u, axis=1)
        params = AssignmentParams(variant, u=u, b=b)
    else:
        # stored value is the variance in each kind's natural shape; the
        # raw parameter is log of the standard deviation
        log_scale = 0.5 * np.log(np.asarray(ubm.cov.value, dtype=np.float64))
        logit_w = None if variant == "uniform_priors" else np.log(ubm.weights)
        params = AssignmentParams(
            variant, logit_w=logit_w, means=ubm.means.copy(), log_scale=log_scale
        )
    spec = PoolSpec(
        code_kind,
        k,
        gamma=gamma,
        anchor_means=ubm.means.copy() if variant == "decoupled" else None,
        intra_norm=intra_norm,
        final_norm=final_norm,
    )
    return params, spec
