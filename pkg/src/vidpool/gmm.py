"""Gaussian mixture models: stable density/posterior evaluation and EM.

Supports five covariance parameterizations (shared full, shared spherical,
per-cluster spherical, shared diagonal, per-cluster diagonal).  All density
work routes through the diagonal kernel in ``_backend``: the shared-full
case is whitened by the Cholesky factor first, the others expand to
per-(cluster, dim) variances.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .prng import Stream

COV_KINDS = ("shared_full", "shared_spherical", "spherical", "shared_diagonal", "diagonal")
_COV_TAG = {k: i for i, k in enumerate(COV_KINDS)}
_LOG_2PI = float(np.log(2.0 * np.pi))


class GmmFormatError(ValueError):
    """Malformed GMM1 blob."""


@dataclass
class CovarianceSpec:
    """Covariance parameters for one of the supported kinds.

    ``value`` holds variances (not standard deviations):
      shared_full      (D, D) full matrix
      shared_spherical ()     scalar
      spherical        (K,)   per cluster
      shared_diagonal  (D,)   per dim
      diagonal         (K, D) per cluster and dim
    """

    kind: str
    value: np.ndarray
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in COV_KINDS:
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.kind == "shared_full":
            d = self.value.shape[0]
            if self.value.shape != (d, d):
                raise ValueError("shared_full covariance must be square")
            if not np.allclose(self.value, self.value.T, atol=1e-10):
                raise ValueError("shared_full covariance must be symmetric")
            self._chol = np.linalg.cholesky(self.value)  # raises if not PD
        elif np.any(self.value <= 0):
            raise ValueError("variances must be strictly positive")

    @property
    def chol(self) -> np.ndarray:
        if self.kind != "shared_full":
            raise ValueError("Cholesky factor only exists for shared_full")
        return self._chol

    def as_diag(self, k: int, d: int) -> np.ndarray:
        """Expand to a dense (K, D) variance matrix (non-full kinds only)."""
        if self.kind == "shared_spherical":
            return np.full((k, d), float(self.value))
        if self.kind == "spherical":
            return np.repeat(self.value[:, None], d, axis=1)
        if self.kind == "shared_diagonal":
            return np.repeat(self.value[None, :], k, axis=0)
        if self.kind == "diagonal":
            return self.value.copy()
        raise ValueError("shared_full has no diagonal expansion")

    def as_full(self, k: int, d: int) -> np.ndarray:
        """Expand to dense (K, D, D) covariance matrices."""
        if self.kind == "shared_full":
            return np.repeat(self.value[None, :, :], k, axis=0)
        diag = self.as_diag(k, d)
        out = np.zeros((k, d, d))
        out[:, np.arange(d), np.arange(d)] = diag
        return out


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    cov: CovarianceSpec

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.weights.ndim != 1 or self.means.ndim != 2:
            raise ValueError("weights must be (K,), means (K, D)")
        if self.means.shape[0] != self.weights.shape[0]:
            raise ValueError("weights/means cluster count mismatch")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 100
    rel_tol: float = 1e-6
    variance_floor: float = 1e-6
    init: str = "kmeans"  # "kmeans" | "random"
    seed: int = 0

    def validate(self) -> None:
        if self.max_iters < 1 or self.rel_tol <= 0 or self.variance_floor <= 0:
            raise ValueError("max_iters >= 1, rel_tol > 0, variance_floor > 0 required")
        if self.init not in ("kmeans", "random"):
            raise ValueError("init must be 'kmeans' or 'random'")


# --- density evaluation -------------------------------------------------


def _diag_eval_inputs(model: GmmModel) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project any covariance kind onto the diagonal kernel's inputs.

    Returns (frames_transform, means_eff, inv_var, log_const) where the
    shared_full case whitens by the Cholesky factor (frames must be
    multiplied by frames_transform first) and log_const folds the mixture
    log-weight and the Gaussian normalizer.
    """
    k, d = model.k, model.dim
    logw = np.log(model.weights)
    if model.cov.kind == "shared_full":
        chol = model.cov.chol
        inv_chol_t = np.linalg.solve(chol, np.eye(d)).T  # x @ inv_chol_t whitens
        means_eff = model.means @ inv_chol_t
        inv_var = np.ones((k, d))
        logdet_half = np.log(np.diag(chol)).sum()
        log_const = logw - 0.5 * d * _LOG_2PI - logdet_half
        return inv_chol_t, means_eff, inv_var, log_const
    var = model.cov.as_diag(k, d)
    inv_var = 1.0 / var
    log_const = logw - 0.5 * (d * _LOG_2PI + np.log(var).sum(axis=1))
    return np.empty(0), model.means, inv_var, log_const


def log_joint(model: GmmModel, frames: np.ndarray) -> np.ndarray:
    """(T, K) matrix of log(w_k) + log N(x_t; mu_k, Sigma_k)."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != model.dim:
        raise ValueError(f"frames must be (T, {model.dim})")
    if not np.isfinite(frames).all():
        raise ValueError("frames contain non-finite values")
    transform, means_eff, inv_var, log_const = _diag_eval_inputs(model)
    if transform.size:
        frames = np.ascontiguousarray(frames @ transform)
    return _backend.diag_log_joint(
        frames,
        np.ascontiguousarray(means_eff),
        np.ascontiguousarray(inv_var),
        np.ascontiguousarray(log_const),
    )


def posteriors(model: GmmModel, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(T, K) posterior assignment probabilities and (T,) per-frame loglik."""
    return _backend.posteriors_from_log_joint(log_joint(model, frames))


def log_posterior(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """Log P(k | x) for a single frame, computed via log-sum-exp."""
    lj = log_joint(model, np.asarray(x, dtype=np.float64).reshape(1, -1))[0]
    return lj - _logsumexp(lj)


def loglik(model: GmmModel, frames: np.ndarray) -> float:
    """Total data log-likelihood sum_t log p(x_t)."""
    _, lse = posteriors(model, frames)
    return float(lse.sum())


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


# --- k-means init -------------------------------------------------------


def _kmeans_pp(frames: np.ndarray, k: int, stream: Stream) -> np.ndarray:
    n = frames.shape[0]
    centers = np.empty((k, frames.shape[1]))
    centers[0] = frames[stream.integers(n)]
    d2 = ((frames - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = frames[stream.integers(n)]
            continue
        cdf = np.cumsum(d2 / total)
        cdf[-1] = 1.0
        pick = int(np.searchsorted(cdf, stream.uniform(), side="right"))
        centers[j] = frames[pick]
        d2 = np.minimum(d2, ((frames - centers[j]) ** 2).sum(axis=1))
    return centers


def _kmeans(frames: np.ndarray, k: int, stream: Stream, iters: int = 10) -> np.ndarray:
    centers = _kmeans_pp(frames, k, stream)
    for _ in range(iters):
        d2 = ((frames[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = frames[mask].mean(axis=0)
            else:
                centers[j] = frames[d2.min(axis=1).argmax()]
    return centers


# --- EM -----------------------------------------------------------------


def _mstep(
    frames: np.ndarray,
    post: np.ndarray,
    cov_kind: str,
    floor: float,
) -> GmmModel:
    n_total, d = frames.shape
    k = post.shape[1]
    n, sx, sx2 = _backend.accumulate_stats(
        np.ascontiguousarray(post), np.ascontiguousarray(frames), cov_kind != "shared_full"
    )
    n_safe = np.maximum(n, 1e-300)
    weights = np.maximum(n / n_total, 1e-12)
    weights = weights / weights.sum()
    means = sx / n_safe[:, None]

    if cov_kind == "shared_full":
        # Sum_k [ Sum_t p_tk (x - mu_k)(x - mu_k)^T ] / N
        cov = np.zeros((d, d))
        for j in range(k):
            xw = frames * post[:, j : j + 1]
            cov += frames.T @ xw - np.outer(means[j], sx[j])
        cov /= n_total
        cov = 0.5 * (cov + cov.T)
        evals, evecs = np.linalg.eigh(cov)
        evals = np.maximum(evals, floor)
        value = (evecs * evals) @ evecs.T
        spec = CovarianceSpec("shared_full", 0.5 * (value + value.T))
    else:
        var_diag = sx2 / n_safe[:, None] - means * means  # (K, D)
        if cov_kind == "diagonal":
            value = np.maximum(var_diag, floor)
        elif cov_kind == "shared_diagonal":
            pooled = (sx2 - n[:, None] * means * means).sum(axis=0) / n_total
            value = np.maximum(pooled, floor)
        elif cov_kind == "spherical":
            value = np.maximum(var_diag.mean(axis=1), floor)
        elif cov_kind == "shared_spherical":
            pooled = (sx2 - n[:, None] * means * means).sum() / (n_total * d)
            value = np.maximum(np.float64(pooled), floor)
        else:
            raise ValueError(cov_kind)
        spec = CovarianceSpec(cov_kind, value)
    return GmmModel(weights, means, spec)


def em_fit(
    frames: np.ndarray, k: int, cov_kind: str, cfg: EmConfig
) -> tuple[GmmModel, list[float]]:
    """EM training; returns the model and the per-iteration loglik history.

    The history entry for iteration i is the log-likelihood of the model
    produced by iteration i's M-step, evaluated during the next E-step.
    Empty clusters are re-seeded from the frame farthest from every mean
    (this discontinuous fallback can break monotonicity for that iteration).
    """
    cfg.validate()
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("frames must be a (N, D) matrix")
    if np.unique(frames, axis=0).shape[0] < k:
        raise ValueError(f"need at least {k} distinct frames to fit {k} clusters")
    stream = Stream(cfg.seed, "em-init")
    n_frames = frames.shape[0]

    if cfg.init == "kmeans":
        centers = _kmeans(frames, k, stream)
        d2 = ((frames[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        post = np.zeros((n_frames, k))
        post[np.arange(n_frames), d2.argmin(axis=1)] = 1.0
    else:
        post = stream.uniform((n_frames, k)) + 1e-3
        post /= post.sum(axis=1, keepdims=True)
    model = _mstep(frames, post, cov_kind, cfg.variance_floor)

    history: list[float] = []
    prev = -np.inf
    for _ in range(cfg.max_iters):
        post, lse = posteriors(model, frames)
        ll = float(lse.sum())
        history.append(ll)
        if np.isfinite(prev) and ll + 1e-8 * abs(prev) < prev:
            raise RuntimeError(f"EM log-likelihood decreased: {prev} -> {ll}")
        if np.isfinite(prev) and abs(ll - prev) <= cfg.rel_tol * abs(prev):
            break
        prev = ll
        n_k = post.sum(axis=0)
        empty = np.flatnonzero(n_k < 1e-10)
        if empty.size:
            d2 = ((frames[:, None, :] - model.means[None, :, :]) ** 2).sum(axis=2)
            order = np.argsort(-d2.min(axis=1))
            for slot, j in enumerate(empty):
                post[:, j] = 0.0
                post[order[slot % n_frames], :] = 0.0
                post[order[slot % n_frames], j] = 1.0
            prev = -np.inf  # model jump: restart the monotonicity baseline
        model = _mstep(frames, post, cov_kind, cfg.variance_floor)
    return model, history


def train_ubm(frames: np.ndarray, k: int, cov_kind: str, cfg: EmConfig) -> GmmModel:
    """Train the universal background model on pooled frames."""
    model, _ = em_fit(frames, k, cov_kind, cfg)
    return model


# --- serialization ------------------------------------------------------

_MAGIC = b"GMM1"
_VERSION = 1


def write_gmm(model: GmmModel, path: str) -> None:
    """Versioned binary blob: magic, K, D, cov kind, float64 LE parameters."""
    parts = [
        _MAGIC,
        struct.pack("<IIIB", _VERSION, model.k, model.dim, _COV_TAG[model.cov.kind]),
        model.weights.astype("<f8").tobytes(),
        model.means.astype("<f8").tobytes(),
        np.atleast_1d(model.cov.value).astype("<f8").tobytes(),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_gmm(path: str) -> GmmModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise GmmFormatError("bad magic: not a GMM1 file")
    if len(buf) < 17:
        raise GmmFormatError("truncated GMM1 header")
    version, k, d, tag = struct.unpack("<IIIB", buf[4:17])
    if version != _VERSION:
        raise GmmFormatError(f"unsupported GMM1 version {version}")
    if tag >= len(COV_KINDS):
        raise GmmFormatError(f"unknown covariance tag {tag}")
    kind = COV_KINDS[tag]
    cov_len = {"shared_full": d * d, "shared_spherical": 1, "spherical": k,
               "shared_diagonal": d, "diagonal": k * d}[kind]
    need = 17 + 8 * (k + k * d + cov_len)
    if len(buf) != need:
        raise GmmFormatError(f"GMM1 payload length {len(buf)} != expected {need}")
    off = 17
    weights = np.frombuffer(buf, dtype="<f8", count=k, offset=off).copy()
    off += 8 * k
    means = np.frombuffer(buf, dtype="<f8", count=k * d, offset=off).reshape(k, d).copy()
    off += 8 * k * d
    cov_flat = np.frombuffer(buf, dtype="<f8", count=cov_len, offset=off).copy()
    shape = {"shared_full": (d, d), "shared_spherical": (), "spherical": (k,),
             "shared_diagonal": (d,), "diagonal": (k, d)}[kind]
    return GmmModel(weights, means, CovarianceSpec(kind, cov_flat.reshape(shape)))


def gmm_to_json(model: GmmModel) -> str:
    """Human-readable export for debugging (not the canonical format)."""
    return json.dumps(
        {
            "k": model.k,
            "dim": model.dim,
            "cov_kind": model.cov.kind,
            "weights": model.weights.tolist(),
            "means": model.means.tolist(),
            "cov": np.atleast_1d(model.cov.value).tolist(),
        },
        indent=2,
    )
