"""Unsupervised cluster-and-aggregate pooling.

One pass over a video's frames against the background model yields the
per-cluster sufficient statistics (soft count, first moment, optional
second moment); every code defined here is a cheap function of those
statistics:

  smoothed-mean code  row_k = lam_k * Sx(k)/n(k) + (1 - lam_k) * mu_k,
                      lam_k = n(k) / (n(k) + gamma)
  residual (VLAD)     row_k = Sx(k) - n(k) * mu_k
  bag-of-words        n(k) / T
  average pooling     mean over frames (no background model)

With gamma = 0 the smoothed estimates reduce to the per-video ML estimates;
as gamma grows they pull toward the background model, and clusters with
zero soft count return the background parameters exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import _backend
from .data import VideoRecord
from .gmm import GmmModel, posteriors


class VcodError(ValueError):
    """Malformed VCOD data."""


@dataclass
class SufficientStats:
    """Per-cluster accumulators for one video."""

    n: np.ndarray  # (K,) soft counts
    sx: np.ndarray  # (K, D) first moments
    sx2_diag: np.ndarray | None = None  # (K, D)
    sx2_full: np.ndarray | None = None  # (K, D, D)
    frame_count: int = 0

    @property
    def k(self) -> int:
        return self.n.shape[0]

    @property
    def dim(self) -> int:
        return self.sx.shape[1]


@dataclass(frozen=True)
class SmoothingConfig:
    """Relevance-factor smoothing toward the background model.

    One gamma is shared by all statistics; the flags select which outputs
    to compute.
    """

    gamma: float = 0.125
    weights: bool = True
    means: bool = True
    covariances: bool = False

    def validate(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not (self.weights or self.means or self.covariances):
            raise ValueError("no outputs selected")


@dataclass
class MixtureEstimates:
    weights: np.ndarray | None
    means: np.ndarray | None
    covariances: np.ndarray | None  # (K, D) diagonal or (K, D, D) full


def _frames_of(video) -> np.ndarray:
    return video.frames if isinstance(video, VideoRecord) else np.asarray(video, dtype=np.float64)


def accumulate(ubm: GmmModel, video, second_moment: str = "diag") -> SufficientStats:
    """Soft-count statistics of a video's frames under the background model.

    ``second_moment`` is one of "none", "diag", "full"; diagonal is the
    default since mean-based codes never need more.
    """
    if second_moment not in ("none", "diag", "full"):
        raise ValueError("second_moment must be none|diag|full")
    frames = _frames_of(video)
    if frames.shape[1] != ubm.dim:
        raise ValueError(f"frame dim {frames.shape[1]} != model dim {ubm.dim}")
    post, _ = posteriors(ubm, frames)
    n, sx, sx2_diag = _backend.accumulate_stats(
        np.ascontiguousarray(post),
        np.ascontiguousarray(frames, dtype=np.float64),
        second_moment == "diag",
    )
    sx2_full = None
    if second_moment == "full":
        sx2_full = np.einsum("tk,ti,tj->kij", post, frames, frames)
    return SufficientStats(n, sx, sx2_diag, sx2_full, frames.shape[0])


def ml_estimates(stats: SufficientStats, ubm: GmmModel | None = None) -> MixtureEstimates:
    """Per-video maximum-likelihood estimates from the statistics.

    Clusters with zero soft count have no ML estimate; their rows fall back
    to the background parameters when ``ubm`` is given and are NaN-flagged
    otherwise.
    """
    total = stats.n.sum()
    if total <= 0:
        raise ValueError("all-zero statistics: no frames were assigned")
    zero = stats.n == 0
    n_safe = np.where(zero, 1.0, stats.n)
    weights = stats.n / total
    means = stats.sx / n_safe[:, None]

    covs = None
    if stats.sx2_full is not None:
        covs = stats.sx2_full / n_safe[:, None, None] - means[:, :, None] * means[:, None, :]
    elif stats.sx2_diag is not None:
        covs = stats.sx2_diag / n_safe[:, None] - means * means

    if zero.any():
        if ubm is None:
            means = means.copy()
            means[zero] = np.nan
            if covs is not None:
                covs[zero] = np.nan
        else:
            means = means.copy()
            means[zero] = ubm.means[zero]
            if covs is not None:
                full = covs.ndim == 3
                ubm_cov = ubm.cov.as_full(ubm.k, ubm.dim) if full else ubm.cov.as_diag(ubm.k, ubm.dim)
                covs[zero] = ubm_cov[zero]
    return MixtureEstimates(weights, means, covs)


def smoothed_estimates(
    stats: SufficientStats, ubm: GmmModel, cfg: SmoothingConfig
) -> MixtureEstimates:
    """Relevance-factor smoothed per-video estimates.

    lam_k = n(k) / (n(k) + gamma) interpolates each statistic between its
    per-video ML estimate (lam = 1) and the background parameter (lam = 0);
    zero-count clusters return background parameters exactly, and the
    smoothed weight vector is renormalized to sum to one.
    """
    cfg.validate()
    if stats.k != ubm.k or stats.dim != ubm.dim:
        raise ValueError("statistics shape does not match the background model")
    total = stats.n.sum()
    zero = stats.n == 0
    n_safe = np.where(zero, 1.0, stats.n)
    # gamma == 0 and n > 0 gives lam exactly 1.0 (n/n); zero-count clusters
    # are forced to lam = 0 so they return the background parameters.
    lam = np.where(zero, 0.0, stats.n / np.where(zero, 1.0, stats.n + cfg.gamma))

    weights = None
    if cfg.weights:
        ml_w = stats.n / total
        weights = lam * ml_w + (1.0 - lam) * ubm.weights
        weights = weights / weights.sum()

    means = None
    ml_means = stats.sx / n_safe[:, None]
    if cfg.means or cfg.covariances:
        means = lam[:, None] * ml_means + (1.0 - lam[:, None]) * ubm.means
        means[zero] = ubm.means[zero]

    covs = None
    if cfg.covariances:
        if stats.sx2_full is not None:
            ubm_cov = ubm.cov.as_full(ubm.k, ubm.dim)
            prior = ubm.means[:, :, None] * ubm.means[:, None, :] + ubm_cov
            raw2 = stats.sx2_full / n_safe[:, None, None]
            covs = (
                lam[:, None, None] * raw2
                + (1.0 - lam[:, None, None]) * prior
                - means[:, :, None] * means[:, None, :]
            )
            covs[zero] = ubm_cov[zero]
        elif stats.sx2_diag is not None:
            ubm_cov = ubm.cov.as_diag(ubm.k, ubm.dim)
            prior = ubm.means * ubm.means + ubm_cov
            raw2 = stats.sx2_diag / n_safe[:, None]
            covs = lam[:, None] * raw2 + (1.0 - lam[:, None]) * prior - means * means
            covs[zero] = ubm_cov[zero]
        else:
            raise ValueError("covariance output requested but no second moments accumulated")
    if means is not None and not cfg.means:
        means = None
    return MixtureEstimates(weights, means, covs)


# --- video codes ----------------------------------------------------------


def sgmm_code(
    stats: SufficientStats,
    ubm: GmmModel,
    gamma: float = 0.125,
    intra_norm: bool = False,
    final_norm: bool = False,
) -> np.ndarray:
    """(K, D) code whose rows are the smoothed per-cluster means."""
    est = smoothed_estimates(stats, ubm, SmoothingConfig(gamma, weights=False, means=True))
    return normalize(est.means, intra_norm, final_norm)


def vlad_code(stats: SufficientStats, ubm: GmmModel) -> np.ndarray:
    """(K, D) code of aggregated residuals: Sx(k) - n(k) * mu_k."""
    return stats.sx - stats.n[:, None] * ubm.means


def bow_code(stats: SufficientStats) -> np.ndarray:
    """(K,) histogram of soft counts, normalized to sum to one."""
    total = stats.n.sum()
    if total <= 0:
        raise ValueError("all-zero statistics")
    return stats.n / total


def avg_pool(video) -> np.ndarray:
    """(D,) mean of the frame features."""
    return _frames_of(video).mean(axis=0)


def normalize(code: np.ndarray, intra: bool, final: bool) -> np.ndarray:
    """Row-wise then whole-code L2 normalization; zero rows stay zero.

    1-D inputs are treated as a single row, so intra and final coincide.
    """
    out = np.array(code, dtype=np.float64, copy=True)
    if intra:
        if out.ndim == 1:
            norm = np.linalg.norm(out)
            if norm > 0:
                out /= norm
        else:
            norms = np.linalg.norm(out, axis=1, keepdims=True)
            out = np.where(norms > 0, out / np.where(norms > 0, norms, 1.0), 0.0)
    if final:
        total = np.linalg.norm(out)
        if total > 0:
            out = out / total
    return out


# --- VCOD container -------------------------------------------------------

_VCOD_MAGIC = b"VCOD"


def write_vcod(path: str, codes: list[tuple[str, np.ndarray]]) -> dict[str, int]:
    """Write codes as consecutive (rows, cols, float32 payload) blocks.

    A sidecar ``<path>.manifest.json`` maps video id -> byte offset of its
    block; the manifest is also returned.  Vectors are stored as a single
    row.  Ids must be unique.
    """
    manifest: dict[str, int] = {}
    with open(path, "wb") as fh:
        fh.write(_VCOD_MAGIC)
        off = 4
        for vid, code in codes:
            if vid in manifest:
                raise VcodError(f"duplicate video id {vid!r}")
            mat = np.atleast_2d(np.asarray(code, dtype=np.float64))
            manifest[vid] = off
            block = struct.pack("<II", mat.shape[0], mat.shape[1]) + mat.astype("<f4").tobytes()
            fh.write(block)
            off += len(block)
    write_vcod_manifest(manifest, path + ".manifest.json")
    return manifest


def write_vcod_manifest(manifest: dict[str, int], path: str) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=0, sort_keys=True)


def read_vcod(path: str) -> dict[str, np.ndarray]:
    """Sequentially read a VCOD file; needs the manifest for the id order."""
    manifest_path = path + ".manifest.json"
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _VCOD_MAGIC:
        raise VcodError("bad magic: not a VCOD file")
    out: dict[str, np.ndarray] = {}
    for vid, off in sorted(manifest.items(), key=lambda kv: kv[1]):
        if off + 8 > len(buf):
            raise VcodError(f"truncated block header for {vid!r} at offset {off}")
        rows, cols = struct.unpack("<II", buf[off : off + 8])
        end = off + 8 + 4 * rows * cols
        if end > len(buf):
            raise VcodError(f"truncated payload for {vid!r} at offset {off + 8}")
        out[vid] = (
            np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off + 8)
            .reshape(rows, cols)
            .astype(np.float64)
        )
    return out
