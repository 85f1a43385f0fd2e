"""Pure-numpy implementations of the hot GMM kernels.

Same contracts as the compiled ``_kernels`` extension; selected as the
fallback backend when the extension is unavailable (see ``_backend``).
All kernels take and return float64 C-contiguous arrays.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def diag_log_joint(
    frames: np.ndarray, means: np.ndarray, inv_var: np.ndarray, log_const: np.ndarray
) -> np.ndarray:
    """Per-frame, per-cluster unnormalized log joints for diagonal Gaussians.

    out[t, k] = log_const[k] - 0.5 * sum_i (x[t,i] - mu[k,i])^2 * inv_var[k,i]

    ``log_const`` should fold in the mixture log-weight and the Gaussian
    normalizer; ``inv_var`` is 1/variance per (cluster, dim).
    """
    sq = frames * frames
    cross = frames @ (means * inv_var).T
    mean_term = np.einsum("kd,kd->k", means * means, inv_var)
    quad = sq @ inv_var.T - 2.0 * cross + mean_term[None, :]
    return log_const[None, :] - 0.5 * quad


def posteriors_from_log_joint(log_joint: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-softmax in log space; returns (posteriors, per-row logsumexp)."""
    m = log_joint.max(axis=1, keepdims=True)
    shifted = np.exp(log_joint - m)
    denom = shifted.sum(axis=1, keepdims=True)
    lse = (m + np.log(denom))[:, 0]
    return shifted / denom, lse


def accumulate_stats(
    posteriors: np.ndarray, frames: np.ndarray, want_sx2_diag: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Soft counts, first moments, and optional diagonal second moments."""
    n = posteriors.sum(axis=0)
    sx = posteriors.T @ frames
    sx2 = posteriors.T @ (frames * frames) if want_sx2_diag else None
    return n, sx, sx2
