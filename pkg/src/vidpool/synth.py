"""Seeded synthetic data: classification videos and co-watch logs.

The classification generator plants the class signal in *cluster occupancy*:
cluster centroids come in +/- pairs so every class mixture has (near) zero
mean, which starves average pooling of signal while cluster-and-aggregate
representations see large occupancy differences between classes.

The co-watch generator simulates users with a preferred class browsing
session windows; watches are Bernoulli draws of a logistic affinity model,
co-watch pairs are two watches inside one session, and negatives are
presented-but-unwatched videos from the same session.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import Dataset, VideoRecord
from .prng import Stream


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int
    num_clusters_true: int
    dim: int
    videos_per_class: int
    frames_min: int
    frames_max: int
    cluster_spread: float
    seed: int
    center_scale: float = 4.0  # radius scale of cluster centroids
    focus: float = 0.8  # occupancy mass on a class's preferred centroids
    max_extra_labels: int = 2

    def validate(self) -> None:
        if self.num_classes < 1 or self.num_clusters_true < 1 or self.dim < 1:
            raise ValueError("num_classes, num_clusters_true, dim must be positive")
        if self.videos_per_class < 1:
            raise ValueError("videos_per_class must be positive")
        if self.frames_min < 1 or self.frames_min > self.frames_max:
            raise ValueError("need 1 <= frames_min <= frames_max")
        if not (self.cluster_spread > 0):
            raise ValueError("cluster_spread must be > 0")
        if not (0.0 < self.focus < 1.0):
            raise ValueError("focus must be in (0, 1)")


def cluster_centers(cfg: SynthConfig) -> np.ndarray:
    """(M, D) centroids arranged in +v/-v pairs (last one unpaired if M is odd)."""
    m, d = cfg.num_clusters_true, cfg.dim
    stream = Stream(cfg.seed, "centers")
    base = stream.normal(((m + 1) // 2, d))
    base *= cfg.center_scale / np.maximum(np.linalg.norm(base, axis=1, keepdims=True), 1e-12)
    centers = np.empty((m, d))
    centers[0::2] = base[: (m + 1) // 2]
    centers[1::2] = -base[: m // 2]
    return centers


def class_occupancy(cfg: SynthConfig) -> np.ndarray:
    """(C, M) per-class distributions over the shared clusters.

    Class c concentrates ``focus`` mass on the centroids of pair c and pair
    c+1 (mod #pairs); adjacent classes share one pair, which gives the label
    space a nearest-neighbour structure used for extra-label sampling.
    """
    c_n, m = cfg.num_classes, cfg.num_clusters_true
    pairs = m // 2
    occ = np.full((c_n, m), (1.0 - cfg.focus) / m)
    if pairs >= 2:
        for c in range(c_n):
            preferred = []
            for p in (c % pairs, (c + 1) % pairs):
                preferred.extend([2 * p, 2 * p + 1])
            preferred = sorted(set(preferred))
            occ[c, :] = (1.0 - cfg.focus) / max(m - len(preferred), 1)
            occ[c, preferred] = cfg.focus / len(preferred)
    else:
        for c in range(c_n):
            k = c % m
            occ[c, :] = (1.0 - cfg.focus) / max(m - 1, 1) if m > 1 else 0.0
            occ[c, k] = cfg.focus if m > 1 else 1.0
    return occ / occ.sum(axis=1, keepdims=True)


def occupancy_tv_distances(occ: np.ndarray) -> np.ndarray:
    """(C, C) total-variation distances between class occupancy profiles."""
    return 0.5 * np.abs(occ[:, None, :] - occ[None, :, :]).sum(axis=2)


def _sample_categorical(stream: Stream, probs: np.ndarray, n: int) -> np.ndarray:
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    u = stream.uniform(n)
    return np.searchsorted(cdf, u, side="right")


def gen_classification(cfg: SynthConfig) -> Dataset:
    """Multi-label classification dataset; deterministic given cfg.seed."""
    cfg.validate()
    centers = cluster_centers(cfg)
    occ = class_occupancy(cfg)
    tv = occupancy_tv_distances(occ)

    # For each class, the nearest other classes by occupancy profile.
    neighbor_order = []
    for c in range(cfg.num_classes):
        order = sorted(
            (c2 for c2 in range(cfg.num_classes) if c2 != c),
            key=lambda c2: (tv[c, c2], c2),
        )
        neighbor_order.append(order[:3])

    records = []
    idx = 0
    for c in range(cfg.num_classes):
        for v in range(cfg.videos_per_class):
            stream = Stream(cfg.seed, "video", idx)
            span = cfg.frames_max - cfg.frames_min + 1
            t = cfg.frames_min + (stream.integers(span) if span > 1 else 0)
            assignments = _sample_categorical(stream, occ[c], t)
            noise = stream.normal((t, cfg.dim))
            frames = centers[assignments] + cfg.cluster_spread * noise
            # Keep values exactly float32-representable so VSEQ round-trips.
            frames = frames.astype(np.float32).astype(np.float64)

            labels = {c}
            if cfg.max_extra_labels > 0 and neighbor_order[c]:
                n_extra = stream.integers(cfg.max_extra_labels + 1)
                picks = stream.permutation(len(neighbor_order[c]))[:n_extra]
                labels.update(neighbor_order[c][p] for p in picks)
            records.append(VideoRecord(f"c{c:03d}_v{v:05d}", labels, frames))
            idx += 1
    return Dataset(records, cfg.num_classes, cfg.dim)


class Interaction(NamedTuple):
    user_id: str
    session: int
    video_id: str
    label: int


class CowatchData(NamedTuple):
    interactions: list[Interaction]
    pairs: list[tuple[str, str]]  # co-watch (anchor, positive) video ids
    triplets: list[tuple[str, str, str]]  # (anchor, positive, negative) ids


def gen_cowatch(
    num_users: int,
    videos: Dataset,
    affinity_seed: int,
    *,
    sessions_per_user: int = 6,
    videos_per_session: int = 8,
    affinity: float = 4.0,
    base_rate: float = -1.5,
    history_fraction: float = 0.75,
) -> CowatchData:
    """Simulate per-user session windows of presented videos and watches.

    Each user has one latent preferred class; the probability of watching a
    presented video is ``sigmoid(base_rate + affinity * [preferred class in
    video.labels])``.  Sessions before the last draw candidates from the
    first ``history_fraction`` of the catalog; the final session draws from
    the whole catalog, so videos in the tail slice only ever appear in the
    final (evaluation) session and are cold-start candidates.  Co-watch
    pairs and triplets are mined from the non-final sessions only.
    """
    if num_users < 0:
        raise ValueError("num_users must be >= 0")
    if num_users > 0 and len(videos.records) == 0:
        raise ValueError("videos must be non-empty")
    interactions: list[Interaction] = []
    pairs: list[tuple[str, str]] = []
    triplets: list[tuple[str, str, str]] = []
    n_videos = len(videos.records)
    pool_cut = max(1, int(np.ceil(history_fraction * n_videos)))

    for u in range(num_users):
        user_id = f"u{u:05d}"
        stream = Stream(affinity_seed, "user", u)
        preferred = stream.integers(videos.num_classes)
        for s in range(sessions_per_user):
            pool = n_videos if s == sessions_per_user - 1 else pool_cut
            n_present = min(videos_per_session, pool)
            present = stream.permutation(pool)[:n_present]
            watched: list[str] = []
            unwatched: list[str] = []
            for vi in present:
                rec = videos.records[int(vi)]
                logit = base_rate + (affinity if preferred in rec.labels else 0.0)
                p = 1.0 / (1.0 + np.exp(-logit))
                label = 1 if stream.uniform() < p else 0
                interactions.append(Interaction(user_id, s, rec.id, label))
                (watched if label else unwatched).append(rec.id)
            if s == sessions_per_user - 1:
                continue
            for i in range(len(watched)):
                for j in range(i + 1, len(watched)):
                    pairs.append((watched[i], watched[j]))
                    if unwatched:
                        neg = unwatched[stream.integers(len(unwatched))]
                        triplets.append((watched[i], watched[j], neg))
    return CowatchData(interactions, pairs, triplets)


def save_cowatch(cw: CowatchData, path: str) -> None:
    """JSON round-trip companion of gen_cowatch output."""
    doc = {
        "interactions": [list(it) for it in cw.interactions],
        "pairs": [list(p) for p in cw.pairs],
        "triplets": [list(t) for t in cw.triplets],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def load_cowatch(path: str) -> CowatchData:
    with open(path) as fh:
        doc = json.load(fh)
    return CowatchData(
        [Interaction(u, int(s), v, int(lab)) for u, s, v, lab in doc["interactions"]],
        [tuple(p) for p in doc["pairs"]],
        [tuple(t) for t in doc["triplets"]],
    )
