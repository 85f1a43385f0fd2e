"""Video/frame data model and the VSEQ container format.

A video is a set of precomputed D-dimensional frame feature vectors plus a
set of label indices.  In-memory math is float64; the VSEQ container stores
frame features as float32 little-endian, so datasets meant to round-trip
through files should carry float32-representable frame values (the
synthetic generators guarantee this).

VSEQ layout (all integers little-endian):
  magic "VSEQ" | u32 version=1 | u32 D | u32 record_count
  per record: u16 id_len | id utf-8 | u16 label_count | u32 labels...
              | u32 T | T*D float32 row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class VseqError(ValueError):
    """Malformed or unreadable VSEQ data."""


_MAGIC = b"VSEQ"
_VERSION = 1
_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF


@dataclass(eq=False)
class VideoRecord:
    """One video: id, label-index set, and a (T, D) frame feature matrix."""

    id: str
    labels: set[int]
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"record {self.id!r}: frames must be a (T>=1, D) matrix")
        if not np.isfinite(self.frames).all():
            raise ValueError(f"record {self.id!r}: frames contain non-finite values")
        self.labels = {int(l) for l in self.labels}
        if any(l < 0 for l in self.labels):
            raise ValueError(f"record {self.id!r}: negative label index")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.labels == other.labels
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(eq=False)
class Dataset:
    """An ordered collection of VideoRecords over a fixed label space."""

    records: list[VideoRecord]
    num_classes: int
    dim: int
    _by_id: dict[str, VideoRecord] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()
        self._by_id = {r.id: r for r in self.records}

    def validate(self) -> None:
        if self.num_classes < 1 or self.dim < 1:
            raise ValueError("num_classes and dim must be positive")
        if len({r.id for r in self.records}) != len(self.records):
            seen = set()
            dup = next(r.id for r in self.records if r.id in seen or seen.add(r.id))
            raise ValueError(f"duplicate video id {dup!r}")
        for rec in self.records:
            if rec.dim != self.dim:
                raise ValueError(f"record {rec.id!r}: dim {rec.dim} != dataset dim {self.dim}")
            bad = [l for l in rec.labels if l >= self.num_classes]
            if bad:
                raise ValueError(f"record {rec.id!r}: label {bad[0]} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self, video_id: str) -> VideoRecord:
        return self._by_id[video_id]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.records[i] for i in indices], self.num_classes, self.dim)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.dim == other.dim
            and len(self.records) == len(other.records)
            and all(a == b for a, b in zip(self.records, other.records))
        )


def write_vseq(dataset: Dataset, path: str) -> None:
    """Write a dataset to a VSEQ file (frames are stored as float32)."""
    dataset.validate()
    parts = [_MAGIC, struct.pack("<III", _VERSION, dataset.dim, len(dataset.records))]
    for rec in dataset.records:
        ident = rec.id.encode("utf-8")
        if len(ident) > _U16_MAX:
            raise VseqError(f"record id too long for format: {len(ident)} bytes")
        if len(rec.labels) > _U16_MAX:
            raise VseqError(f"record {rec.id!r}: too many labels for format")
        if rec.num_frames > _U32_MAX:
            raise VseqError(f"record {rec.id!r}: too many frames for format")
        labels = sorted(rec.labels)
        parts.append(struct.pack("<H", len(ident)))
        parts.append(ident)
        parts.append(struct.pack("<H", len(labels)))
        parts.append(struct.pack(f"<{len(labels)}I", *labels) if labels else b"")
        parts.append(struct.pack("<I", rec.num_frames))
        with np.errstate(over="ignore"):
            payload = rec.frames.astype("<f4")
        if not np.isfinite(payload).all():
            raise VseqError(f"record {rec.id!r}: frames overflow float32")
        parts.append(payload.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    """Byte cursor with offset-aware truncation errors."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise VseqError(f"truncated file: needed {n} bytes for {what} at offset {self.off}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_vseq(path: str, num_classes: int | None = None) -> Dataset:
    """Read a VSEQ file written by :func:`write_vseq`.

    The container does not record the label-space size; when ``num_classes``
    is omitted it is inferred as ``max(label) + 1`` (1 for an unlabeled
    dataset).  The synthetic generators emit every class at least once, so
    round-trips of generated data recover ``num_classes`` exactly.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf)
    if cur.take(4, "magic") != _MAGIC:
        raise VseqError("bad magic: not a VSEQ file")
    version = cur.u32("version")
    if version != _VERSION:
        raise VseqError(f"unsupported VSEQ version {version}")
    dim = cur.u32("dim")
    count = cur.u32("record count")
    if dim < 1:
        raise VseqError("dim field must be positive")
    records = []
    max_label = -1
    for i in range(count):
        id_len = cur.u16(f"record {i} id length")
        ident = cur.take(id_len, f"record {i} id").decode("utf-8")
        n_labels = cur.u16(f"record {i} label count")
        labels_raw = cur.take(4 * n_labels, f"record {i} labels")
        labels = set(struct.unpack(f"<{n_labels}I", labels_raw)) if n_labels else set()
        t = cur.u32(f"record {i} frame count")
        frame_off = cur.off
        payload = cur.take(4 * t * dim, f"record {i} frames")
        frames = np.frombuffer(payload, dtype="<f4").reshape(t, dim).astype(np.float64)
        if not np.isfinite(frames).all():
            bad = int(np.flatnonzero(~np.isfinite(frames))[0])
            raise VseqError(
                f"non-finite frame value in record {i} ({ident!r}) at float index {bad}"
                f" (byte offset {frame_off + 4 * bad})"
            )
        if labels:
            max_label = max(max_label, max(labels))
        records.append(VideoRecord(ident, labels, frames))
    if cur.off != len(buf):
        raise VseqError(f"trailing garbage: {len(buf) - cur.off} bytes after last record")
    if num_classes is None:
        num_classes = max(max_label + 1, 1)
    return Dataset(records, num_classes, dim)


def split_dataset(dataset: Dataset, fractions: tuple[float, ...], seed: int) -> list[Dataset]:
    """Deterministically shuffle and split a dataset by fractions.

    Fractions must sum to at most 1; the final split absorbs rounding.
    """
    from .prng import Stream

    if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise ValueError("fractions must be non-negative and sum to <= 1")
    perm = Stream(seed, "dataset-split").permutation(len(dataset.records))
    counts = [int(round(f * len(dataset.records))) for f in fractions[:-1]]
    counts.append(len(dataset.records) - sum(counts) if abs(sum(fractions) - 1.0) < 1e-9
                  else int(round(fractions[-1] * len(dataset.records))))
    parts, start = [], 0
    for c in counts:
        parts.append(dataset.subset(perm[start : start + c]))
        start += c
    return parts
