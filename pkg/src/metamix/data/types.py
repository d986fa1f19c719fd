"""Core data carriers: feature space, samples, per-user datasets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class FeatureSpace:
    """Fielded one-hot layout: field f owns global indices
    [offset[f], offset[f] + buckets[f])."""

    field_names: tuple
    hash_buckets_per_field: tuple

    def __post_init__(self):
        if len(self.field_names) != len(self.hash_buckets_per_field):
            raise ValueError("field_names and bucket counts disagree")
        if any(b <= 0 for b in self.hash_buckets_per_field):
            raise ValueError("every field needs at least one bucket")

    @property
    def num_fields(self) -> int:
        return len(self.field_names)

    @property
    def num_features(self) -> int:
        return int(sum(self.hash_buckets_per_field))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.hash_buckets_per_field))).astype(np.int64)

    def global_index(self, field_id: int, bucket: int) -> int:
        if not (0 <= bucket < self.hash_buckets_per_field[field_id]):
            raise IndexError(f"bucket {bucket} outside field {field_id}")
        return int(self.offsets[field_id] + bucket)

    def field_of(self, index: int) -> int:
        """Recover the owning field of a global index."""
        if not (0 <= index < self.num_features):
            raise IndexError(f"feature index {index} out of range")
        return int(np.searchsorted(self.offsets, index, side="right") - 1)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, b in zip(self.field_names, self.hash_buckets_per_field):
            h.update(f"{name}:{b};".encode())
        return h.hexdigest()


@dataclass(frozen=True)
class Sample:
    """One labelled event as a sparse fielded vector.

    ``idx`` holds global feature indices, ``fld`` the owning field of each,
    ``val`` the per-entry weight: 1/(number of values in that field), so
    multi-valued fields are mean-pooled. Entries are sorted by (field, index)
    and duplicates within a field are aggregated.
    """

    user_id: str
    label: int
    fld: np.ndarray
    idx: np.ndarray
    val: np.ndarray
    timestamp: Optional[int] = None

    @property
    def feature_indices(self):
        return list(zip(self.fld.tolist(), self.idx.tolist()))


def make_sample(
    user_id: str,
    label: int,
    pairs: Sequence[tuple],
    timestamp: Optional[int] = None,
    space: Optional[FeatureSpace] = None,
) -> Sample:
    """Build a Sample from (field_id, global_index) pairs.

    Validates labels and (when a space is given) index ranges; weights each
    entry by 1/(count of values in its field) and merges duplicates.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    if not pairs:
        raise ValueError("a sample needs at least one feature")
    counts: dict = {}
    for f, _ in pairs:
        counts[f] = counts.get(f, 0) + 1
    agg = {}
    for f, i in pairs:
        if space is not None:
            lo = space.offsets[f]
            hi = lo + space.hash_buckets_per_field[f]
            if not (lo <= i < hi):
                raise ValueError(f"index {i} outside field {f} range [{lo},{hi})")
        agg[(f, i)] = agg.get((f, i), 0.0) + 1.0 / counts[f]
    keys = sorted(agg)
    fld = np.array([k[0] for k in keys], dtype=np.int32)
    idx = np.array([k[1] for k in keys], dtype=np.int64)
    val = np.array([agg[k] for k in keys], dtype=np.float64)
    return Sample(user_id=user_id, label=int(label), fld=fld, idx=idx, val=val, timestamp=timestamp)


@dataclass
class UserSamples:
    """All of one user's events in chronological order, before splitting."""

    user_id: str
    samples: list


@dataclass
class UserDataset:
    """One user's split data: train = support + query, test held out."""

    user_id: str
    train: list
    test: list
    support: list
    query: list

    def __post_init__(self):
        self._packed = {}

    def packed(self, part: str) -> "PackedBatch":
        """Padded array view of a split part, cached (parts are immutable)."""
        if part not in self._packed:
            self._packed[part] = pack_batch(getattr(self, part))
        return self._packed[part]


@dataclass(frozen=True)
class PackedBatch:
    """Batch of samples padded to a common active-feature count.

    Padding entries carry val == 0 so they contribute nothing; their idx/fld
    are 0 (a valid position) to keep gathers in range.
    """

    idx: np.ndarray    # (B, A) int64
    fld: np.ndarray    # (B, A) int32
    val: np.ndarray    # (B, A) float64
    y: np.ndarray      # (B,) float64
    n: int

    @property
    def size(self) -> int:
        return self.n


def pack_batch(samples: Sequence[Sample]) -> PackedBatch:
    if len(samples) == 0:
        raise ValueError("empty batch")
    widest = max(len(s.idx) for s in samples)
    b = len(samples)
    idx = np.zeros((b, widest), dtype=np.int64)
    fld = np.zeros((b, widest), dtype=np.int32)
    val = np.zeros((b, widest), dtype=np.float64)
    y = np.empty(b, dtype=np.float64)
    for r, s in enumerate(samples):
        k = len(s.idx)
        idx[r, :k] = s.idx
        fld[r, :k] = s.fld
        val[r, :k] = s.val
        y[r] = s.label
    return PackedBatch(idx=idx, fld=fld, val=val, y=y, n=b)
