"""Canonical dataset dump: the generic ingestion format.

One header line ``#fields:<n> #features:<n> #buckets:a,b,...`` followed by
one line per sample::

    user_id<TAB>label<TAB>field:index[,field:index...]

The #buckets token makes the field layout exactly recoverable; dumps written
elsewhere may omit it, in which case contiguous field ranges are inferred
from the observed indices. Samples keep file order per user (their
timestamps become line ordinals).
"""

from __future__ import annotations

import numpy as np

from .types import FeatureSpace, UserSamples, make_sample


def save_dump(path, space: FeatureSpace, users) -> None:
    buckets = ",".join(str(b) for b in space.hash_buckets_per_field)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"#fields:{space.num_fields} #features:{space.num_features} #buckets:{buckets}\n")
        for u in users:
            for s in u.samples:
                pairs = ",".join(
                    f"{fd}:{ix}" for fd, ix in zip(s.fld.tolist(), s.idx.tolist())
                )
                f.write(f"{u.user_id}\t{s.label}\t{pairs}\n")


def _parse_header(line: str, path):
    tokens = line.strip().split()
    vals = {}
    for t in tokens:
        if not t.startswith("#") or ":" not in t:
            raise ValueError(f"{path}:1: bad header token {t!r}")
        key, _, raw = t[1:].partition(":")
        vals[key] = raw
    if "fields" not in vals or "features" not in vals:
        raise ValueError(f"{path}:1: header must carry #fields and #features")
    n_fields = int(vals["fields"])
    n_features = int(vals["features"])
    buckets = None
    if "buckets" in vals:
        buckets = tuple(int(b) for b in vals["buckets"].split(","))
        if len(buckets) != n_fields or sum(buckets) != n_features:
            raise ValueError(f"{path}:1: #buckets inconsistent with header counts")
    return n_fields, n_features, buckets


def load_dump(path):
    """Load a canonical dump. Returns (FeatureSpace, list of UserSamples)."""
    with open(path, encoding="utf-8") as f:
        header = f.readline()
        if not header.strip():
            raise ValueError(f"{path}: empty dump")
        n_fields, n_features, buckets = _parse_header(header, path)
        rows = []
        max_idx = np.full(n_fields, -1, dtype=np.int64)
        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated columns")
            uid, label_s, pair_s = parts
            try:
                label = int(label_s)
                pairs = []
                for token in pair_s.split(","):
                    fd_s, _, ix_s = token.partition(":")
                    fd, ix = int(fd_s), int(ix_s)
                    pairs.append((fd, ix))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed sample line") from None
            for fd, ix in pairs:
                if not (0 <= fd < n_fields) or not (0 <= ix < n_features):
                    raise ValueError(f"{path}:{lineno}: field/index out of range")
                max_idx[fd] = max(max_idx[fd], ix)
            rows.append((uid, label, pairs))

    if buckets is None:
        buckets = _infer_buckets(max_idx, n_features)
    space = FeatureSpace(
        field_names=tuple(f"field_{i}" for i in range(n_fields)),
        hash_buckets_per_field=buckets,
    )
    users: dict = {}
    order: list = []
    for uid, label, pairs in rows:
        if uid not in users:
            users[uid] = []
            order.append(uid)
        t = len(users[uid])
        users[uid].append(make_sample(uid, label, pairs, timestamp=t, space=space))
    return space, [UserSamples(user_id=u, samples=users[u]) for u in order]


def _infer_buckets(max_idx: np.ndarray, n_features: int) -> tuple:
    """Without #buckets, assume fields own contiguous ascending ranges and
    cut at each next field's smallest possible start."""
    n_fields = len(max_idx)
    buckets = []
    start = 0
    for fd in range(n_fields):
        if fd + 1 < n_fields:
            nxt = max(max_idx[fd] + 1, start + 1)
            end = max(nxt, start + 1)
        else:
            end = n_features
        if max_idx[fd] >= end:
            raise ValueError("cannot infer field layout from observed indices")
        buckets.append(int(end - start))
        start = end
    return tuple(buckets)
