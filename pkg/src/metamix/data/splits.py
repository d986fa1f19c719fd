"""Per-user chronological splits into train/test and support/query."""

from __future__ import annotations

from dataclasses import dataclass

from .types import Sample, UserDataset, UserSamples

MIN_SAMPLES_PER_USER = 8


@dataclass(frozen=True)
class Exclusion:
    user_id: str
    n_samples: int
    reason: str


def _cut(n: int, frac: float) -> int:
    """Floor split point, forced so both parts stay nonempty."""
    k = int(n * frac)
    return min(max(k, 1), n - 1)


def split_user(
    user: UserSamples,
    train_frac: float = 0.8,
    support_frac: float = 0.75,
    rng=None,
) -> UserDataset:
    """Chronological split: earliest train_frac of a user's events become
    train, the rest test; within train, the earliest support_frac become
    support, the rest query. ``rng`` is unused for chronological splits and
    accepted for interface stability.
    """
    samples = sorted(
        user.samples,
        key=lambda s: (s.timestamp if s.timestamp is not None else 0),
    )
    n = len(samples)
    if n < MIN_SAMPLES_PER_USER:
        raise ValueError(
            f"user {user.user_id} has {n} samples; minimum is {MIN_SAMPLES_PER_USER}"
        )
    n_train = _cut(n, train_frac)
    train, test = samples[:n_train], samples[n_train:]
    n_support = _cut(n_train, support_frac)
    support, query = train[:n_support], train[n_support:]
    return UserDataset(
        user_id=user.user_id, train=train, test=test, support=support, query=query
    )


def split_users(
    users,
    train_frac: float = 0.8,
    support_frac: float = 0.75,
    min_samples: int = MIN_SAMPLES_PER_USER,
):
    """Split every admissible user; users with too few samples are dropped
    and reported. Returns (datasets, exclusions)."""
    datasets, exclusions = [], []
    for u in users:
        if len(u.samples) < min_samples:
            exclusions.append(
                Exclusion(u.user_id, len(u.samples), f"fewer than {min_samples} samples")
            )
            continue
        datasets.append(split_user(u, train_frac, support_frac))
    return datasets, exclusions


def write_exclusion_report(path, exclusions) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("user_id,n_samples,reason\n")
        for e in exclusions:
            f.write(f"{e.user_id},{e.n_samples},{e.reason}\n")
