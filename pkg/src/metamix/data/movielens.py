"""MovieLens-1m ingestion into fielded sparse features.

Fields, in order: user_id, age, gender, occupation, user_history_genre,
user_history_movie, movie_id, movie_genre, day_of_week, season. Ratings of
4 or 5 stars are labelled positive. History fields look back at the 5 most
recent positively rated movies strictly before the current event; a user's
first events fall into a dedicated empty-history bucket.

user_id / movie_id / user_history_movie get identity buckets sized to the
vocabularies found in users.dat / movies.dat; derived categorical fields get
power-of-two bucket tables with identity slots for the known vocabulary and
a crc32 hash as the guard for unseen values.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .types import FeatureSpace, Sample, UserSamples, make_sample

HISTORY_LEN = 5

FIELD_NAMES = (
    "user_id",
    "age",
    "gender",
    "occupation",
    "user_history_genre",
    "user_history_movie",
    "movie_id",
    "movie_genre",
    "day_of_week",
    "season",
)

AGES = ("1", "18", "25", "35", "45", "50", "56")
GENDERS = ("M", "F")
OCCUPATIONS = tuple(str(i) for i in range(21))
GENRES = (
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical",
    "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)


class MalformedLine(ValueError):
    def __init__(self, path, lineno, line):
        super().__init__(f"{path}:{lineno}: malformed record: {line!r}")


def _hash_bucket(value: str, buckets: int) -> int:
    return zlib.crc32(value.encode("utf-8")) % buckets


@dataclass
class _Vocab:
    """Identity table over a known vocabulary; unseen values hash into the
    same bucket range (the guard the power-of-two sizing exists for)."""

    values: tuple
    buckets: int

    def __post_init__(self):
        if len(self.values) > self.buckets:
            raise ValueError("vocabulary larger than bucket table")
        self.index = {v: i for i, v in enumerate(self.values)}

    def bucket(self, value: str) -> int:
        got = self.index.get(value)
        return got if got is not None else _hash_bucket(value, self.buckets)


def _parse_file(path, n_fields: int, encoding="latin-1"):
    with open(path, encoding=encoding) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != n_fields:
                raise MalformedLine(path, lineno, line)
            yield lineno, parts


@dataclass
class IngestStats:
    n_users: int = 0
    n_items: int = 0
    n_samples: int = 0
    n_features: int = 0
    skipped_unknown_movie: int = 0


def load_movielens(path_ratings, path_users, path_movies):
    """Ingest the "::"-delimited MovieLens-1m files.

    Returns (FeatureSpace, list of per-user chronological sample pools,
    IngestStats). Ratings against movie ids absent from movies.dat are
    skipped and counted.
    """
    users = {}
    for lineno, parts in _parse_file(path_users, 5):
        uid, gender, age, occupation, _zip = parts
        users[uid] = (gender, age, occupation)

    movie_genres = {}
    for lineno, parts in _parse_file(path_movies, 3):
        mid, _title, genres = parts
        movie_genres[mid] = tuple(genres.split("|"))

    user_vocab = sorted(users, key=int)
    movie_vocab = sorted(movie_genres, key=int)
    user_slot = {u: i for i, u in enumerate(user_vocab)}
    movie_slot = {m: i for i, m in enumerate(movie_vocab)}

    age_tab = _Vocab(AGES, 8)
    gender_tab = _Vocab(GENDERS, 2)
    occ_tab = _Vocab(OCCUPATIONS, 32)
    genre_tab = _Vocab(GENRES, 32)   # bucket 31 doubles as empty-history

    n_movies = len(movie_vocab)
    space = FeatureSpace(
        field_names=FIELD_NAMES,
        hash_buckets_per_field=(
            len(user_vocab),  # user_id
            8,                # age
            2,                # gender
            32,               # occupation
            32,               # user_history_genre (31 = empty history)
            n_movies + 1,     # user_history_movie (last = empty history)
            n_movies,         # movie_id
            32,               # movie_genre
            8,                # day_of_week
            4,                # season
        ),
    )
    empty_genre_bucket = 31
    empty_movie_bucket = n_movies

    ratings = {}  # uid -> list of (timestamp, order, mid, rating)
    stats = IngestStats(n_users=len(user_vocab), n_items=n_movies)
    for lineno, parts in _parse_file(path_ratings, 4):
        uid, mid, rating, ts = parts
        try:
            rating_v = int(rating)
            ts_v = int(ts)
        except ValueError:
            raise MalformedLine(path_ratings, lineno, "::".join(parts))
        if mid not in movie_slot:
            stats.skipped_unknown_movie += 1
            continue
        if uid not in user_slot:
            raise MalformedLine(path_ratings, lineno, f"unknown user id {uid}")
        ratings.setdefault(uid, []).append((ts_v, lineno, mid, rating_v))

    pools = []
    for uid in user_vocab:
        events = ratings.get(uid)
        if not events:
            continue
        events.sort(key=lambda e: (e[0], e[1]))
        gender, age, occupation = users[uid]
        static = [
            (0, user_slot[uid]),
            (1, age_tab.bucket(age)),
            (2, gender_tab.bucket(gender)),
            (3, occ_tab.bucket(occupation)),
        ]
        history = []  # positively rated movie ids, oldest first
        samples = []
        for ts_v, _lineno, mid, rating_v in events:
            label = 1 if rating_v >= 4 else 0
            recent = history[-HISTORY_LEN:]
            pairs = list(static)
            if recent:
                seen = sorted({g for m in recent for g in movie_genres[m]})
                pairs += [(4, genre_tab.bucket(g)) for g in seen]
                pairs += [(5, movie_slot[m]) for m in sorted(set(recent), key=int)]
            else:
                pairs.append((4, empty_genre_bucket))
                pairs.append((5, empty_movie_bucket))
            pairs.append((6, movie_slot[mid]))
            pairs += [(7, genre_tab.bucket(g)) for g in movie_genres[mid]]
            dt = datetime.fromtimestamp(ts_v, tz=timezone.utc)
            pairs.append((8, dt.weekday()))
            pairs.append((9, (dt.month - 1) // 3))
            gl = [(f, space.global_index(f, b)) for f, b in pairs]
            samples.append(make_sample(uid, label, gl, timestamp=ts_v, space=space))
            if label == 1:
                history.append(mid)
        pools.append(UserSamples(user_id=uid, samples=samples))

    stats.n_samples = sum(len(p.samples) for p in pools)
    stats.n_features = space.num_features
    return space, pools, stats
