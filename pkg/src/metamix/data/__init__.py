from .types import (
    FeatureSpace,
    Sample,
    UserSamples,
    UserDataset,
    PackedBatch,
    make_sample,
    pack_batch,
)
from .splits import split_user, split_users, write_exclusion_report, Exclusion
from .movielens import load_movielens, IngestStats
from .synthetic import SyntheticSpec, SyntheticData, generate_synthetic
from .dump import save_dump, load_dump

__all__ = [
    "FeatureSpace",
    "Sample",
    "UserSamples",
    "UserDataset",
    "PackedBatch",
    "make_sample",
    "pack_batch",
    "split_user",
    "split_users",
    "write_exclusion_report",
    "Exclusion",
    "load_movielens",
    "IngestStats",
    "SyntheticSpec",
    "SyntheticData",
    "generate_synthetic",
    "save_dump",
    "load_dump",
]
