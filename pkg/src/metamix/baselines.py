"""Competitor selectors: perfect oracles and trained MLP level selectors.

The oracles pick the truly best model per sample or per user from the test
labels - upper bounds, not methods. The trained selectors classify the
best-model index from meta-features (the K base-model predictions alone) and
mix base predictions with the predicted distribution: per sample at sample
granularity, with a per-user averaged distribution at user granularity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .models import ParamBank
from .models.nets import mlp_backward, mlp_forward, mlp_layout, mlp_views
from .models.optim import Adam
from .numkit import Rng, logloss_vec, softmax

log = logging.getLogger(__name__)

GRANULARITIES = ("sample", "user")


@dataclass
class OracleAssignment:
    granularity: str
    choice: dict                     # sample ordinal or user id -> model index


def _check_inputs(preds: np.ndarray, labels: np.ndarray, user_ids) -> None:
    if preds.ndim != 2:
        raise ValueError("predictions must be (n_samples, K)")
    if np.any(~np.isfinite(preds)):
        raise ValueError("missing/non-finite prediction")
    if preds.shape[0] != len(labels) or len(labels) != len(user_ids):
        raise ValueError("predictions, labels and user ids must align")


def perfect_selector(granularity: str, preds, labels, user_ids):
    """Oracle assignment and the resulting per-sample predictions.

    Sample granularity picks the model with minimal clamped log-loss per
    sample; user granularity picks, per user, the model with minimal mean
    log-loss over that user's samples. Ties break toward the lowest index.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    user_ids = np.asarray(user_ids)
    _check_inputs(preds, labels, user_ids)
    n, k = preds.shape
    losses = np.column_stack([logloss_vec(preds[:, j], labels) for j in range(k)])
    choice: dict = {}
    chosen = np.empty(n, dtype=np.float64)
    if granularity == "sample":
        best = np.argmin(losses, axis=1)
        for i in range(n):
            choice[i] = int(best[i])
        chosen = preds[np.arange(n), best]
    else:
        for uid in sorted(set(user_ids.tolist())):
            mask = user_ids == uid
            best = int(np.argmin(losses[mask].mean(axis=0)))
            choice[uid] = best
            chosen[mask] = preds[mask, best]
    return OracleAssignment(granularity=granularity, choice=choice), chosen


@dataclass
class MetaFeatureRow:
    user_id: str
    sample_id: int
    preds: np.ndarray                # K base-model predictions
    label: int
    best: int                        # argmin_k logloss_k, ties to lowest k

    def __post_init__(self):
        losses = logloss_vec(self.preds, np.full(len(self.preds), self.label))
        if int(np.argmin(losses)) != self.best:
            raise ValueError("class label inconsistent with stored predictions")


def build_meta_feature_rows(preds, labels, user_ids):
    """Rows of (predictions, label, per-sample best class)."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    user_ids = np.asarray(user_ids)
    _check_inputs(preds, labels, user_ids)
    rows = []
    k = preds.shape[1]
    for i in range(len(labels)):
        losses = logloss_vec(preds[i], np.full(k, labels[i]))
        rows.append(MetaFeatureRow(
            user_id=str(user_ids[i]),
            sample_id=i,
            preds=preds[i].copy(),
            label=int(labels[i]),
            best=int(np.argmin(losses)),
        ))
    return rows


def dump_meta_features(path, rows) -> None:
    k = len(rows[0].preds) if rows else 0
    header = "user_id,sample_id," + ",".join(f"p{j + 1}" for j in range(k)) + ",label,class"
    with open(path, "w", encoding="utf-8") as f:
        f.write(header + "\n")
        for r in rows:
            ps = ",".join(f"{p:.10g}" for p in r.preds)
            f.write(f"{r.user_id},{r.sample_id},{ps},{r.label},{r.best}\n")


@dataclass
class LevelSelectorConfig:
    hidden: tuple = (400, 400, 400)
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0


class LevelSelector:
    """MLP classifier over the K prediction values, softmax output of
    width K, trained with cross-entropy on best-model labels."""

    def __init__(self, granularity: str, k: int, config: LevelSelectorConfig):
        if granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        self.granularity = granularity
        self.k = k
        self.config = config
        rng = Rng(config.seed).child(f"level:{granularity}:init")
        self.bank = ParamBank(mlp_layout("mlp_", k, config.hidden, k))
        for seg in self.bank.segments:
            if not seg.name.startswith("mlp_b"):
                self.bank.view(seg.name)[...] = rng.uniform(-0.1, 0.1, seg.shape)
        self.n_layers = len(config.hidden) + 1

    def _classes_for_rows(self, rows) -> np.ndarray:
        if self.granularity == "sample":
            return np.array([r.best for r in rows], dtype=np.int64)
        # user level: the label is the user's best model by mean log-loss
        per_user: dict = {}
        for r in rows:
            per_user.setdefault(r.user_id, []).append(r)
        best_of: dict = {}
        for uid, urows in per_user.items():
            losses = np.zeros(self.k)
            for r in urows:
                losses += logloss_vec(r.preds, np.full(self.k, r.label))
            best_of[uid] = int(np.argmin(losses))
        return np.array([best_of[r.user_id] for r in rows], dtype=np.int64)

    def fit(self, rows) -> "LevelSelector":
        x = np.stack([r.preds for r in rows])
        y = self._classes_for_rows(rows)
        missing = sorted(set(range(self.k)) - set(y.tolist()))
        if missing:
            log.warning("level selector (%s): classes %s absent from training labels",
                        self.granularity, missing)
        rng = Rng(self.config.seed).child(f"level:{self.granularity}:shuffle")
        adam = Adam(len(self.bank), lr=self.config.lr)
        order = np.arange(len(rows))
        layers = mlp_views(self.bank, "mlp_", self.n_layers)
        for _epoch in range(self.config.epochs):
            rng.shuffle(order)
            for s in range(0, len(order), self.config.batch_size):
                sel = order[s : s + self.config.batch_size]
                logits, cache = mlp_forward(layers, x[sel])
                probs = softmax(logits)
                dlogits = probs.copy()
                dlogits[np.arange(len(sel)), y[sel]] -= 1.0
                dlogits /= len(sel)
                _dx, grads = mlp_backward(layers, cache, dlogits)
                gflat = self.bank.zeros_like()
                for i, (dw, db) in enumerate(grads):
                    gflat.view(f"mlp_W{i}")[...] = dw
                    gflat.view(f"mlp_b{i}")[...] = db
                adam.step(self.bank.flat, gflat.flat)
        return self

    def distributions(self, preds: np.ndarray) -> np.ndarray:
        layers = mlp_views(self.bank, "mlp_", self.n_layers)
        logits, _ = mlp_forward(layers, np.asarray(preds, dtype=np.float64))
        return softmax(logits)

    def predict(self, preds, user_ids=None) -> np.ndarray:
        """Weighted-average predictions on test rows.

        Sample level weighs each row by its own distribution; user level
        averages the distributions over a user's rows first, then applies
        the single user-level distribution to every row of that user.
        """
        preds = np.asarray(preds, dtype=np.float64)
        dist = self.distributions(preds)
        if self.granularity == "sample":
            return (dist * preds).sum(axis=1)
        if user_ids is None:
            raise ValueError("user-level prediction needs user ids")
        user_ids = np.asarray(user_ids)
        out = np.empty(len(preds))
        for uid in sorted(set(user_ids.tolist())):
            mask = user_ids == uid
            lam = dist[mask].mean(axis=0)
            out[mask] = preds[mask] @ lam
        return out
