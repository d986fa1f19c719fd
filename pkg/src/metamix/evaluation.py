"""Metrics and delimited reporting: AUC, log-loss, relative AUC improvement,
per-user loss exports and best-model proportion tables.

Everything here writes CSV only; figure rendering lives in figures.py and is
driven by the CLI report path.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .numkit import logloss_vec

__all__ = [
    "EvalRecord",
    "auc",
    "relaimpr",
    "evaluate_predictions",
    "per_user_loss_export",
    "best_model_proportions",
    "write_table_report",
]


@dataclass
class EvalRecord:
    scope: str                      # "global" or a user id
    auc: Optional[float]            # None when only one class is present
    mean_logloss: float
    n_samples: int
    n_pos: int


def auc(scores, labels) -> Optional[float]:
    """Rank-based (Mann-Whitney) AUC with average ranks for ties.

    Equals P(score_pos > score_neg) + 0.5 * P(tie). Returns None when only
    one class is present: the statistic is undefined there, never a number.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0   # average 1-based rank
        i = j + 1
    sum_pos = float(ranks[y == 1].sum())
    return (sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def relaimpr(auc_measured: float, auc_base: float) -> float:
    """Relative AUC improvement in percent over a base model,
    ((auc - 0.5) / (auc_base - 0.5) - 1) * 100."""
    if auc_base <= 0.5:
        raise ValueError("relaimpr undefined for base AUC <= 0.5")
    return ((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


def evaluate_predictions(scores, labels, user_ids):
    """Global and per-user records for one method's predictions."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    uids = np.asarray(user_ids)
    glob = EvalRecord(
        scope="global",
        auc=auc(s, y),
        mean_logloss=float(logloss_vec(s, y).mean()),
        n_samples=len(y),
        n_pos=int((y == 1).sum()),
    )
    per_user = []
    for uid in sorted(set(uids.tolist())):
        mask = uids == uid
        per_user.append(EvalRecord(
            scope=str(uid),
            auc=auc(s[mask], y[mask]),
            mean_logloss=float(logloss_vec(s[mask], y[mask]).mean()),
            n_samples=int(mask.sum()),
            n_pos=int((y[mask] == 1).sum()),
        ))
    return glob, per_user


def per_user_loss_export(path, records_by_method: dict) -> None:
    """CSV of per-user mean log-losses plus one summary row per method.

    Data rows: method,user_id,mean_logloss, . Summary rows use user_id
    "__all__" and carry the mean and (population) variance of the per-user
    losses, the spread the loss-distribution comparison is about.
    """
    with open(path, "w", encoding="utf-8") as f:
        f.write("method,user_id,mean_logloss,variance\n")
        for method, records in records_by_method.items():
            for r in records:
                f.write(f"{method},{r.scope},{r.mean_logloss:.10g},\n")
        for method, records in records_by_method.items():
            losses = np.array([r.mean_logloss for r in records])
            f.write(f"{method},__all__,{losses.mean():.10g},{losses.var():.10g}\n")


def best_model_proportions(per_user_model_losses: dict, model_names) -> dict:
    """Fraction of users whose lowest mean log-loss each model achieves.

    ``per_user_model_losses`` maps user_id -> sequence of K losses. Ties go
    to the lowest model index. Returns exact Fractions keyed by model name;
    they sum to 1 by construction.
    """
    counts = [0] * len(model_names)
    for _uid, losses in sorted(per_user_model_losses.items()):
        counts[int(np.argmin(losses))] += 1
    total = sum(counts)
    if total == 0:
        raise ValueError("no users to tabulate")
    return {name: Fraction(c, total) for name, c in zip(model_names, counts)}


def write_proportions_csv(path, proportions: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("model,user_proportion_pct\n")
        for name, frac in proportions.items():
            f.write(f"{name},{float(frac) * 100:.2f}\n")


def write_table_report(path, rows, base_method: str) -> None:
    """Method-per-row report: auc, logloss, relaimpr vs the named single
    model. The relaimpr column is recomputed from the written AUC column and
    must agree at the printed precision (self-consistency guard).
    """
    by_name = {name: rec for name, rec in rows}
    base = by_name[base_method]
    if base.auc is None:
        raise ValueError("base method AUC undefined")
    base_printed = round(base.auc, 4)
    lines = ["method,auc,logloss,relaimpr_vs_best_single_pct"]
    for name, rec in rows:
        if rec.auc is None:
            lines.append(f"{name},,{rec.mean_logloss:.5f},")
            continue
        # relaimpr is taken from the printed AUCs so the column is exactly
        # recomputable from the table itself
        auc_printed = round(rec.auc, 4)
        ri_printed = f"{relaimpr(auc_printed, base_printed):.2f}"
        recomputed = relaimpr(float(f"{auc_printed:.4f}"), base_printed)
        if abs(recomputed - float(ri_printed)) > 0.005 + 1e-12:
            raise AssertionError(
                f"report self-consistency: {name} relaimpr {ri_printed} vs "
                f"recomputed {recomputed:.2f}"
            )
        lines.append(f"{name},{auc_printed:.4f},{rec.mean_logloss:.5f},{ri_printed}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
