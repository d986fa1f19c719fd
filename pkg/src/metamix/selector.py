"""Model-selection network: per-sample distribution over the base models.

The selector embeds each field of a sample (mean-pooled for multi-valued
fields), feeds the concatenation through a ReLU MLP, and softmaxes K output
logits into lambda. The mixture prediction is the convex combination
sum_k lambda_k * p_k, and grad_mixture_batch backpropagates the mixture
log-loss jointly into all base-model banks and the selector bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data.types import FeatureSpace, PackedBatch, pack_batch
from .models import ModelSpec, ParamBank, forward_batch
from .models.kinds import KINDS
from .models.nets import mlp_backward, mlp_forward, mlp_layout, mlp_views
from .numkit import EPS, Rng, logloss_vec, softmax

INIT_SCALE = 0.01

__all__ = [
    "SelectorSpec",
    "init_selector",
    "select",
    "select_batch",
    "mix",
    "mixture_forward_batch",
    "grad_mixture_batch",
]


@dataclass(frozen=True)
class SelectorSpec:
    num_models: int                    # K
    num_fields: int
    embed_dim: int = 16
    hidden_sizes: tuple = (200, 200, 200)

    def __post_init__(self):
        if self.num_models < 1:
            raise ValueError("need at least one base model")
        if not self.hidden_sizes:
            raise ValueError("selector MLP needs at least one hidden layer")

    def descriptor(self) -> dict:
        return {
            "num_models": self.num_models,
            "num_fields": self.num_fields,
            "embed_dim": self.embed_dim,
            "hidden_sizes": list(self.hidden_sizes),
        }


def selector_spec_from_descriptor(d: dict) -> SelectorSpec:
    return SelectorSpec(
        num_models=d["num_models"],
        num_fields=d["num_fields"],
        embed_dim=d["embed_dim"],
        hidden_sizes=tuple(d["hidden_sizes"]),
    )


def selector_layout(spec: SelectorSpec, space: FeatureSpace):
    layout = [("E", (space.num_features, spec.embed_dim))]
    layout += mlp_layout("mlp_", spec.num_fields * spec.embed_dim,
                         spec.hidden_sizes, spec.num_models)
    return layout


def init_selector(spec: SelectorSpec, space: FeatureSpace, rng: Rng) -> ParamBank:
    bank = ParamBank(selector_layout(spec, space))
    for seg in bank.segments:
        if seg.name.startswith("mlp_b"):
            continue
        bank.view(seg.name)[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, seg.shape)
    return bank


def _n_layers(spec: SelectorSpec) -> int:
    return len(spec.hidden_sizes) + 1


def select_batch(spec: SelectorSpec, bank: ParamBank, pb: PackedBatch):
    """Per-sample distributions over base models. Returns (lam (B,K), cache)."""
    eg = bank.view("E")[pb.idx] * pb.val[:, :, None]          # (B, A, e)
    e = np.zeros((pb.n, spec.num_fields, spec.embed_dim))
    np.add.at(e, (np.arange(pb.n)[:, None], pb.fld), eg)
    x = e.reshape(pb.n, -1)
    layers = mlp_views(bank, "mlp_", _n_layers(spec))
    logits, mlp_cache = mlp_forward(layers, x)
    lam = softmax(logits)
    return lam, (x, mlp_cache, lam)


def select(spec: SelectorSpec, bank: ParamBank, sample):
    """Distribution over base models for one sample (on the open simplex)."""
    pb = pack_batch([sample])
    lam, cache = select_batch(spec, bank, pb)
    return lam[0], cache


def _selector_backward(spec: SelectorSpec, bank: ParamBank, grad: ParamBank,
                       pb: PackedBatch, cache, dlam: np.ndarray) -> None:
    """Backprop dL/dlambda through softmax, MLP and embedding table."""
    _x, mlp_cache, lam = cache
    inner = (dlam * lam).sum(axis=1, keepdims=True)
    dlogits = lam * (dlam - inner)
    layers = mlp_views(bank, "mlp_", _n_layers(spec))
    dx, mlp_grads = mlp_backward(layers, mlp_cache, dlogits)
    for i, (dw, db) in enumerate(mlp_grads):
        grad.view(f"mlp_W{i}")[...] += dw
        grad.view(f"mlp_b{i}")[...] += db
    de = dx.reshape(pb.n, spec.num_fields, spec.embed_dim)
    rows = np.arange(pb.n)[:, None]
    deg = de[rows, pb.fld] * pb.val[:, :, None]
    np.add.at(grad.view("E"), pb.idx.ravel(), deg.reshape(-1, spec.embed_dim))


def mix(lam, base_probs) -> float:
    """Convex combination of base probabilities, re-clamped to [EPS, 1-EPS]."""
    lam = np.asarray(lam, dtype=np.float64)
    p = np.asarray(base_probs, dtype=np.float64)
    if lam.shape != p.shape:
        raise ValueError("lambda and base probabilities differ in length")
    return float(np.clip(lam @ p, EPS, 1.0 - EPS))


def mixture_forward_batch(sel_spec, sel_bank, model_specs, model_banks, pb: PackedBatch):
    """Mixture probabilities for a batch.

    Returns (p_mix (B,), lam (B,K), base_p (B,K), caches) with caches reusable
    by the joint backward.
    """
    lam, sel_cache = select_batch(sel_spec, sel_bank, pb)
    base_p = np.empty((pb.n, len(model_specs)))
    model_caches = []
    for k, (spec, bank) in enumerate(zip(model_specs, model_banks)):
        p_k, cache_k = forward_batch(spec, bank, pb)
        base_p[:, k] = p_k
        model_caches.append(cache_k)
    p_mix = np.clip((lam * base_p).sum(axis=1), EPS, 1.0 - EPS)
    return p_mix, lam, base_p, (sel_cache, model_caches)


def grad_mixture_batch(sel_spec, sel_bank, model_specs, model_banks, batch):
    """Mean mixture log-loss and its exact joint gradient.

    Returns (mean_loss, model_grads, selector_grad) where model_grads is a
    list of flat vectors (one per bank) and selector_grad a flat vector.
    dL/dp reaches base model k scaled by lambda_k; dL/dlambda_k = dL/dp * p_k
    flows through the softmax into the selector.
    """
    pb = batch if isinstance(batch, PackedBatch) else pack_batch(batch)
    if pb.n == 0:
        raise ValueError("empty batch")
    p_mix, lam, base_p, (sel_cache, model_caches) = mixture_forward_batch(
        sel_spec, sel_bank, model_specs, model_banks, pb
    )
    losses = logloss_vec(p_mix, pb.y)
    mean_loss = float(losses.mean())
    if not np.isfinite(mean_loss):
        raise FloatingPointError("non-finite mixture loss")
    # d logloss / dp at the mixture output
    dp = (p_mix - pb.y) / (p_mix * (1.0 - p_mix))
    model_grads = []
    for k, (spec, bank) in enumerate(zip(model_specs, model_banks)):
        dz_k = dp * lam[:, k] * base_p[:, k] * (1.0 - base_p[:, k]) / pb.n
        grad_k = bank.zeros_like()
        KINDS[spec.kind].backward(bank, grad_k, spec, pb, model_caches[k], dz_k)
        model_grads.append(grad_k.flat)
    dlam = dp[:, None] * base_p / pb.n
    sel_grad = sel_bank.zeros_like()
    _selector_backward(sel_spec, sel_bank, sel_grad, pb, sel_cache, dlam)
    return mean_loss, model_grads, sel_grad.flat
