"""Base CTR predictors: specs, parameter banks, forward, exact gradients,
and pretraining (FTRL for the linear model, Adam for the rest)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data.types import FeatureSpace, PackedBatch, pack_batch
from ..numkit import Rng, logloss_vec, stable_sigmoid
from .kinds import KINDS
from .optim import Adam, FtrlProximal
from .params import ParamBank, ParamSegment, load_bank, save_bank

INIT_SCALE = 0.01

__all__ = [
    "ModelSpec",
    "ParamBank",
    "ParamSegment",
    "init_params",
    "forward",
    "forward_batch",
    "grad_batch",
    "pretrain",
    "PretrainConfig",
    "save_bank",
    "load_bank",
    "Adam",
    "FtrlProximal",
]


@dataclass(frozen=True)
class ModelSpec:
    kind: str                          # lr | fm | ffm | deepfm
    num_fields: int
    latent_dim: int = 10
    hidden_sizes: tuple = (256, 256, 256)
    keep_prob: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "deepfm" and not self.hidden_sizes:
            raise ValueError("deepfm needs at least one hidden layer")
        if not (0.0 < self.keep_prob <= 1.0):
            raise ValueError("keep_prob must be in (0, 1]")

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "num_fields": self.num_fields,
            "latent_dim": self.latent_dim,
            "hidden_sizes": list(self.hidden_sizes),
            "keep_prob": self.keep_prob,
        }


def spec_from_descriptor(d: dict) -> ModelSpec:
    return ModelSpec(
        kind=d["kind"],
        num_fields=d["num_fields"],
        latent_dim=d["latent_dim"],
        hidden_sizes=tuple(d["hidden_sizes"]),
        keep_prob=d["keep_prob"],
    )


def param_layout(spec: ModelSpec, space: FeatureSpace):
    return KINDS[spec.kind].layout(spec, space.num_features)


def init_params(spec: ModelSpec, space: FeatureSpace, rng: Rng) -> ParamBank:
    """Weights and embeddings uniform(-0.01, 0.01), biases 0, drawn in
    segment order so initialisation is reproducible from the seed."""
    bank = ParamBank(param_layout(spec, space))
    for seg in bank.segments:
        if seg.name == "b" or seg.name.startswith("mlp_b"):
            continue
        view = bank.view(seg.name)
        view[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, seg.shape)
    return bank


def forward_batch(spec: ModelSpec, bank: ParamBank, pb: PackedBatch,
                  train: bool = False, rng: Rng | None = None):
    """Predicted probabilities for a packed batch. Returns (p, cache);
    dropout (deepfm only) runs only with train=True and an rng."""
    z, cache = KINDS[spec.kind].forward(bank, spec, pb, train=train, rng=rng)
    return stable_sigmoid(z), cache


def forward(spec: ModelSpec, bank: ParamBank, sample):
    """Single-sample probability, in (0, 1)."""
    pb = pack_batch([sample])
    p, cache = forward_batch(spec, bank, pb)
    return float(p[0]), cache


def grad_batch(spec: ModelSpec, bank: ParamBank, batch,
               upstream_weights=None, train: bool = False, rng: Rng | None = None):
    """Mean clamped log-loss over the batch and its exact gradient w.r.t.
    every bank entry (flat vector; untouched coordinates stay 0).

    upstream_weights, when given, replaces the per-sample dL/dp of the
    standalone log-loss — the mixture path injects lambda_k-scaled loss
    derivatives this way. The returned loss is always the standalone one.
    """
    pb = batch if isinstance(batch, PackedBatch) else pack_batch(batch)
    if pb.n == 0:
        raise ValueError("empty batch")
    p, cache = forward_batch(spec, bank, pb, train=train, rng=rng)
    losses = logloss_vec(p, pb.y)
    mean_loss = float(losses.mean())
    if not np.isfinite(mean_loss):
        raise FloatingPointError("non-finite loss in grad_batch")
    if upstream_weights is None:
        dz = (p - pb.y) / pb.n
    else:
        up = np.asarray(upstream_weights, dtype=np.float64)
        if up.shape != (pb.n,):
            raise ValueError("upstream_weights must have one entry per sample")
        dz = up * p * (1.0 - p) / pb.n
    grad = bank.zeros_like()
    KINDS[spec.kind].backward(bank, grad, spec, pb, cache, dz)
    return mean_loss, grad.flat


@dataclass
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 1000
    adam_lr: float = 1e-3
    ftrl_alpha: float = 0.1
    ftrl_beta: float = 1.0
    ftrl_l1: float = 1e-5
    ftrl_l2: float = 1e-5


def pretrain(specs, banks, train_samples, config: PretrainConfig, rng: Rng):
    """Train every bank on the pooled sample stream.

    The linear model runs FTRL-Proximal; everything else runs Adam. One
    shared shuffle order per epoch (drawn from ``rng``) feeds all models, so
    results do not depend on how many models train together. Mutates and
    returns ``banks``. Raises on divergence (non-finite loss).
    """
    if config.epochs == 0:
        return banks
    samples = list(train_samples)
    if not samples:
        raise ValueError("pretrain: empty training stream")
    states = []
    for spec, bank in zip(specs, banks):
        if spec.kind == "lr":
            states.append(FtrlProximal(len(bank), config.ftrl_alpha,
                                       config.ftrl_beta, config.ftrl_l1,
                                       config.ftrl_l2))
        else:
            states.append(Adam(len(bank), lr=config.adam_lr))
    shuffle_rng = rng.child("pretrain:shuffle")
    dropout_rng = rng.child("pretrain:dropout")
    order = np.arange(len(samples))
    for epoch in range(config.epochs):
        shuffle_rng.shuffle(order)
        for start in range(0, len(samples), config.batch_size):
            chunk = [samples[i] for i in order[start : start + config.batch_size]]
            pb = pack_batch(chunk)
            for spec, bank, state in zip(specs, banks, states):
                train = spec.kind == "deepfm" and spec.keep_prob < 1.0
                loss, grad = grad_batch(spec, bank, pb, train=train, rng=dropout_rng)
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"pretrain diverged: {spec.kind} loss is not finite "
                        f"(epoch {epoch})"
                    )
                if isinstance(state, FtrlProximal):
                    active = np.unique(np.concatenate([pb.idx.ravel(),
                                                       [len(bank) - 1]]))
                    state.update(active, grad[active])
                    state.materialize(bank.flat)
                else:
                    state.step(bank.flat, grad)
    return banks
