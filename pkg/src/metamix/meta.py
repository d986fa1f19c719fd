"""Episodic meta-training of the base models and the selector.

One inner gradient step with a per-parameter rate vector alpha adapts the
joint parameters (theta, phi) to a user's support set; the query loss at the
adapted parameters drives the outer update of the initialization, of alpha
(its gradient is exactly -g_support o g_query', no second-order terms
needed), and - in exact mode - of the initialization through a
Hessian-vector product taken by central differences of the support gradient.

The simplified variant freezes every base-model bank: their alpha entries
are pinned to 0 and their outer updates masked, so only the selector learns
and adapts.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.types import PackedBatch, pack_batch
from .models import (
    ModelSpec,
    ParamBank,
    load_bank,
    save_bank,
    spec_from_descriptor,
)
from .models.optim import Adam
from .numkit import EPS, Rng
from .selector import (
    SelectorSpec,
    grad_mixture_batch,
    mixture_forward_batch,
    selector_spec_from_descriptor,
)

ALPHA_MAX = 1.0
HVP_EPS_BASE = 1e-4

MODES = ("first_order", "exact_hvp")
VARIANTS = ("full", "simplified")


@dataclass
class MetaState:
    model_specs: list
    theta: list                       # list of ParamBank
    selector_spec: SelectorSpec
    phi: ParamBank
    alpha: np.ndarray                 # per-parameter inner rates over (theta, phi)
    beta: float
    mode: str = "exact_hvp"
    variant: str = "full"
    alpha_learned: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.beta <= 0:
            raise ValueError("outer rate beta must be positive")
        if self.alpha.shape != (self.total_len,):
            raise ValueError("alpha length must match (theta, phi) concatenated")
        if np.any(self.alpha < 0):
            raise ValueError("alpha must be nonnegative")
        if self.variant == "simplified":
            self.alpha[: self.phi_offset] = 0.0

    @property
    def lengths(self):
        return [len(b) for b in self.theta] + [len(self.phi)]

    @property
    def phi_offset(self) -> int:
        return sum(len(b) for b in self.theta)

    @property
    def total_len(self) -> int:
        return self.phi_offset + len(self.phi)

    def concat(self) -> np.ndarray:
        return np.concatenate([b.flat for b in self.theta] + [self.phi.flat])

    def unpack(self, w: np.ndarray):
        """Split a flat vector into fresh banks shaped like (theta, phi)."""
        banks = []
        off = 0
        for b in self.theta:
            banks.append(ParamBank(b.layout(), w[off : off + len(b)].copy()))
            off += len(b)
        phi = ParamBank(self.phi.layout(), w[off:].copy())
        return banks, phi

    def set_from(self, w: np.ndarray) -> None:
        off = 0
        for b in self.theta:
            b.flat[:] = w[off : off + len(b)]
            off += len(b)
        self.phi.flat[:] = w[off:]

    def copy(self) -> "MetaState":
        return MetaState(
            model_specs=list(self.model_specs),
            theta=[b.copy() for b in self.theta],
            selector_spec=self.selector_spec,
            phi=self.phi.copy(),
            alpha=self.alpha.copy(),
            beta=self.beta,
            mode=self.mode,
            variant=self.variant,
            alpha_learned=self.alpha_learned,
        )


def make_meta_state(model_specs, theta, selector_spec, phi, alpha_init: float,
                    beta: float | None = None, mode: str = "exact_hvp",
                    variant: str = "full", alpha_learned: bool = True) -> MetaState:
    """Broadcast a scalar initial inner rate over every parameter; the outer
    rate defaults to a tenth of it."""
    total = sum(len(b) for b in theta) + len(phi)
    alpha = np.full(total, float(alpha_init))
    return MetaState(
        model_specs=list(model_specs),
        theta=[b.copy() for b in theta],
        selector_spec=selector_spec,
        phi=phi.copy(),
        alpha=alpha,
        beta=float(beta) if beta is not None else float(alpha_init) / 10.0,
        mode=mode,
        variant=variant,
        alpha_learned=alpha_learned,
    )


@dataclass
class AdaptedParams:
    theta_u: list
    phi_u: ParamBank
    g_support: np.ndarray
    support_loss: float


def _joint_grad(state: MetaState, theta, phi, pb: PackedBatch):
    loss, model_grads, sel_grad = grad_mixture_batch(
        state.selector_spec, phi, state.model_specs, theta, pb
    )
    return loss, np.concatenate(model_grads + [sel_grad])


def _effective_alpha(state: MetaState) -> np.ndarray:
    if state.variant == "simplified":
        a = state.alpha.copy()
        a[: state.phi_offset] = 0.0
        return a
    return state.alpha


def inner_adapt(state: MetaState, support) -> AdaptedParams:
    """One Hadamard-rate gradient step on the support set."""
    pb = support if isinstance(support, PackedBatch) else pack_batch(support)
    loss, g = _joint_grad(state, state.theta, state.phi, pb)
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        raise FloatingPointError("inner_adapt: non-finite support loss/gradient")
    w_u = state.concat() - _effective_alpha(state) * g
    theta_u, phi_u = state.unpack(w_u)
    return AdaptedParams(theta_u=theta_u, phi_u=phi_u, g_support=g, support_loss=loss)


@dataclass
class MetaGradient:
    query_loss: float
    support_loss: float
    d_w: np.ndarray
    d_alpha: np.ndarray


def meta_gradient(state: MetaState, user) -> MetaGradient:
    """Meta-gradient of one user's post-adaptation query loss.

    d_alpha = -g_S o g_Q' exactly in both modes. In exact mode the
    initialization gradient carries the second-order correction
    g_Q' - H_S (alpha o g_Q'), with the HVP from central differences of the
    support gradient.
    """
    support_pb = user.packed("support")
    query_pb = user.packed("query")
    alpha_eff = _effective_alpha(state)

    support_loss, g_s = _joint_grad(state, state.theta, state.phi, support_pb)
    if not np.all(np.isfinite(g_s)):
        raise FloatingPointError(f"meta_gradient: user {user.user_id}: support gradient not finite")
    w0 = state.concat()
    theta_u, phi_u = state.unpack(w0 - alpha_eff * g_s)

    query_loss, g_q = _joint_grad(state, theta_u, phi_u, query_pb)
    if not np.all(np.isfinite(g_q)):
        raise FloatingPointError(f"meta_gradient: user {user.user_id}: query gradient not finite")

    d_alpha = -g_s * g_q
    if state.mode == "exact_hvp":
        v = alpha_eff * g_q
        v_norm = float(np.linalg.norm(v))
        eps = HVP_EPS_BASE / max(1.0, v_norm)
        tp, pp = state.unpack(w0 + eps * v)
        _, g_plus = _joint_grad(state, tp, pp, support_pb)
        tm, pm = state.unpack(w0 - eps * v)
        _, g_minus = _joint_grad(state, tm, pm, support_pb)
        hv = (g_plus - g_minus) / (2.0 * eps)
        d_w = g_q - hv
    else:
        d_w = g_q.copy()
    if state.variant == "simplified":
        cut = state.phi_offset
        d_w[:cut] = 0.0
        d_alpha[:cut] = 0.0
    if not (np.isfinite(query_loss) and np.all(np.isfinite(d_w)) and np.all(np.isfinite(d_alpha))):
        raise FloatingPointError(f"meta_gradient: user {user.user_id}: non-finite meta-gradient")
    return MetaGradient(query_loss=query_loss, support_loss=support_loss,
                        d_w=d_w, d_alpha=d_alpha)


@dataclass
class MetaTrainConfig:
    episodes: int
    m: int = 10
    outer: str = "sgd"               # sgd | adam (outer optimizer)
    seed: int = 0

    def __post_init__(self):
        if self.outer not in ("sgd", "adam"):
            raise ValueError("outer optimizer must be sgd or adam")
        if self.m < 1:
            raise ValueError("m must be positive")


def meta_train(state: MetaState, users, config: MetaTrainConfig, log: list | None = None) -> MetaState:
    """Run episodic meta-training in place and return the state.

    Each episode samples m users without replacement, averages their
    meta-gradients in ascending user-id order, and applies one outer update
    to (theta, phi) and, when alpha is learned, to alpha (clamped to
    [0, 1]). Per-episode means are appended to ``log`` as dicts.
    """
    users = sorted(users, key=lambda u: u.user_id)
    if len(users) < config.m:
        raise ValueError(f"need at least m={config.m} admitted users, have {len(users)}")
    rng = Rng(config.seed).child("meta:episodes")
    adam_w = Adam(state.total_len, lr=state.beta) if config.outer == "adam" else None
    adam_a = Adam(state.total_len, lr=state.beta) if config.outer == "adam" else None

    for episode in range(config.episodes):
        t0 = time.perf_counter()
        picked = sorted(rng.choice(len(users), config.m, replace=False).tolist())
        d_w = np.zeros(state.total_len)
        d_alpha = np.zeros(state.total_len)
        q_losses, s_losses = [], []
        for i in picked:
            try:
                mg = meta_gradient(state, users[i])
            except FloatingPointError as err:
                raise FloatingPointError(f"episode {episode}: {err}") from err
            d_w += mg.d_w
            d_alpha += mg.d_alpha
            q_losses.append(mg.query_loss)
            s_losses.append(mg.support_loss)
        d_w /= config.m
        d_alpha /= config.m

        w = state.concat()
        if adam_w is not None:
            adam_w.step(w, d_w)
        else:
            w -= state.beta * d_w
        state.set_from(w)
        if state.alpha_learned:
            if adam_a is not None:
                adam_a.step(state.alpha, d_alpha)
            else:
                state.alpha -= state.beta * d_alpha
            np.clip(state.alpha, 0.0, ALPHA_MAX, out=state.alpha)
            if state.variant == "simplified":
                state.alpha[: state.phi_offset] = 0.0
        if log is not None:
            log.append({
                "episode": episode,
                "mean_query_loss": float(np.mean(q_losses)),
                "mean_support_loss": float(np.mean(s_losses)),
                "wallclock_ms": (time.perf_counter() - t0) * 1000.0,
            })
    return state


@dataclass
class MetaTestResult:
    user_id: str
    labels: np.ndarray
    p: np.ndarray                    # adapted-selector mixture predictions
    lam_mean: np.ndarray             # mean per-item lambda on the test set
    p_pooled: np.ndarray | None = None   # unadapted pooled-lambda predictions
    lam_pooled: np.ndarray | None = None


def meta_test(state: MetaState, user, fine_tune_steps: int = 1) -> MetaTestResult:
    """Adapt to one user on their full train split and predict their test set.

    Full variant: (theta, phi) take ``fine_tune_steps`` inner steps. The
    simplified variant adapts phi only (base models stay frozen) and also
    reports the no-adaptation deployment path: a single user-level lambda,
    the mean of the unadapted selector's outputs over the train items, mixes
    every test prediction.
    """
    if len(user.test) == 0:
        raise ValueError(f"user {user.user_id}: empty test set")
    train_pb = user.packed("train")
    test_pb = user.packed("test")

    adapted = state
    for _ in range(fine_tune_steps):
        step = inner_adapt(adapted, train_pb)
        nxt = adapted.copy()
        nxt.theta = step.theta_u
        nxt.phi = step.phi_u
        adapted = nxt

    p, lam, _base_p, _ = mixture_forward_batch(
        adapted.selector_spec, adapted.phi, adapted.model_specs, adapted.theta, test_pb
    )
    result = MetaTestResult(
        user_id=user.user_id,
        labels=test_pb.y.copy(),
        p=p,
        lam_mean=lam.mean(axis=0),
    )
    if state.variant == "simplified":
        _p_tr, lam_tr, _bp_tr, _ = mixture_forward_batch(
            state.selector_spec, state.phi, state.model_specs, state.theta, train_pb
        )
        lam_bar = lam_tr.mean(axis=0)
        _p_te, _lam_te, base_te, _ = mixture_forward_batch(
            state.selector_spec, state.phi, state.model_specs, state.theta, test_pb
        )
        result.p_pooled = np.clip(base_te @ lam_bar, EPS, 1.0 - EPS)
        result.lam_pooled = lam_bar
    return result


def save_meta_state(directory, state: MetaState, space) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    digest = space.digest()
    for k, (spec, bank) in enumerate(zip(state.model_specs, state.theta)):
        save_bank(d / f"model_{k}.ckpt", bank, spec.descriptor(), digest)
    save_bank(d / "selector.ckpt", state.phi, state.selector_spec.descriptor(), digest)
    alpha_bank = ParamBank([("alpha", (state.total_len,))], state.alpha.copy())
    save_bank(d / "alpha.ckpt", alpha_bank, {"kind": "alpha"}, digest)
    scalars = {
        "beta": state.beta,
        "mode": state.mode,
        "variant": state.variant,
        "alpha_learned": state.alpha_learned,
        "num_models": len(state.model_specs),
    }
    (d / "meta.json").write_text(json.dumps(scalars, sort_keys=True, indent=1))


def load_meta_state(directory, space) -> MetaState:
    d = Path(directory)
    digest = space.digest()
    scalars = json.loads((d / "meta.json").read_text())
    theta, specs = [], []
    for k in range(scalars["num_models"]):
        bank, desc = load_bank(d / f"model_{k}.ckpt", digest)
        theta.append(bank)
        specs.append(spec_from_descriptor(desc))
    phi, sel_desc = load_bank(d / "selector.ckpt", digest)
    alpha_bank, _ = load_bank(d / "alpha.ckpt", digest)
    return MetaState(
        model_specs=specs,
        theta=theta,
        selector_spec=selector_spec_from_descriptor(sel_desc),
        phi=phi,
        alpha=alpha_bank.flat.copy(),
        beta=scalars["beta"],
        mode=scalars["mode"],
        variant=scalars["variant"],
        alpha_learned=scalars["alpha_learned"],
    )
