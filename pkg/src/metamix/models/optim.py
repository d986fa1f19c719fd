"""Optimizers for base-model pretraining: FTRL-Proximal and Adam."""

from __future__ import annotations

import numpy as np


class FtrlProximal:
    """Follow-the-regularized-leader (proximal) over a flat weight vector.

    Weights are materialised lazily from the accumulators: coordinates with
    |z| <= l1 are exactly 0. Gradients arrive as dense vectors but only the
    touched coordinates need updating, so callers pass the active index set.
    """

    def __init__(self, dim: int, alpha: float = 0.1, beta: float = 1.0,
                 l1: float = 1e-5, l2: float = 1e-5):
        self.alpha = alpha
        self.beta = beta
        self.l1 = l1
        self.l2 = l2
        self.z = np.zeros(dim)
        self.n = np.zeros(dim)

    def weights(self, active=None) -> np.ndarray:
        z = self.z if active is None else self.z[active]
        n = self.n if active is None else self.n[active]
        w = np.zeros_like(z)
        sel = np.abs(z) > self.l1
        w[sel] = -(z[sel] - np.sign(z[sel]) * self.l1) / (
            (self.beta + np.sqrt(n[sel])) / self.alpha + self.l2
        )
        return w

    def update(self, active: np.ndarray, g: np.ndarray) -> None:
        """Apply one gradient vector restricted to the active coordinates."""
        w = self.weights(active)
        n_a = self.n[active]
        sigma = (np.sqrt(n_a + g * g) - np.sqrt(n_a)) / self.alpha
        self.z[active] += g - sigma * w
        self.n[active] += g * g

    def materialize(self, out: np.ndarray) -> None:
        out[:] = self.weights()


class Adam:
    """Standard Adam over a flat vector (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, dim: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, w: np.ndarray, g: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        w -= self.lr * mh / (np.sqrt(vh) + self.eps)
