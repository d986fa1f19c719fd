"""Minimal dense MLP with exact backward pass.

Shared by the deep CTR model's tower, the model selector, and the baseline
level-selector classifiers. Hidden activations are ReLU, the output layer is
linear; inverted dropout on hidden activations is available for training.
"""

from __future__ import annotations

import numpy as np


def mlp_layout(prefix: str, in_dim: int, hidden, out_dim: int):
    """Segment layout [(name, shape), ...] for a bank holding this MLP."""
    sizes = [in_dim, *hidden, out_dim]
    layout = []
    for i in range(len(sizes) - 1):
        layout.append((f"{prefix}W{i}", (sizes[i], sizes[i + 1])))
        layout.append((f"{prefix}b{i}", (sizes[i + 1],)))
    return layout


def mlp_views(bank, prefix: str, n_layers: int):
    return [(bank.view(f"{prefix}W{i}"), bank.view(f"{prefix}b{i}")) for i in range(n_layers)]


def mlp_forward(layers, x: np.ndarray, keep_prob: float | None = None, rng=None):
    """Forward over a (B, in_dim) batch. Returns (out, cache).

    keep_prob < 1 applies inverted dropout to every hidden activation and
    requires an rng; pass None for deterministic inference.
    """
    h = x
    acts = [x]
    masks = []
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < last:
            h = np.maximum(z, 0.0)
            if keep_prob is not None and keep_prob < 1.0:
                mask = (rng.random(h.shape) < keep_prob) / keep_prob
                h = h * mask
                masks.append(mask)
            else:
                masks.append(None)
            acts.append(h)
        else:
            h = z
    return h, (acts, masks)


def mlp_backward(layers, cache, dout: np.ndarray):
    """Backprop dout (B, out_dim) through the cached forward.

    Returns (dx, grads) with grads matching the layer list as (dW, db) pairs,
    summed over the batch (callers own any 1/B normalisation).
    """
    acts, masks = cache
    grads = [None] * len(layers)
    dh = dout
    for i in range(len(layers) - 1, -1, -1):
        w, _b = layers[i]
        a_in = acts[i]
        grads[i] = (a_in.T @ dh, dh.sum(axis=0))
        dh = dh @ w.T
        if i > 0:
            # acts[i] feeds layer i post-ReLU/post-dropout; where the dropout
            # mask is 0 the mask product already kills dh, so its positivity
            # is a valid ReLU derivative in both cases.
            if masks[i - 1] is not None:
                dh = dh * masks[i - 1]
            dh = dh * (acts[i] > 0)
    return dh, grads
