"""The four base predictors: logit forward + exact analytic backward.

Every kind works on a PackedBatch (padded index/field/value arrays; padding
carries value 0 so it contributes nothing anywhere). backward() receives
``dz``, the per-sample dL/dlogit already including any 1/B factor, and
scatter-adds into the gradient bank's views.
"""

from __future__ import annotations

import numpy as np

from .nets import mlp_backward, mlp_forward, mlp_layout, mlp_views


def _linear_forward(w, b, pb):
    return float(b[0]) + (w[pb.idx] * pb.val).sum(axis=1)


def _linear_backward(gw, gb, pb, dz):
    np.add.at(gw, pb.idx.ravel(), (pb.val * dz[:, None]).ravel())
    gb[0] += dz.sum()


class LR:
    @staticmethod
    def layout(spec, n):
        return [("w", (n,)), ("b", (1,))]

    @staticmethod
    def forward(bank, spec, pb, train=False, rng=None):
        z = _linear_forward(bank.view("w"), bank.view("b"), pb)
        return z, None

    @staticmethod
    def backward(bank, grad, spec, pb, cache, dz):
        _linear_backward(grad.view("w"), grad.view("b"), pb, dz)


class FM:
    """Pairwise term via the sum-of-squares identity:
    0.5 * sum_f [(sum_i V_if x_i)^2 - sum_i (V_if x_i)^2]."""

    @staticmethod
    def layout(spec, n):
        return [("w", (n,)), ("b", (1,)), ("V", (n, spec.latent_dim))]

    @staticmethod
    def forward(bank, spec, pb, train=False, rng=None):
        z = _linear_forward(bank.view("w"), bank.view("b"), pb)
        vg = bank.view("V")[pb.idx] * pb.val[:, :, None]     # (B, A, d)
        s = vg.sum(axis=1)                                   # (B, d)
        z = z + 0.5 * ((s * s).sum(axis=1) - (vg * vg).sum(axis=(1, 2)))
        return z, (vg, s)

    @staticmethod
    def backward(bank, grad, spec, pb, cache, dz):
        vg, s = cache
        _linear_backward(grad.view("w"), grad.view("b"), pb, dz)
        # dz/dV_i = x_i * (S - V_i x_i) for every active i
        dv = (s[:, None, :] - vg) * pb.val[:, :, None] * dz[:, None, None]
        np.add.at(grad.view("V"), pb.idx.ravel(), dv.reshape(-1, dv.shape[-1]))


class FFM:
    """Field-aware pairwise term: <V[i, field(j)], V[j, field(i)]> x_i x_j
    over active feature pairs (same-field pairs included, as in FM)."""

    @staticmethod
    def layout(spec, n):
        return [("w", (n,)), ("b", (1,)), ("V", (n, spec.num_fields, spec.latent_dim))]

    @staticmethod
    def forward(bank, spec, pb, train=False, rng=None):
        z = _linear_forward(bank.view("w"), bank.view("b"), pb)
        v = bank.view("V")
        a_count = pb.idx.shape[1]
        pair = np.zeros(pb.n)
        for a in range(a_count):
            va = v[pb.idx[:, a]]                              # (B, F, d)
            for c in range(a + 1, a_count):
                vc = v[pb.idx[:, c]]
                rows = np.arange(pb.n)
                left = va[rows, pb.fld[:, c]]                 # (B, d)
                right = vc[rows, pb.fld[:, a]]
                pair += (left * right).sum(axis=1) * pb.val[:, a] * pb.val[:, c]
        return z + pair, None

    @staticmethod
    def backward(bank, grad, spec, pb, cache, dz):
        _linear_backward(grad.view("w"), grad.view("b"), pb, dz)
        v = bank.view("V")
        gv = grad.view("V")
        a_count = pb.idx.shape[1]
        rows = np.arange(pb.n)
        for a in range(a_count):
            va = v[pb.idx[:, a]]
            for c in range(a + 1, a_count):
                vc = v[pb.idx[:, c]]
                coef = (pb.val[:, a] * pb.val[:, c] * dz)[:, None]
                left = va[rows, pb.fld[:, c]]
                right = vc[rows, pb.fld[:, a]]
                np.add.at(gv, (pb.idx[:, a], pb.fld[:, c]), coef * right)
                np.add.at(gv, (pb.idx[:, c], pb.fld[:, a]), coef * left)


class DeepFM:
    """FM logit plus an MLP over the concatenated per-field embeddings;
    the embedding table is shared between both components."""

    @staticmethod
    def layout(spec, n):
        d = spec.latent_dim
        lay = [("w", (n,)), ("b", (1,)), ("V", (n, d))]
        lay += mlp_layout("mlp_", spec.num_fields * d, spec.hidden_sizes, 1)
        return lay

    @staticmethod
    def _field_embed(vg, pb, num_fields):
        b, _a, d = vg.shape
        e = np.zeros((b, num_fields, d))
        np.add.at(e, (np.arange(b)[:, None], pb.fld), vg)
        return e

    @staticmethod
    def forward(bank, spec, pb, train=False, rng=None):
        z = _linear_forward(bank.view("w"), bank.view("b"), pb)
        vg = bank.view("V")[pb.idx] * pb.val[:, :, None]
        s = vg.sum(axis=1)
        z = z + 0.5 * ((s * s).sum(axis=1) - (vg * vg).sum(axis=(1, 2)))
        e = DeepFM._field_embed(vg, pb, spec.num_fields)
        x = e.reshape(pb.n, -1)
        layers = mlp_views(bank, "mlp_", len(spec.hidden_sizes) + 1)
        keep = spec.keep_prob if train else None
        out, mlp_cache = mlp_forward(layers, x, keep_prob=keep, rng=rng)
        return z + out[:, 0], (vg, s, mlp_cache)

    @staticmethod
    def backward(bank, grad, spec, pb, cache, dz):
        vg, s, mlp_cache = cache
        _linear_backward(grad.view("w"), grad.view("b"), pb, dz)
        gv = grad.view("V")
        dv = (s[:, None, :] - vg) * pb.val[:, :, None] * dz[:, None, None]
        np.add.at(gv, pb.idx.ravel(), dv.reshape(-1, dv.shape[-1]))
        n_layers = len(spec.hidden_sizes) + 1
        layers = mlp_views(bank, "mlp_", n_layers)
        dx, mlp_grads = mlp_backward(layers, mlp_cache, dz[:, None])
        for i, (dw, db) in enumerate(mlp_grads):
            grad.view(f"mlp_W{i}")[...] += dw
            grad.view(f"mlp_b{i}")[...] += db
        de = dx.reshape(pb.n, spec.num_fields, -1)
        rows = np.arange(pb.n)[:, None]
        dvg = de[rows, pb.fld] * pb.val[:, :, None]
        np.add.at(gv, pb.idx.ravel(), dvg.reshape(-1, dvg.shape[-1]))


KINDS = {"lr": LR, "fm": FM, "ffm": FFM, "deepfm": DeepFM}
