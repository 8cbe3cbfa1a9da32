"""Classification heads.

The hyperbolic head scores ball points against per-class hyperbolic
hyperplanes (multinomial logistic regression in the ball); the linear head
is the flat-space ablation counterpart. Both produce logits consumed by the
same cross-entropy loss.
"""

import math

import numpy as np

from . import autodiff as ad
from . import geometry


class MlrParams:
    """Per-class hyperbolic hyperplanes.

    Each class k owns an anchor point, stored as an unconstrained pre-map
    vector p_raw_k (the anchor is exp_map(p_raw_k), so plain first-order
    updates keep it inside the ball), and a Euclidean normal a_k.
    """

    def __init__(self, p_raw, a, curvature):
        self.p_raw = p_raw
        self.a = a
        self.curvature = geometry._check_curvature(curvature)
        if p_raw.data.shape != a.data.shape or p_raw.data.ndim != 2:
            raise ValueError("p_raw and a must both have shape (n_classes, dim)")

    @classmethod
    def create(cls, n_classes, dim, curvature, rng, store=None, prefix="mlr"):
        """Anchors start at the origin; normals are Gaussian with std 1/sqrt(dim)."""
        std = 1.0 / math.sqrt(dim)

        def init_p():
            return np.zeros((n_classes, dim))

        def init_a():
            return rng.normal(0.0, std, (n_classes, dim))

        if store is not None:
            p_raw = store.create(f"{prefix}.p_raw", init_p)
            a = store.create(f"{prefix}.a", init_a)
        else:
            p_raw = ad.Tensor(init_p(), requires_grad=True)
            a = ad.Tensor(init_a(), requires_grad=True)
        return cls(p_raw, a, curvature)

    @property
    def n_classes(self):
        return self.p_raw.data.shape[0]

    def degenerate_normals(self, threshold=1e-8):
        """Indices of classes whose normal collapsed below the threshold."""
        norms = np.linalg.norm(self.a.data, axis=1)
        return np.nonzero(norms < threshold)[0]

    def resample_normals(self, rows, rng):
        """Re-draw collapsed normals in place from the init distribution."""
        dim = self.a.data.shape[1]
        self.a.data[rows] = rng.normal(0.0, 1.0 / math.sqrt(dim), (len(rows), dim))


def mlr_logits(z, params, curvature=None):
    """Logits of ball points z against every class hyperplane.

    logit_k = sign(<(-p_k) (+) z, a_k>) * ||a_k|| * d(z, H_{p_k, a_k});
    computed in the equivalent smooth form
    (||a_k|| / sqrt(c)) * asinh(2 sqrt(c) <m, a_k> / ((1 - c||m||^2)||a_k||))
    so the sign convention sign(0) = +1 holds and gradients are exact.
    """
    if curvature is not None and float(curvature) != params.curvature:
        raise ValueError(
            f"curvature mismatch: points use {float(curvature)}, head uses {params.curvature}"
        )
    c = params.curvature
    a_sumsq = (params.a.data * params.a.data).sum(axis=1)
    if not np.all(a_sumsq > 0.0):
        raise geometry.DegenerateHyperplaneError("a class normal has zero length")
    had = isinstance(z, ad.Tensor)
    z = ad.as_tensor(z)
    rc = math.sqrt(c)
    zb = z.reshape(z.data.shape[:-1] + (1,) + z.data.shape[-1:])
    p = geometry.exp_map(params.p_raw, c)
    m = geometry.mobius_add(-p, zb, c)
    dot = (m * params.a).sum(axis=-1)
    msq = (m * m).sum(axis=-1)
    a_norm = ad.sqrt((params.a * params.a).sum(axis=-1))
    arg = (2.0 * rc) * dot / ((1.0 - c * msq) * a_norm)
    logits = (a_norm * (1.0 / rc)) * ad.arcsinh(arg)
    return logits if had else logits.data


class LinearHead:
    """Plain affine softmax head used by the flat-space ablation."""

    def __init__(self, w, b):
        self.w = w
        self.b = b

    @classmethod
    def create(cls, n_classes, dim, rng, store=None, prefix="head"):
        std = 1.0 / math.sqrt(dim)

        def init_w():
            return rng.normal(0.0, std, (n_classes, dim))

        def init_b():
            return np.zeros(n_classes)

        if store is not None:
            return cls(store.create(f"{prefix}.w", init_w), store.create(f"{prefix}.b", init_b))
        return cls(ad.Tensor(init_w(), requires_grad=True), ad.Tensor(init_b(), requires_grad=True))

    def logits(self, x):
        had = isinstance(x, ad.Tensor)
        x = ad.as_tensor(x)
        out = x @ self.w.T + self.b
        return out if had else out.data


def log_softmax(logits):
    """Row-wise log softmax of a (n, k) Tensor."""
    shift = logits - logits.data.max(axis=1, keepdims=True)
    return shift - ad.log(ad.exp(shift).sum(axis=1, keepdims=True))


def classification_loss(logits, labels):
    """Mean cross entropy of (n, k) logits against integer labels in [0, k)."""
    had = isinstance(logits, ad.Tensor)
    logits = ad.as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError("classification_loss expects (n, k) logits")
    n, k = logits.data.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError("labels must be one integer per logits row")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    loss = -(ad.Tensor(onehot) * log_softmax(logits)).sum() * (1.0 / n)
    return loss if had else loss.item()


def softmax_probs(logits_data):
    """Row-wise softmax of plain (n, k) logit values."""
    shift = logits_data - logits_data.max(axis=1, keepdims=True)
    e = np.exp(shift)
    return e / e.sum(axis=1, keepdims=True)
