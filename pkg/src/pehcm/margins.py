"""Hierarchical cosine-margin machinery.

Pairwise cosine-distance rows between the two augmented views of a batch,
the four-level target ladder derived from (instance, pseudo-fine, coarse)
labels, the row-normalized KL matching loss, and the momentum-updated
middle rungs of the ladder. Cosine distances here are computed on pre-map
features: the exponential map preserves direction, so the values agree with
those measured between the mapped ball points.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

# Rows are floored by this epsilon before normalization so an all-zero
# target row (same-instance pairs) still defines a distribution.
EPS_KL = 1e-8

# Ladder initialization: middle rungs start at cosine distances of roughly
# 30 and 60 degrees; the outer anchors 0 and 1 (90 degrees) are fixed.
D1_INIT = 0.134
D2_INIT = 0.5


@dataclass(frozen=True)
class LabelTriple:
    """Per-sample label triple, vectorized over a batch.

    instance_id is shared by the two views of one sample; fine_pseudo is a
    cluster index scoped within the coarse class, -1 where no pseudo-label
    has been assigned yet.
    """

    instance_id: np.ndarray
    fine_pseudo: np.ndarray
    coarse: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "instance_id", np.asarray(self.instance_id, dtype=np.int64))
        object.__setattr__(self, "fine_pseudo", np.asarray(self.fine_pseudo, dtype=np.int64))
        object.__setattr__(self, "coarse", np.asarray(self.coarse, dtype=np.int64))
        n = self.instance_id.shape
        if self.fine_pseudo.shape != n or self.coarse.shape != n:
            raise ValueError("label arrays must share one batch shape")

    def __len__(self):
        return int(self.instance_id.shape[0])


@dataclass
class TargetDistances:
    """The (d0, d1, d2, d3) target ladder with momentum state.

    d0 (same instance) and d3 (different coarse classes) are fixed anchors
    at 0 and 1; d1 and d2 track batch statistics via momentum updates.
    """

    d1: float = D1_INIT
    d2: float = D2_INIT
    beta: float = 0.999
    d0: float = 0.0
    d3: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"momentum beta must lie in (0, 1), got {self.beta}")
        for name in ("d0", "d1", "d2", "d3"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 2.0:
                raise ValueError(f"{name} must lie in [0, 2], got {v}")

    def momentum_update(self, d1_mean=None, d2_mean=None):
        """Pull d1/d2 toward observed batch means; None leaves a rung alone."""
        if d1_mean is not None:
            self.d1 = self.beta * self.d1 + (1.0 - self.beta) * float(d1_mean)
        if d2_mean is not None:
            self.d2 = self.beta * self.d2 + (1.0 - self.beta) * float(d2_mean)

    def reinitialize(self):
        self.d1 = D1_INIT
        self.d2 = D2_INIT

    def ladder(self):
        return (self.d0, self.d1, self.d2, self.d3)


def cosine_distance(u, v):
    """1 - <u,v> / (||u|| ||v||), in [0, 2]. Vectors on the last axis."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    un = np.linalg.norm(u, axis=-1)
    vn = np.linalg.norm(v, axis=-1)
    if not (np.all(un > 0.0) and np.all(vn > 0.0)):
        raise ValueError("cosine_distance is undefined for zero-norm vectors")
    return 1.0 - (u * v).sum(axis=-1) / (un * vn)


def distance_matrix(q, k):
    """Pairwise cosine distances: row i holds the distances from q_i to
    every k_j. Accepts arrays or Tensors; zero-norm rows are rejected."""
    had = isinstance(q, ad.Tensor) or isinstance(k, ad.Tensor)
    q = ad.as_tensor(q)
    k = ad.as_tensor(k)
    if q.data.ndim != 2 or k.data.ndim != 2 or q.data.shape[1] != k.data.shape[1]:
        raise ValueError("distance_matrix expects (n, d) inputs with matching d")
    for side in (q, k):
        if not np.all((side.data * side.data).sum(axis=1) > 0.0):
            raise ValueError("distance_matrix is undefined for zero-norm rows")
    qn = q / ad.sqrt((q * q).sum(axis=1, keepdims=True))
    kn = k / ad.sqrt((k * k).sum(axis=1, keepdims=True))
    w = 1.0 - qn @ kn.T
    return w if had else w.data


def _ladder_masks(labels_q, labels_k):
    """Mutually exclusive pair masks for the four ladder levels."""
    same_inst = labels_q.instance_id[:, None] == labels_k.instance_id[None, :]
    same_coarse = labels_q.coarse[:, None] == labels_k.coarse[None, :]
    fine_present = (labels_q.fine_pseudo[:, None] >= 0) & (labels_k.fine_pseudo[None, :] >= 0)
    same_fine = (
        same_coarse
        & fine_present
        & (labels_q.fine_pseudo[:, None] == labels_k.fine_pseudo[None, :])
    )
    m1 = ~same_inst & same_fine
    m2 = ~same_inst & ~same_fine & same_coarse
    m3 = ~same_inst & ~same_coarse
    return same_inst, m1, m2, m3


def target_matrix(labels_q, labels_k, targets):
    """Target-distance rows from the label ladder.

    Per pair, first match wins: same instance -> d0; same coarse class and
    same pseudo-fine label -> d1; same coarse class -> d2; otherwise d3.
    A missing pseudo-label never matches the d1 level.
    """
    m0, m1, m2, m3 = _ladder_masks(labels_q, labels_k)
    d0, d1, d2, d3 = targets.ladder()
    return np.select([m0, m1, m2, m3], [d0, d1, d2, d3]).astype(np.float64)


def hcm_loss(w, m, eps=EPS_KL):
    """Row-wise KL divergence from the normalized target rows to the
    normalized feature-distance rows, averaged over rows.

    Each row is floored by eps and divided by its sum so it is a proper
    distribution. The target m is a constant: gradients flow into w only.
    """
    m_arr = m.data if isinstance(m, ad.Tensor) else np.asarray(m, dtype=np.float64)
    had = isinstance(w, ad.Tensor)
    w = ad.as_tensor(w)
    if w.data.shape != m_arr.shape or w.data.ndim != 2:
        raise ValueError("hcm_loss expects two (n, m) inputs of one shape")
    for arr, name in ((w.data, "distance"), (m_arr, "target")):
        if arr.min() < -1e-9 or arr.max() > 2.0 + 1e-9:
            raise ValueError(f"{name} entries must lie in [0, 2]")
    n_rows = m_arr.shape[0]
    m_floor = m_arr + eps
    m_hat = m_floor / m_floor.sum(axis=1, keepdims=True)
    const_part = float((m_hat * np.log(m_hat)).sum() / n_rows)
    w_floor = w + eps
    w_hat = w_floor / w_floor.sum(axis=1, keepdims=True)
    loss = const_part - (ad.Tensor(m_hat) * ad.log(w_hat)).sum() * (1.0 / n_rows)
    return loss if had else loss.item()


def total_loss(loss_cls, loss_hcm, alpha):
    """Combined objective loss_cls + alpha * loss_hcm."""
    alpha = float(alpha)
    if alpha < 0.0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    return loss_cls + alpha * loss_hcm


def batch_stratum_means(w, labels_q, labels_k):
    """Mean observed distance over the d1 and d2 ladder strata.

    Strata follow the same first-match ladder as target_matrix with
    same-instance pairs excluded; an empty stratum yields None.
    """
    w_arr = w.data if isinstance(w, ad.Tensor) else np.asarray(w, dtype=np.float64)
    _, m1, m2, _ = _ladder_masks(labels_q, labels_k)
    d1_mean = float(w_arr[m1].mean()) if m1.any() else None
    d2_mean = float(w_arr[m2].mean()) if m2.any() else None
    return d1_mean, d2_mean
