"""Poincare ball primitives with numerical guards.

The ball of curvature c > 0 is the set {z : c * ||z||^2 < 1} with radius
1/sqrt(c); as c -> 0 it approaches flat space. Every result is clipped to a
thin shell strictly inside the boundary so that atanh/asinh arguments stay
finite in double precision. Feature vectors live on the last axis and
leading axes broadcast.

Inputs may be plain arrays or autodiff Tensors; the return type follows the
inputs, so one set of formulas serves both the training graph and plain
numerical callers. Plain-array inputs are validated for finiteness.
"""

import math
from collections import Counter

import numpy as np

from . import autodiff as ad

# Shell margin: clipped points keep sqrt(c)*||z|| <= 1 - BALL_EPS.
BALL_EPS = 1e-5
# Below this input norm exp_map switches to the cubic Taylor form of
# tanh(t)/t to avoid 0/0.
TAYLOR_NORM = 1e-7

_op_counts = Counter()


class DegenerateHyperplaneError(ValueError):
    """A hyperplane normal vector has zero length."""


def op_counts():
    """Copy of the per-operation call counters (ablation instrumentation)."""
    return dict(_op_counts)


def reset_op_counts():
    _op_counts.clear()


def _check_curvature(c):
    c = float(c)
    if not math.isfinite(c) or c <= 0.0:
        raise ValueError(f"curvature must be a positive finite real, got {c}")
    return c


def _lift(*values):
    """Coerce inputs to Tensors; report whether any caller passed a Tensor."""
    had_tensor = any(isinstance(v, ad.Tensor) for v in values)
    lifted = []
    for v in values:
        if isinstance(v, ad.Tensor):
            lifted.append(v)
        else:
            arr = np.asarray(v, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite input to a ball operation")
            lifted.append(ad.Tensor(arr))
    return lifted, had_tensor


def _ret(t, had_tensor):
    return t if had_tensor else t.data


def _clip_t(z, c):
    """Rescale rows with c*||z||^2 >= (1 - BALL_EPS)^2 onto the shell."""
    sumsq = (z * z).sum(axis=-1, keepdims=True)
    mask = c * sumsq.data >= (1.0 - BALL_EPS) ** 2
    if not mask.any():
        return z
    target = (1.0 - BALL_EPS) / math.sqrt(c)
    sumsq_safe = ad.where(mask, sumsq, 1.0)
    scaled = z * (target / ad.sqrt(sumsq_safe))
    return ad.where(mask, scaled, z)


def _exp_map_t(x, c):
    rc = math.sqrt(c)
    sumsq = (x * x).sum(axis=-1, keepdims=True)
    small = sumsq.data < TAYLOR_NORM ** 2
    if small.all():
        scale = 1.0 - (c / 3.0) * sumsq
    else:
        # Guard the masked-out rows so tanh(t)/t never sees t = 0.
        sumsq_safe = ad.where(small, 1.0, sumsq)
        t = rc * ad.sqrt(sumsq_safe)
        ratio = ad.tanh(t) / t
        if small.any():
            scale = ad.where(small, 1.0 - (c / 3.0) * sumsq, ratio)
        else:
            scale = ratio
    return _clip_t(x * scale, c)


def _mobius_add_t(u, v, c):
    uv = (u * v).sum(axis=-1, keepdims=True)
    uu = (u * u).sum(axis=-1, keepdims=True)
    vv = (v * v).sum(axis=-1, keepdims=True)
    num = (1.0 + 2.0 * c * uv + c * vv) * u + (1.0 - c * uu) * v
    den = 1.0 + 2.0 * c * uv + c * c * uu * vv
    return _clip_t(num / den, c)


def exp_map(x, c):
    """Map a tangent vector at the origin into the ball.

    z = x * tanh(sqrt(c) ||x||) / (sqrt(c) ||x||); the zero vector maps to
    the origin and the result is shell-clipped. Direction is preserved, so
    angles between mapped vectors equal the flat-space angles.
    """
    c = _check_curvature(c)
    (x,), had = _lift(x)
    _op_counts["exp_map"] += 1
    return _ret(_exp_map_t(x, c), had)


def mobius_add(u, v, c):
    """Gyrovector addition of two ball points, shell-clipped.

    ((1 + 2c<u,v> + c||v||^2) u + (1 - c||u||^2) v)
    / (1 + 2c<u,v> + c^2 ||u||^2 ||v||^2)
    """
    c = _check_curvature(c)
    (u, v), had = _lift(u, v)
    _op_counts["mobius_add"] += 1
    return _ret(_mobius_add_t(u, v, c), had)


def poincare_distance(u, v, c):
    """Geodesic distance (2/sqrt(c)) * atanh(sqrt(c) ||(-u) (+) v||)."""
    c = _check_curvature(c)
    (u, v), had = _lift(u, v)
    _op_counts["poincare_distance"] += 1
    rc = math.sqrt(c)
    diff = _mobius_add_t(-u, v, c)
    norm = ad.sqrt((diff * diff).sum(axis=-1))
    return _ret((2.0 / rc) * ad.arctanh(rc * norm), had)


def hyperplane_distance(z, p, a, c):
    """Distance from z to the hyperbolic hyperplane anchored at p with
    Euclidean normal a:

    (1/sqrt(c)) * asinh( 2 sqrt(c) |<m, a>| / ((1 - c||m||^2) ||a||) ),
    m = (-p) (+) z.

    Invariant under positive rescaling or sign flip of a.
    """
    c = _check_curvature(c)
    (z, p, a), had = _lift(z, p, a)
    _op_counts["hyperplane_distance"] += 1
    a_sumsq = (a.data * a.data).sum(axis=-1)
    if not np.all(a_sumsq > 0.0):
        raise DegenerateHyperplaneError("hyperplane normal has zero length")
    rc = math.sqrt(c)
    m = _mobius_add_t(-p, z, c)
    dot = (m * a).sum(axis=-1)
    dot_abs = ad.where(dot.data < 0.0, -dot, dot)
    msq = (m * m).sum(axis=-1)
    a_norm = ad.sqrt((a * a).sum(axis=-1))
    arg = (2.0 * rc) * dot_abs / ((1.0 - c * msq) * a_norm)
    return _ret((1.0 / rc) * ad.arcsinh(arg), had)


def clip_to_ball(z, c):
    """Project a raw vector into the shell {sqrt(c)||z|| <= 1 - BALL_EPS}.

    Interior points pass through unchanged.
    """
    c = _check_curvature(c)
    (z,), had = _lift(z)
    _op_counts["clip_to_ball"] += 1
    return _ret(_clip_t(z, c), had)
