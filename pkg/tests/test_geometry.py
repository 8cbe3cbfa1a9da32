import math

import numpy as np
import pytest

from pehcm import autodiff as ad
from pehcm import geometry
from pehcm.geometry import (
    BALL_EPS,
    DegenerateHyperplaneError,
    clip_to_ball,
    exp_map,
    hyperplane_distance,
    mobius_add,
    poincare_distance,
)


def sample_ball_points(rng, n, dim, c, max_radius=0.9):
    """Random points with sqrt(c)||z|| <= max_radius."""
    direction = rng.normal(size=(n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radii = rng.uniform(0.0, max_radius, (n, 1)) / math.sqrt(c)
    return direction * radii


# -- exp_map ---------------------------------------------------------------------


def test_exp_map_fixes_origin():
    for dim in (1, 2, 7):
        assert np.all(exp_map(np.zeros(dim), 1.0) == 0.0)


def test_exp_map_scalar_value():
    z = exp_map(np.array([1.0, 0.0]), 1.0)
    assert abs(z[0] - math.tanh(1.0)) < 1e-12 and z[1] == 0.0


def test_exp_map_flat_limit(rng):
    x = rng.normal(size=(64, 8))
    x *= (rng.uniform(0.1, 10.0, (64, 1)) / np.linalg.norm(x, axis=1, keepdims=True))
    z = exp_map(x, 1e-12)
    assert np.linalg.norm(z - x, axis=1).max() <= 1e-6


def test_exp_map_conformality(rng):
    for c in (1e-3, 1.0):
        for dim in (2, 5, 32):
            x = rng.normal(size=(200, dim)) * rng.uniform(0.1, 3.0, (200, 1))
            y = rng.normal(size=(200, dim)) * rng.uniform(0.1, 3.0, (200, 1))
            zx, zy = exp_map(x, c), exp_map(y, c)

            def cos(a, b):
                return (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))

            assert np.abs(cos(zx, zy) - cos(x, y)).max() < 1e-9


def test_exp_map_direction_preserved(rng):
    x = rng.normal(size=(100, 6))
    keep = np.linalg.norm(x, axis=1) > 1e-6
    z = exp_map(x[keep], 0.7)
    unit_x = x[keep] / np.linalg.norm(x[keep], axis=1, keepdims=True)
    unit_z = z / np.linalg.norm(z, axis=1, keepdims=True)
    assert np.abs(unit_z - unit_x).max() < 1e-12


def test_exp_map_norm_bound(rng):
    x = rng.normal(size=(100, 4)) * rng.uniform(0.0, 50.0, (100, 1))
    for c in (1e-3, 1.0, 4.0):
        assert np.all(math.sqrt(c) * np.linalg.norm(exp_map(x, c), axis=1) < 1.0)


def test_exp_map_taylor_region_matches_series():
    c = 2.0
    x = np.array([[3e-8, 4e-8]])
    z = exp_map(x, c)
    t2 = c * float((x * x).sum())
    assert np.allclose(z, x * (1.0 - t2 / 3.0), rtol=0, atol=1e-30)


def test_exp_map_rejects_bad_input():
    with pytest.raises(ValueError):
        exp_map(np.array([np.nan, 0.0]), 1.0)
    with pytest.raises(ValueError):
        exp_map(np.ones(2), 0.0)
    with pytest.raises(ValueError):
        exp_map(np.ones(2), -1.0)


# -- mobius_add ---------------------------------------------------------------------


def test_mobius_left_identity(rng):
    v = sample_ball_points(rng, 50, 5, 1.0)
    assert np.abs(mobius_add(np.zeros(5), v, 1.0) - v).max() < 1e-15


def test_mobius_left_inverse(rng):
    u = sample_ball_points(rng, 50, 5, 2.0, max_radius=0.95)
    assert np.abs(mobius_add(u, -u, 2.0)).max() < 1e-12


def test_mobius_collinear_scalar_case():
    out = mobius_add(np.array([0.3, 0.0]), np.array([0.4, 0.0]), 1.0)
    assert abs(out[0] - 0.625) < 1e-6 and abs(out[1]) < 1e-15


def test_mobius_cancellation(rng):
    for c in (1e-3, 1.0):
        u = sample_ball_points(rng, 200, 4, c)
        v = sample_ball_points(rng, 200, 4, c)
        restored = mobius_add(-u, mobius_add(u, v, c), c)
        assert np.abs(restored - v).max() < 1e-9


def test_mobius_result_stays_inside(rng):
    u = sample_ball_points(rng, 100, 3, 1.0, max_radius=1.0 - BALL_EPS)
    v = sample_ball_points(rng, 100, 3, 1.0, max_radius=1.0 - BALL_EPS)
    out = mobius_add(u, v, 1.0)
    assert np.all(np.linalg.norm(out, axis=1) <= (1.0 - BALL_EPS) + 1e-15)


# -- poincare_distance ----------------------------------------------------------------


def test_distance_identity(rng):
    u = sample_ball_points(rng, 20, 4, 1.0)
    assert np.abs(poincare_distance(u, u, 1.0)).max() < 1e-12


def test_distance_scalar_value():
    d = poincare_distance(np.zeros(2), np.array([0.5, 0.0]), 1.0)
    assert abs(d - 2.0 * math.atanh(0.5)) < 1e-12
    assert abs(d - 1.098612) < 1e-6


def test_distance_symmetry(rng):
    u = sample_ball_points(rng, 100, 6, 0.5)
    v = sample_ball_points(rng, 100, 6, 0.5)
    assert np.abs(poincare_distance(u, v, 0.5) - poincare_distance(v, u, 0.5)).max() < 1e-12


def test_distance_broadcasts():
    u = sample_ball_points(np.random.default_rng(0), 4, 3, 1.0)
    v = sample_ball_points(np.random.default_rng(1), 6, 3, 1.0)
    table = poincare_distance(u[:, None, :], v[None, :, :], 1.0)
    assert table.shape == (4, 6)
    assert abs(table[2, 3] - poincare_distance(u[2], v[3], 1.0)) < 1e-14


# -- hyperplane_distance ---------------------------------------------------------------


def test_hyperplane_zero_on_plane(rng):
    # Points z with <(-p) (+) z, a> = 0 sit on the hyperplane through p.
    p = np.array([0.2, 0.1, -0.3])
    a = np.array([0.0, 0.0, 1.5])
    m = np.array([0.4, -0.2, 0.0])  # orthogonal to a
    z = mobius_add(p, m, 1.0)
    assert hyperplane_distance(z, p, a, 1.0) < 1e-12


def test_hyperplane_scale_and_sign_invariance(rng):
    z = sample_ball_points(rng, 50, 4, 1.0)
    p = sample_ball_points(rng, 50, 4, 1.0)
    a = rng.normal(size=(50, 4))
    base = hyperplane_distance(z, p, a, 1.0)
    for factor in (2.5, 1e-3, -1.0, -7.0):
        assert np.abs(hyperplane_distance(z, p, factor * a, 1.0) - base).max() < 1e-9


def test_hyperplane_scalar_value():
    d = hyperplane_distance(np.array([0.5, 0.0]), np.zeros(2), np.array([1.0, 0.0]), 1.0)
    assert abs(d - math.asinh(4.0 / 3.0)) < 1e-12
    assert abs(d - 1.098612) < 1e-6
    # geodesic through the origin: agrees with the point distance
    assert abs(d - poincare_distance(np.zeros(2), np.array([0.5, 0.0]), 1.0)) < 1e-12


def test_hyperplane_rejects_zero_normal():
    with pytest.raises(DegenerateHyperplaneError):
        hyperplane_distance(np.array([0.1, 0.0]), np.zeros(2), np.zeros(2), 1.0)


# -- clip_to_ball -------------------------------------------------------------------------


def test_clip_interior_unchanged():
    z = np.array([0.5, 0.0])
    assert np.all(clip_to_ball(z, 1.0) == z)


def test_clip_outside_forced_to_shell():
    out = clip_to_ball(np.array([2.0, 0.0]), 1.0)
    assert abs(np.linalg.norm(out) - (1.0 - BALL_EPS)) < 1e-15


def test_clip_zero():
    assert np.all(clip_to_ball(np.zeros(3), 1.0) == 0.0)


def test_clip_respects_curvature():
    out = clip_to_ball(np.array([100.0, 0.0]), 0.01)
    assert abs(np.linalg.norm(out) - (1.0 - BALL_EPS) / 0.1) < 1e-10


# -- tape integration ------------------------------------------------------------------------


def test_tensor_and_array_paths_agree(rng):
    x = rng.normal(size=(5, 3))
    for fn in (lambda v: exp_map(v, 0.5), lambda v: clip_to_ball(v * 3.0, 0.5)):
        plain = fn(x)
        taped = fn(ad.Tensor(x))
        assert isinstance(taped, ad.Tensor)
        assert np.array_equal(plain, taped.data)


def test_exp_map_gradient_is_finite_at_origin():
    x = ad.Tensor(np.zeros((1, 3)), requires_grad=True)
    z = exp_map(x, 1.0)
    (z * z).sum().backward()
    assert np.all(np.isfinite(x.grad))


def test_clip_gradient_flows_through_rescale():
    x = ad.Tensor(np.array([[3.0, 4.0]]), requires_grad=True)
    out = clip_to_ball(x, 1.0)
    out.sum().backward()
    assert np.all(np.isfinite(x.grad))
    # rescaled output has constant norm, so radial gradients vanish
    radial = (x.grad * x.data).sum()
    assert abs(radial) < 1e-12


def test_op_counters():
    geometry.reset_op_counts()
    exp_map(np.zeros(2), 1.0)
    exp_map(np.zeros(2), 1.0)
    poincare_distance(np.zeros(2), np.array([0.1, 0.0]), 1.0)
    counts = geometry.op_counts()
    assert counts["exp_map"] == 2
    assert counts["poincare_distance"] == 1
    geometry.reset_op_counts()
    assert geometry.op_counts() == {}
