import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_projection
from orbsde.errors import DomainError, ValidationError
from orbsde.geometry import (BallDomain, Containment, HalfspaceDomain, LevelSetDomain,
                             SwitchingDomain, check_switching_costs, contains, cone_membership,
                             normal_cone, positive_span_contains, project, whole_space)


def random_polytope(rng, d, m):
    A = rng.standard_normal((m, d))
    center = rng.standard_normal(d)
    b = A @ center - rng.uniform(0.1, 1.0, m)
    return A, b


def test_containment_half_line():
    dom = HalfspaceDomain([[1.0]], [0.0], dim=1)
    assert contains(dom, [1.0]) is Containment.INTERIOR
    assert contains(dom, [0.0]) is Containment.BOUNDARY
    assert contains(dom, [-1e-3]) is Containment.EXTERIOR
    assert contains(dom, [1e-10]) is Containment.BOUNDARY


def test_projection_examples():
    dom = HalfspaceDomain([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    p, dist = project(dom, [-1.0, -2.0])
    assert np.allclose(p, 0.0) and dist == pytest.approx(np.sqrt(5))
    p, dist = project(dom, [-1.0, 2.0])
    assert np.allclose(p, [0.0, 2.0]) and dist == pytest.approx(1.0)
    p, dist = project(dom, [1.0, 2.0])
    assert np.allclose(p, [1.0, 2.0]) and dist == 0.0


@pytest.mark.parametrize("d,m", [(1, 2), (2, 3), (3, 5), (4, 6)])
def test_projection_matches_brute_force(d, m):
    rng = np.random.default_rng(d * 10 + m)
    for _ in range(20):
        A, b = random_polytope(rng, d, m)
        dom = HalfspaceDomain(A, b)
        Y = 3 * rng.standard_normal((50, d))
        P, dist = dom.project_batch(Y)
        Q, qd = brute_force_projection(A, b, Y)
        assert np.abs(P - Q).max() <= 1e-8
        assert np.abs(dist - qd).max() <= 1e-8


def test_dykstra_fallback_agrees_with_active_set():
    rng = np.random.default_rng(3)
    A, b = random_polytope(rng, 3, 6)
    dom = HalfspaceDomain(A, b)
    Y = 3 * rng.standard_normal((40, 3))
    P = dom.project_batch(Y)[0]
    Q = dom._project_dykstra(Y)
    assert np.abs(P - Q).max() <= 1e-8


def test_empty_interior_rejected():
    with pytest.raises(DomainError):
        HalfspaceDomain([[1.0], [-1.0]], [0.0, 0.0])


def test_whole_space_projection_is_identity():
    dom = whole_space(3)
    Y = np.arange(9.0).reshape(3, 3)
    P, dist = dom.project_batch(Y)
    assert np.array_equal(P, Y) and np.all(dist == 0)


def test_normal_cone_at_corner():
    dom = HalfspaceDomain([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    cone = normal_cone(dom, [0.0, 0.0])
    assert cone.generators.shape == (2, 2)
    assert cone_membership(cone, [-1.0, -3.0])
    assert not cone_membership(cone, [1.0, -1.0])
    assert normal_cone(dom, [1.0, 1.0]).is_trivial
    with pytest.raises(DomainError):
        normal_cone(dom, [-1.0, 1.0])


def test_positive_span_zero_vector():
    assert positive_span_contains(np.zeros((0, 2)), [0.0, 0.0])
    assert not positive_span_contains(np.zeros((0, 2)), [1.0, 0.0])


def test_switching_costs_validation():
    with pytest.raises(ValidationError) as exc:
        check_switching_costs(np.zeros((2, 2)))
    assert "structure" in exc.value.assumption
    with pytest.raises(ValidationError):
        check_switching_costs([[0.1, 0.2], [0.2, 0.0]])
    check_switching_costs([[0.0, 0.1], [0.1, 0.0]])


def test_switching_domain_membership():
    dom = SwitchingDomain([[0.0, 0.1], [0.1, 0.0]])
    assert contains(dom, [0.0, 0.0]) is Containment.INTERIOR
    assert contains(dom, [0.0, 0.1]) is Containment.BOUNDARY
    assert contains(dom, [0.0, 0.2]) is Containment.EXTERIOR
    p, _ = project(dom, [0.0, 0.3])
    assert p[1] - p[0] == pytest.approx(0.1)


def test_ball_projection():
    dom = BallDomain([1.0, 0.0], 2.0)
    p, dist = project(dom, [5.0, 0.0])
    assert np.allclose(p, [3.0, 0.0]) and dist == pytest.approx(2.0)


def test_level_set_projection_matches_ball():
    center, r = np.array([0.5, -0.2, 0.1]), 1.3
    lvl = LevelSetDomain(lambda Y: np.sum((Y - center) ** 2, axis=1) - r * r,
                         lambda Y: 2 * (Y - center), 3, center)
    ball = BallDomain(center, r)
    Y = np.random.default_rng(0).standard_normal((30, 3)) * 3
    assert np.abs(lvl.project_batch(Y)[0] - ball.project_batch(Y)[0]).max() <= 1e-7


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 6))
def test_projection_is_idempotent_and_nonexpansive(seed, d, m):
    rng = np.random.default_rng(seed)
    A, b = random_polytope(rng, d, m)
    dom = HalfspaceDomain(A, b)
    Y = 3 * rng.standard_normal((20, d))
    P, _ = dom.project_batch(Y)
    P2, dist2 = dom.project_batch(P)
    assert np.abs(P2 - P).max() <= 1e-10 * (1 + np.abs(P).max())
    assert dist2.max() <= 1e-10 * (1 + np.abs(P).max())
    lhs = np.linalg.norm(P[1:] - P[:-1], axis=1)
    rhs = np.linalg.norm(Y[1:] - Y[:-1], axis=1)
    assert np.all(lhs <= rhs + 1e-10)
