import math

import numpy as np
import pytest

from sthdg.basis import (PrismGeometry, SpaceKind, eval_mapped, make_basis,
                         make_quadrature)


def test_dimension_counts():
    # closed-form dimensions of the local spaces
    assert make_basis(SpaceKind.PRISM_PP, 1).dim == 6
    assert make_basis(SpaceKind.FACET_Q, 1).dim == 4
    assert make_basis(SpaceKind.PRISM_TILDE_W, 1).dim == 2
    assert make_basis(SpaceKind.PRISM_PP, 2).dim == 18
    for p in (1, 2, 3):
        assert make_basis(SpaceKind.PRISM_PP, p).dim == (p + 1) ** 2 * (p + 2) // 2
        assert make_basis(SpaceKind.FACET_Q, p).dim == (p + 1) ** 2
        assert make_basis(SpaceKind.PRISM_TILDE_W, p).dim == p * (p + 1) ** 2 // 2


def test_element_unknown_count_p2():
    # q carries two prism components, v one: 3/2 (p+1)^2 (p+2) unknowns
    p = 2
    nv = make_basis(SpaceKind.PRISM_PP, p).dim
    assert 3 * nv == 54


def test_p0_rejected_for_solver_spaces():
    for kind in (SpaceKind.PRISM_PP, SpaceKind.PRISM_TILDE_W, SpaceKind.FACET_Q):
        with pytest.raises(ValueError):
            make_basis(kind, 0)
    # trace spaces allow p = 0
    assert make_basis(SpaceKind.TRI_P, 0).dim == 1
    assert make_basis(SpaceKind.INTERVAL_P, 0).dim == 1


def _rule_for(kind, p):
    basis = make_basis(kind, p)
    if basis.ndim == 3:
        return make_quadrature("prism", 2 * p + 2)
    if kind is SpaceKind.FACET_Q:
        return make_quadrature("facet", 2 * p + 2)
    if kind is SpaceKind.TRI_P:
        return make_quadrature("triangle", 2 * p + 2)
    return make_quadrature("interval", 2 * p + 2)


@pytest.mark.parametrize("kind", list(SpaceKind))
@pytest.mark.parametrize("p", [1, 2, 3])
def test_gram_matrix_is_identity(kind, p):
    basis = make_basis(kind, p)
    rule = _rule_for(kind, p)
    vals = basis.values(rule.points)
    gram = np.einsum("ik,k,jk->ij", vals, rule.weights, vals)
    assert np.max(np.abs(gram - np.eye(basis.dim))) < 1e-12


def test_quadrature_weight_sums():
    assert np.isclose(make_quadrature("triangle", 4).weights.sum(), 0.5)
    assert np.isclose(make_quadrature("interval", 4).weights.sum(), 2.0)
    assert np.isclose(make_quadrature("prism", 4).weights.sum(), 1.0)
    assert np.isclose(make_quadrature("facet", 4).weights.sum(), 4.0)


def test_gauss_two_point_classic():
    rule = make_quadrature("interval", 3)
    assert rule.n_points == 2
    got = np.sum(rule.weights * rule.points[:, 0] ** 2)
    assert np.isclose(got, 2.0 / 3.0)


def test_triangle_monomial_exactness():
    for deg in (2, 4, 6, 8):
        rule = make_quadrature("triangle", deg)
        for i in range(deg + 1):
            for j in range(deg + 1 - i):
                exact = math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)
                got = np.sum(rule.weights * rule.points[:, 0] ** i * rule.points[:, 1] ** j)
                assert abs(got - exact) < 1e-13 * max(1.0, exact)


def test_triangle_xy_moment():
    # analytic integral of x*y over the unit triangle
    rule = make_quadrature("triangle", 4)
    got = np.sum(rule.weights * rule.points[:, 0] * rule.points[:, 1])
    assert np.isclose(got, 1.0 / 24.0, rtol=1e-13)


def test_quadrature_degree_errors():
    with pytest.raises(ValueError):
        make_quadrature("triangle", 0)
    with pytest.raises(ValueError, match="composite"):
        make_quadrature("triangle", 99)
    with pytest.raises(ValueError):
        make_quadrature("pyramid", 4)


def test_prism_quadrature_separable():
    rule = make_quadrature("prism", 5)
    got = np.sum(rule.weights * rule.points[:, 0] ** 2 * rule.points[:, 1])
    # int t^2 over [-1,1] = 2/3; int x over triangle = 1/6
    assert np.isclose(got, (2.0 / 3.0) * (1.0 / 6.0))


def test_constant_reproduction_at_quadrature_points():
    # project 1 onto the basis, evaluate back at quadrature points
    for kind in (SpaceKind.PRISM_PP, SpaceKind.FACET_Q, SpaceKind.TRI_P):
        p = 2
        basis = make_basis(kind, p)
        rule = _rule_for(kind, p)
        vals = basis.values(rule.points)
        coeffs = vals @ (rule.weights * np.ones(rule.n_points))
        back = coeffs @ vals
        assert np.max(np.abs(back - 1.0)) < 1e-12


def test_tensor_structure_separable_coefficients():
    # a prism function with separable coefficients evaluates as the product
    # of its triangle and time factors
    p = 2
    prism = make_basis(SpaceKind.PRISM_PP, p)
    tri = make_basis(SpaceKind.TRI_P, p)
    line = make_basis(SpaceKind.INTERVAL_P, p)
    rng = np.random.default_rng(3)
    a = rng.standard_normal(tri.dim)
    b = rng.standard_normal(p + 1)
    coeffs = np.outer(a, b).ravel()
    pts = np.column_stack([rng.uniform(-1, 1, 30),
                           rng.uniform(0.0, 0.45, 30),
                           rng.uniform(0.0, 0.45, 30)])
    lhs = coeffs @ prism.values(pts)
    rhs = (a @ tri.values(pts[:, 1:])) * (b @ line.values(pts[:, :1]))
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_mapped_gradient_constant_and_linear():
    geom = PrismGeometry(B=np.array([[0.3, 0.1], [0.0, 0.5]]),
                         c=np.array([0.2, -0.7]), t_start=1.0, dt=0.5)
    basis = make_basis(SpaceKind.PRISM_PP, 1)
    pts = np.array([[0.1, 0.2, 0.3], [-0.4, 0.1, 0.5]])
    vals, grads = eval_mapped(basis, geom, pts)
    # constant mode: zero physical gradient
    const = np.argmax(np.abs(vals[:, 0] - vals[:, 1]) < 1e-14)
    assert np.max(np.abs(grads[const])) < 1e-12
    # a pure-in-time linear combination has d/dt = 2/dt times its slope
    rng = np.random.default_rng(0)
    coeffs = rng.standard_normal(basis.dim)
    ref = basis.gradients(pts)
    assert np.allclose(np.einsum("i,ik->k", coeffs, grads[:, 0, :]),
                       (2.0 / geom.dt) * np.einsum("i,ik->k", coeffs, ref[:, 0, :]))


def test_mapped_gradient_finite_difference_oracle():
    rng = np.random.default_rng(7)
    geom = PrismGeometry(B=np.array([[0.42, -0.11], [0.07, 0.35]]),
                         c=np.array([0.3, -0.6]), t_start=0.25, dt=0.4)
    basis = make_basis(SpaceKind.PRISM_PP, 2)
    coeffs = rng.standard_normal(basis.dim)
    pts = np.column_stack([rng.uniform(-0.8, 0.8, 12),
                           rng.uniform(0.1, 0.4, 12),
                           rng.uniform(0.1, 0.4, 12)])
    _, grads = eval_mapped(basis, geom, pts)
    got = np.einsum("i,idk->dk", coeffs, grads)

    # physical-space central differences through the inverse map
    binv = geom.Binv
    h = 1e-6

    def f_phys(t, xy):
        that = 2.0 * (t - geom.t_start) / geom.dt - 1.0
        ref_xy = (xy - geom.c) @ binv.T
        ref = np.column_stack([that, ref_xy])
        return coeffs @ basis.values(ref)

    phys = geom.to_physical(pts)
    t, xy = phys[:, 0], phys[:, 1:]
    fd = np.empty((3, len(pts)))
    fd[0] = (f_phys(t + h, xy) - f_phys(t - h, xy)) / (2 * h)
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        fd[d + 1] = (f_phys(t, xy + e) - f_phys(t, xy - e)) / (2 * h)
    scale = np.max(np.abs(got)) + 1.0
    assert np.max(np.abs(fd - got)) / scale < 1e-7


def test_degenerate_jacobian_rejected():
    geom = PrismGeometry(B=np.array([[1.0, 2.0], [0.5, 1.0]]),
                         c=np.zeros(2), t_start=0.0, dt=1.0)
    basis = make_basis(SpaceKind.PRISM_PP, 1)
    with pytest.raises(ValueError, match="degenerate"):
        eval_mapped(basis, geom, np.array([[0.0, 0.2, 0.2]]))
