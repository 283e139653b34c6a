import numpy as np
import pytest

from semitunnel.mesh import DomainSpec, build_domain
from semitunnel.potential import (DegenerateWellError, NoWellsError, WellError, evaluate_endomorphism,
                                  evaluate_field, find_wells)

from conftest import QUARTIC, problem


def test_quartic_double_well():
    g, V = problem(DomainSpec("interval", (-2, 2), (801,)), QUARTIC)
    wells = find_wells(V, g)
    assert [round(float(w.coords[0]), 9) for w in wells] == [-1.0, 1.0]
    for w in wells:
        assert w.hessian_eigs[0] == pytest.approx(8.0, rel=1e-6)
        assert w.lam[0] == pytest.approx(2.0, rel=1e-6)
        assert w.amplitude_at_well() == pytest.approx((2 / np.pi) ** 0.25, rel=1e-6)


def test_quartic_minimum_is_degenerate():
    g, V = problem(DomainSpec("interval", (-1, 1), (201,)), "x^4")
    with pytest.raises(DegenerateWellError):
        find_wells(V, g)


def test_sphere_poles():
    g, V = problem(DomainSpec("sphere_latlong", (1.0,), (32, 64), "closed_surface"), "sin(theta)^2")
    wells = find_wells(V, g)
    assert [w.node for w in wells] == list(g.pole_nodes)
    for w in wells:
        np.testing.assert_allclose(w.lam, [1.0, 1.0], rtol=1e-3)


def test_anisotropic_planar_well():
    g, V = problem(DomainSpec("rectangle", ((-2, 2), (-1.5, 1.5)), (81, 61)), "(x^2-1)^2 + y^2")
    wells = find_wells(V, g)
    assert len(wells) == 2
    np.testing.assert_allclose(wells[0].lam, [1.0, 2.0], rtol=1e-4)


def test_endomorphism_eigenvalues_recorded():
    g, V = problem(DomainSpec("interval", (-2, 2), (401,)), QUARTIC)
    W = evaluate_endomorphism([["-0.3", "0"], ["0", "0.3"]], g)
    assert W.shape == (g.n_nodes, 2, 2)
    wells = find_wells(V, g, W)
    np.testing.assert_allclose(wells[0].w_eigs, [-0.3, 0.3])


def test_nonsymmetric_endomorphism_rejected():
    g = build_domain(DomainSpec("interval", (-1, 1), (11,)))
    with pytest.raises(WellError):
        evaluate_endomorphism([["0", "x"], ["0", "0"]], g)


def test_negative_potential_rejected():
    g, V = problem(DomainSpec("interval", (-1, 1), (11,)), "x^2 - 0.5")
    with pytest.raises(WellError):
        find_wells(V, g)


def test_no_zero():
    g, V = problem(DomainSpec("interval", (-1, 1), (11,)), "x^2 + 1")
    with pytest.raises(NoWellsError):
        find_wells(V, g)
