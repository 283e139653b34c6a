import numpy as np
import pytest

from semitunnel.mesh import (DomainSpec, MeshError, build_domain, discrete_gradient, laplace_beltrami,
                             metric_norm2)


def test_interval_volume_exact():
    g = build_domain(DomainSpec("interval", (-2, 2), (401,)))
    assert g.total_volume == pytest.approx(4.0, abs=1e-13)


def test_sphere_area():
    g = build_domain(DomainSpec("sphere_latlong", (1.0,), (64, 128), "closed_surface"))
    assert abs(g.total_volume - 4 * np.pi) / (4 * np.pi) < 0.01


def test_torus_has_four_neighbours():
    g = build_domain(DomainSpec("torus2d", ((0, 1), (0, 1)), (32, 32), "periodic"))
    assert np.all(g.degree() == 4)
    assert g.is_connected()


@pytest.mark.parametrize("spec", [
    DomainSpec("interval", (-1, 1), (21,)),
    DomainSpec("rectangle", ((-1, 1), (0, 2)), (11, 13)),
    DomainSpec("sphere_latlong", (2.0,), (12, 16), "closed_surface"),
])
def test_constant_has_zero_gradient(spec):
    g = build_domain(spec)
    assert np.abs(discrete_gradient(g, np.full(g.n_nodes, 3.0))).max() < 1e-12


def test_linear_gradient():
    g = build_domain(DomainSpec("interval", (-1, 1), (21,)))
    grad = discrete_gradient(g, g.coords[:, 0])
    np.testing.assert_allclose(grad[1:-1, 0], 1.0, atol=1e-12)


def test_sphere_gradient_norm_second_order():
    errs = []
    for nt in (16, 32, 64):
        g = build_domain(DomainSpec("sphere_latlong", (1.0,), (nt, 2 * nt), "closed_surface"))
        th = g.coords[:, 0]
        n2 = metric_norm2(g, discrete_gradient(g, 1 - np.cos(th)))
        errs.append(np.abs(n2 - np.sin(th) ** 2).max())
    order = np.log2(errs[0] / errs[1]), np.log2(errs[1] / errs[2])
    assert min(order) > 1.8


def test_sphere_laplacian_of_y10():
    # Delta_S cos(theta) = -2 cos(theta)
    g = build_domain(DomainSpec("sphere_latlong", (1.0,), (64, 128), "closed_surface"))
    f = np.cos(g.coords[:, 0])
    np.testing.assert_allclose(laplace_beltrami(g, f), -2 * f, atol=5e-3)


def test_interpolate_reproduces_linear():
    g = build_domain(DomainSpec("rectangle", ((-1, 1), (-1, 1)), (21, 21)))
    f = 2 * g.coords[:, 0] - g.coords[:, 1]
    p = np.array([[0.13, -0.41], [-0.77, 0.05]])
    np.testing.assert_allclose(g.interpolate(f, p), 2 * p[:, 0] - p[:, 1], atol=1e-12)


def test_sphere_chart_round_trip():
    g = build_domain(DomainSpec("sphere_latlong", (1.0,), (32, 64), "closed_surface"))
    origin = np.array([1.0, 2.0])
    pts = np.array([[1.1, 2.05], [0.9, 1.9]])
    back = g.exp_chart(origin, g.chart(origin, pts))
    np.testing.assert_allclose(back, pts, atol=1e-12)


@pytest.mark.parametrize("kw", [
    dict(kind="disk", extents=(1,), resolution=(10,)),
    dict(kind="interval", extents=(1, -1), resolution=(10,)),
    dict(kind="interval", extents=(-1, 1), resolution=(4,)),
    dict(kind="sphere_latlong", extents=(1,), resolution=(10, 10), boundary="periodic"),
])
def test_bad_specs(kw):
    with pytest.raises(MeshError):
        DomainSpec(**kw)
