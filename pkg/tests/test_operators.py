import numpy as np
import pytest

from semitunnel import eig
from semitunnel.agmon import fast_march
from semitunnel.mesh import DomainSpec, build_domain
from semitunnel.operators import (OperatorError, PartitionError, RegionError, angular_partition,
                                  assemble, conjugate, dirichlet_restrict, ims_residual, make_cutoff,
                                  smoothstep_profile, weighted_identity_residual)
from semitunnel.potential import find_wells

from conftest import QUARTIC, problem


def lowest(op, k):
    return np.array([p.value for p in eig.low_spectrum(op, k)])


def test_periodic_fourier_modes():
    g = build_domain(DomainSpec("interval", (0, 1), (400,), "periodic"))
    op = assemble(g, np.zeros(g.n_nodes), hbar=1.0)
    ev = lowest(op, 5)
    exact = np.array([0, 1, 1, 2, 2]) ** 2 * (2 * np.pi) ** 2
    np.testing.assert_allclose(ev, exact, atol=1e-12, rtol=1e-3)


def test_sphere_spherical_harmonics():
    g = build_domain(DomainSpec("sphere_latlong", (1.0,), (64, 128), "closed_surface"))
    op = assemble(g, np.zeros(g.n_nodes), hbar=1.0)
    ev = lowest(op, 9)
    assert abs(ev[0]) < 1e-8
    np.testing.assert_allclose(ev[1:4], 2.0, rtol=0.02)
    np.testing.assert_allclose(ev[4:9], 6.0, rtol=0.02)


@pytest.mark.parametrize("spec,expr", [
    (DomainSpec("interval", (-2, 2), (201,)), QUARTIC),
    (DomainSpec("rectangle", ((-2, 2), (-1, 1)), (31, 21)), "(x^2-1)^2 + y^2"),
    (DomainSpec("sphere_latlong", (1.0,), (16, 32), "closed_surface"), "sin(theta)^2"),
])
def test_matrix_exactly_symmetric(spec, expr):
    g, V = problem(spec, expr)
    A = assemble(g, V, hbar=0.1).matrix
    assert (A != A.T).nnz == 0


def test_dirichlet_sine_modes():
    g = build_domain(DomainSpec("interval", (0, 1), (401,)))
    op = assemble(g, np.zeros(g.n_nodes), hbar=1.0)
    np.testing.assert_allclose(lowest(op, 3), (np.arange(1, 4) * np.pi) ** 2, rtol=1e-4)


def test_interlacing(dw1d):
    g = dw1d["graph"]
    op = assemble(g, dw1d["V"], hbar=0.1)
    sub = dirichlet_restrict(op, g.coords[:, 0] < 0.3)
    full, part = lowest(op, 6), lowest(sub, 6)
    assert np.all(part >= full)


def test_left_well_ground_state():
    g, V = problem(DomainSpec("interval", (-2, 2), (801,)), QUARTIC)
    op = assemble(g, V, hbar=0.05)
    sub = dirichlet_restrict(op, lambda X: X[:, 0] <= 0)
    assert abs(lowest(sub, 1)[0] - 0.1) / 0.1 < 0.15


def test_region_must_hold_one_well(dw1d):
    op = assemble(dw1d["graph"], dw1d["V"], hbar=0.1)
    with pytest.raises(RegionError):
        dirichlet_restrict(op, np.ones(dw1d["graph"].n_nodes, dtype=bool), wells=dw1d["wells"])


def test_conjugation_by_zero_is_identity(dw1d):
    op = assemble(dw1d["graph"], dw1d["V"], hbar=0.1)
    c = conjugate(op, np.zeros(dw1d["graph"].n_nodes))
    assert abs(c.matrix - op.matrix).max() == 0


def test_conjugation_preserves_spectrum():
    g, V = problem(DomainSpec("interval", (-2, 2), (201,)), QUARTIC)
    op = assemble(g, V, hbar=0.2)
    c = conjugate(op, 0.3 * g.coords[:, 0])
    a = np.sort(np.linalg.eigvals(c.matrix.toarray()).real)[:5]
    b = lowest(op, 5)
    np.testing.assert_allclose(a, b, rtol=1e-8)


def test_conjugated_first_order_part(dw1d):
    # e^{d/h} H e^{-d/h} f = H f - d'^2 f + h (2 d' f' + d'' f), with d' = 1 - x^2 left of x = 1
    g = dw1d["graph"]
    hb = 0.1
    op = assemble(g, dw1d["V"], hbar=hb)
    d = dw1d["fields"][0].d
    x = g.coords[:, 0]
    f = np.exp(-(x + 0.5) ** 2)
    c = conjugate(op, d)
    lhs = c.to_field(c.matrix @ op.to_vector(f))[:, 0] - op.apply(f)[:, 0] + (1 - x * x) ** 2 * f
    rhs = hb * (2 * (1 - x * x) * (-2 * (x + 0.5)) * f + (-2 * x) * f)
    sel = (x > -1.9) & (x < 0.8)
    assert np.abs(lhs - rhs)[sel].max() < 20 * g.h


def test_weighted_identity_exact_without_weight(dw1d):
    g = dw1d["graph"]
    op = assemble(g, dw1d["V"], hbar=0.1)
    x = g.coords[:, 0]
    v = np.exp(-4 * (x + 1) ** 2) * (np.abs(x) < 1.9)
    assert weighted_identity_residual(op, np.zeros(g.n_nodes), 0.3, v, relative=True) <= 1e-10


def test_weighted_identity_second_order():
    res, hs = [], []
    for n in (401, 801, 1601):
        g, V = problem(DomainSpec("interval", (-2, 2), (n,)), QUARTIC)
        x = g.coords[:, 0]
        v = np.exp(-4 * (x + 1) ** 2) * (np.abs(x) < 1.9) * np.cos(np.pi * x / 4) ** 4
        res.append(weighted_identity_residual(assemble(g, V, hbar=0.1), 0.3 * x, 0.2, v, relative=True))
        hs.append(g.h)
    assert np.polyfit(np.log(hs), np.log(res), 1)[0] >= 1.8


def test_weighted_identity_agmon_weight():
    # h = 1/400; the measured value is 1.2e-6
    g, V = problem(DomainSpec("interval", (-2, 2), (1601,)), QUARTIC)
    wells = find_wells(V, g)
    f = fast_march(g, V, wells[0])
    op = assemble(g, V, hbar=0.1)
    sub = dirichlet_restrict(op, g.coords[:, 0] < 0)
    v = eig.low_spectrum(sub, 1)[0].vector[:, 0]
    assert weighted_identity_residual(op, f.d, 0.2, v, relative=True) <= 1e-3


def test_ims_trivial_partition(dw1d):
    op = assemble(dw1d["graph"], dw1d["V"], hbar=0.1)
    assert ims_residual(op, [np.ones(dw1d["graph"].n_nodes)]) == 0.0


def test_ims_rejects_non_partition(dw1d):
    op = assemble(dw1d["graph"], dw1d["V"], hbar=0.1)
    with pytest.raises(PartitionError):
        ims_residual(op, [np.full(dw1d["graph"].n_nodes, 0.5)])


def test_ims_second_order_and_hbar_scaling():
    res, hs = {}, []
    for n in (401, 801, 1601):
        g, V = problem(DomainSpec("interval", (-2, 2), (n,)), QUARTIC)
        f = fast_march(g, V, find_wells(V, g)[0])
        parts = angular_partition(f, 0.5, 1.0)
        for hb in (0.1, 0.05):
            res.setdefault(hb, []).append(ims_residual(assemble(g, V, hbar=hb), parts,
                                                       probe=np.exp(-g.coords[:, 0] ** 2)))
        hs.append(g.h)
    assert np.polyfit(np.log(hs), np.log(res[0.1]), 1)[0] >= 1.8
    np.testing.assert_allclose(np.array(res[0.1]) / 0.1 ** 2, np.array(res[0.05]) / 0.05 ** 2, rtol=1e-8)


def test_cutoff_shape(dw1d):
    g = dw1d["graph"]
    f = dw1d["fields"][0]
    c = make_cutoff(f, 0.3, 0.6)
    assert np.all(c.chi[f.d <= 0.3] == 1.0)
    assert np.all(c.chi[f.d >= 0.6] == 0.0)
    assert smoothstep_profile(np.array([0.5]))[0] == pytest.approx(0.5)
    grad2 = c.grad_norm2(g)
    # one-cell stencil reaches just past the shell
    outside = (f.d < 0.3 - 2 * g.h) | (f.d > 0.6 + 2 * g.h)
    assert np.all(grad2[outside] == 0.0)


def test_cutoff_radii_validated(dw1d):
    f = dw1d["fields"][0]
    with pytest.raises(OperatorError):
        make_cutoff(f, 0.6, 0.3)
    with pytest.raises(OperatorError):
        make_cutoff(f, 0.5, 1.5, others=[4 / 3])
