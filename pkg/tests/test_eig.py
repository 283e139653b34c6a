import numpy as np
import pytest

from semitunnel import eig
from semitunnel.mesh import DomainSpec, build_domain
from semitunnel.operators import assemble, dirichlet_restrict
from semitunnel.potential import find_wells

from conftest import QUARTIC, problem


def values(pairs):
    return np.array([p.value for p in pairs])


def test_sine_modes():
    g = build_domain(DomainSpec("interval", (0, 1), (801,)))
    op = assemble(g, np.zeros(g.n_nodes), hbar=1.0)
    np.testing.assert_allclose(values(eig.low_spectrum(op, 2)), [np.pi ** 2, 4 * np.pi ** 2], rtol=1e-5)


def test_oscillator_levels():
    # -h^2 d^2 + 4 x^2 has levels 2 h (2 k + 1)
    g, V = problem(DomainSpec("interval", (-3, 3), (1201,)), "4*x^2")
    ev = values(eig.low_spectrum(assemble(g, V, hbar=0.1), 3))
    np.testing.assert_allclose(ev, [0.2, 0.6, 1.0], rtol=5e-3)


def test_dense_and_lanczos_agree():
    g, V = problem(DomainSpec("rectangle", ((-2, 2), (-1.5, 1.5)), (41, 31)), "(x^2-1)^2 + y^2")
    op = assemble(g, V, hbar=0.2)
    a = values(eig.low_spectrum(op, 4, method="dense"))
    b = values(eig.low_spectrum(op, 4, method="lanczos"))
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_lanczos_is_reproducible():
    g, V = problem(DomainSpec("rectangle", ((-2, 2), (-1.5, 1.5)), (61, 41)), "(x^2-1)^2 + y^2")
    op = assemble(g, V, hbar=0.15)
    a = eig.low_spectrum(op, 3, method="lanczos", seed=4)
    b = eig.low_spectrum(op, 3, method="lanczos", seed=4)
    for p, q in zip(a, b):
        assert p.value == q.value
        np.testing.assert_array_equal(p.vector, q.vector)


def test_window_restricts_output():
    g, V = problem(DomainSpec("interval", (-3, 3), (601,)), "4*x^2")
    op = assemble(g, V, hbar=0.1)
    got = values(eig.low_spectrum(op, 5, window=(0.5, 1.1)))
    np.testing.assert_allclose(got, [0.6, 1.0], rtol=1e-2)


@pytest.mark.parametrize("well,expected", [
    (([1.0], [0.0]), [1, 3, 5]),
    (([2.0], [0.0]), [2, 6, 10]),
    (([1.0, 1.0], [-0.3, 0.3]), [1.7, 2.3, 3.7, 3.7, 4.3, 4.3]),
])
def test_harmonic_levels(well, expected):
    lv = eig.harmonic_levels(well, len(expected))
    np.testing.assert_allclose([x.energy_over_hbar for x in lv[:len(expected)]], expected, atol=1e-12)


def test_quartic_well_square_root_convention():
    # lambda = sqrt(V''/2) / ... : a dense oscillator solve fixes e_0 = 2 for V = (1-x^2)^2
    g, V = problem(DomainSpec("interval", (-2, 2), (2001,)), QUARTIC)
    w = find_wells(V, g)[0]
    e = [x.energy_over_hbar for x in eig.harmonic_levels(w, 3)]
    np.testing.assert_allclose(e, [2, 6, 10], rtol=1e-6)
    gx, Vx = problem(DomainSpec("interval", (-3, 3), (1201,)), "4*x^2")
    ev = values(eig.low_spectrum(assemble(gx, Vx, hbar=0.05), 3)) / 0.05
    np.testing.assert_allclose(ev, e, rtol=5e-3)


def test_single_well_ground_level():
    g, V = problem(DomainSpec("interval", (-3, 3), (1201,)), "x^2")
    wells = find_wells(V, g)
    chk = eig.harmonic_check(lambda h: assemble(g, V, hbar=h), wells, [0.1], 1)
    assert abs(chk.rows[0]["E"] - 0.1) / 0.1 < 0.01


def test_pooled_levels_sorted(dw1d):
    lv = eig.pooled_levels(dw1d["wells"], 4)
    assert [x.energy_over_hbar for x in lv[:4]] == pytest.approx([2, 2, 6, 6])
    assert {x.well for x in lv[:2]} == {0, 1}


def test_clusters_and_window():
    vals = [1.0, 1.0 + 1e-9, 3.0, 3.0 + 2e-9, 5.0]
    assert eig.spectral_clusters(vals, 1.0) == [[0, 1], [2, 3], [4]]
    lo, hi = eig.select_window(vals, 1.0, 2)
    assert lo < 1.0 and 1.0 + 1e-9 < hi < 3.0
    with pytest.raises(eig.WindowError):
        eig.select_window(vals[:2], 1.0, 2)


def test_refined_splitting_beats_float64(dw1d):
    g = dw1d["graph"]
    op = assemble(g, dw1d["V"], hbar=0.05)
    pairs = eig.low_spectrum(op, 2)
    delta = eig.splitting(op, pairs)
    # the splitting is below float64 resolution of the eigenvalues themselves
    assert 0 < delta < 1e-9
    assert delta > 1e3 * eig.noise_floor(op)


def test_essential_floor_blocks_high_levels():
    g, V = problem(DomainSpec("interval", (-1.9, 1.9), (801,)), "sin(pi*x)^2")
    wells = find_wells(V, g)
    with pytest.raises(eig.EigenError):
        eig.harmonic_check(lambda h: assemble(g, V, hbar=h), wells, [0.1], 4)


def test_dirichlet_modes_are_node_fields(dw1d):
    g = dw1d["graph"]
    op = assemble(g, dw1d["V"], hbar=0.1)
    sub = dirichlet_restrict(op, g.coords[:, 0] < 0)
    p = eig.low_spectrum(sub, 1)[0]
    assert p.vector.shape == (g.n_nodes, 1)
    assert np.all(p.vector[g.coords[:, 0] >= 0] == 0)
    assert np.sum(g.volume * p.vector[:, 0] ** 2) == pytest.approx(1.0, rel=1e-12)
