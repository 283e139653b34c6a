import numpy as np
import pytest

from semitunnel import kernels
from semitunnel.agmon import fast_march, trace_geodesics
from semitunnel.asymptotics import transport_amplitude
from semitunnel.mesh import DomainSpec, build_domain
from semitunnel.potential import evaluate_field, find_wells

pytestmark = pytest.mark.skipif(kernels.BACKEND != "numba", reason="numba not active")

EXPR = "(x^2 - 1)^2 + y^2"


@pytest.fixture
def pure_python(monkeypatch):
    def swap():
        for name in dir(kernels):
            fn = getattr(kernels, name)
            if hasattr(fn, "py_func"):
                monkeypatch.setattr(kernels, name, fn.py_func)
    return swap


def run_all(g, V, wells):
    f = [fast_march(g, V, w) for w in wells]
    starts = g.coords[np.flatnonzero(f[0].d < f[1].d)[::11]]
    tr = trace_geodesics(f[0], starts, strict=False)
    a0 = transport_amplitude(f[0], potential=EXPR, others=[f[1]], max_traces=40).a0
    return f, tr, a0


def test_compiled_and_python_paths_agree(pure_python):
    g = build_domain(DomainSpec("rectangle", ((-2, 2), (-1.5, 1.5)), (41, 31)))
    V = evaluate_field(EXPR, g)
    wells = find_wells(V, g)
    fn, trn, an = run_all(g, V, wells)
    pure_python()
    fp, trp, ap = run_all(g, V, wells)
    for a, b in zip(fn, fp):
        np.testing.assert_allclose(a.d, b.d, rtol=1e-12, atol=1e-14)
    assert len(trn) == len(trp)
    for a, b in zip(trn, trp):
        assert (a is None) == (b is None)
        if a is not None:
            np.testing.assert_allclose(a.points, b.points, rtol=1e-10, atol=1e-12)
            assert a.agmon_length == pytest.approx(b.agmon_length, rel=1e-10)
    ok = np.isfinite(an)
    assert np.array_equal(ok, np.isfinite(ap))
    np.testing.assert_allclose(an[ok], ap[ok], rtol=1e-10)


def test_interp_kernel_parity():
    g = build_domain(DomainSpec("torus2d", ((0, 1), (0, 1)), (16, 12), "periodic"))
    F = np.sin(2 * np.pi * g.coords[:, 0]) * np.cos(2 * np.pi * g.coords[:, 1])
    pts = np.random.default_rng(3).uniform(-0.5, 1.5, size=(50, 2))
    a = g.interpolate(F, pts)
    b = kernels.interp_grid_kernel.py_func(g.grid_values(F), pts, g.grid_origin, g.grid_spacing, g.grid_periodic)
    np.testing.assert_allclose(a, b, rtol=1e-13)
