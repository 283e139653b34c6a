import numpy as np
import pytest

from semitunnel import eig
from semitunnel.agmon import fast_march, pair_geometry
from semitunnel.asymptotics import (AsymptoticsError, agmon_decay_check, fit_sweep, leading_I0,
                                    transport_amplitude, trust_window, weighted_norm)
from semitunnel.mesh import DomainSpec
from semitunnel.operators import assemble, dirichlet_restrict, well_region
from semitunnel.potential import evaluate_endomorphism, find_wells

from conftest import QUARTIC, problem

# closed-form I_0 magnitudes: 2 sqrt(V) a_j a_k on H times det(D2)^(-1/2) (2 pi)^((n-l-1)/2)
I0_QUARTIC = 8 * np.sqrt(2 / np.pi)
I0_SPHERE = 16.0
I0_PLANAR = 2 ** 3.5 / np.sqrt(np.pi)


def wkb_pair(fields, expr, W=None):
    return [transport_amplitude(f, potential=expr, W=W, others=[o for o in fields if o is not f]) for f in fields]


def test_harmonic_well_amplitude_is_constant():
    g, V = problem(DomainSpec("interval", (-2, 2), (801,)), "x^2")
    f = fast_march(g, V, find_wells(V, g)[0])
    w = transport_amplitude(f, potential="x^2")
    a = w.a0[np.isfinite(w.a0)]
    np.testing.assert_allclose(a, np.pi ** -0.25, rtol=1e-4)


def test_amplitude_matches_dirichlet_ground_state(dw1d):
    hb = 0.08
    g, F, wells = dw1d["graph"], dw1d["fields"], dw1d["wells"]
    S = dw1d["pair"].S
    w = wkb_pair(F, QUARTIC)[0]
    op = assemble(g, dw1d["V"], hbar=hb)
    v = eig.low_spectrum(dirichlet_restrict(op, well_region(F, 0, 0.15 * S), wells=wells), 1)[0].vector[:, 0]
    v = v * np.sign(v[wells[0].node])
    sel = (F[0].d <= 0.8 * S) & np.isfinite(w.a0)
    approx = hb ** 0.25 * np.exp(F[0].d[sel] / hb) * v[sel]
    assert np.abs(approx - w.a0[sel]).max() <= 0.1 * np.nanmax(w.a0[sel])


def test_constant_bundle_branches_match_scalar(dw1d):
    g, F = dw1d["graph"], dw1d["fields"]
    W = evaluate_endomorphism([["-0.3", "0"], ["0", "0.3"]], g)
    wells = find_wells(dw1d["V"], g, W)
    f = fast_march(g, dw1d["V"], wells[0])
    scalar = transport_amplitude(F[0], potential=QUARTIC, others=[F[1]]).a0
    for branch in (0, 1):
        a = transport_amplitude(f, potential=QUARTIC, W=W, branch=branch, others=[F[1]]).a0
        ok = np.isfinite(scalar)
        np.testing.assert_allclose(a[ok], scalar[ok], rtol=1e-6)


def test_repeated_branch_rejected(dw1d):
    g = dw1d["graph"]
    W = evaluate_endomorphism([["0.2", "0"], ["0", "0.2"]], g)
    wells = find_wells(dw1d["V"], g, W)
    f = fast_march(g, dw1d["V"], wells[0])
    with pytest.raises(AsymptoticsError):
        transport_amplitude(f, potential=QUARTIC, W=W)


def test_quartic_I0(dw1d):
    wj, wk = wkb_pair(dw1d["fields"], QUARTIC)
    lo = leading_I0(dw1d["pair"], wj, wk)
    assert lo.ell == 0
    assert abs(abs(lo.I0) - I0_QUARTIC) / I0_QUARTIC < 1e-3


def test_sphere_I0(sphere):
    wj, wk = wkb_pair(sphere["fields"], "sin(theta)^2")
    lo = leading_I0(sphere["pair"], wj, wk)
    assert lo.ell == 1
    assert abs(abs(lo.I0) - I0_SPHERE) / I0_SPHERE < 0.01


def test_planar_I0():
    g, V = problem(DomainSpec("rectangle", ((-2, 2), (-1.5, 1.5)), (161, 121)), "(x^2-1)^2 + y^2")
    F = [fast_march(g, V, w) for w in find_wells(V, g)]
    wj, wk = wkb_pair(F, "(x^2-1)^2 + y^2")
    lo = leading_I0(pair_geometry(*F), wj, wk)
    assert lo.details["det_D2"][0] == pytest.approx(2.0, rel=1e-3)
    assert abs(abs(lo.I0) - I0_PLANAR) / I0_PLANAR < 0.01


def test_I0_symmetric_under_swap(dw1d):
    wj, wk = wkb_pair(dw1d["fields"], QUARTIC)
    a = leading_I0(dw1d["pair"], wj, wk).I0
    b = leading_I0(pair_geometry(dw1d["fields"][1], dw1d["fields"][0]), wk, wj).I0
    assert abs(a - b) <= 1e-10 * abs(a)


def test_fit_recovers_synthetic_law():
    h = np.array([0.1, 0.09, 0.08, 0.07, 0.06, 0.05])
    fit = fit_sweep(h, 3 * h ** 0.5 * np.exp(-2 / h))
    assert fit.S == pytest.approx(2.0, abs=1e-10)
    assert fit.p == pytest.approx(0.5, abs=1e-10)
    assert fit.c == pytest.approx(np.log(3), abs=1e-10)


@pytest.mark.parametrize("h,d", [
    ([0.1, 0.09, 0.08], [1e-3, 1e-4, 1e-5]),
    ([0.1, 0.1, 0.1, 0.1], [1e-3, 1e-3, 1e-3, 1e-3]),
    ([0.1, 0.09, 0.08, 0.07], [1e-3, -1e-4, 1e-5, 1e-6]),
])
def test_fit_rejects_bad_input(h, d):
    with pytest.raises(AsymptoticsError):
        fit_sweep(h, d)


def test_trust_window():
    h = [0.5, 0.1, 0.05]
    mask = trust_window(h, 2.0, [1e-2, 1e-6, 1e-20], [1e-18] * 3)
    assert mask.tolist() == [False, True, False]


def test_flat_weight_is_the_norm(dw1d):
    g = dw1d["graph"]
    op = assemble(g, dw1d["V"], hbar=0.1)
    v = eig.low_spectrum(dirichlet_restrict(op, g.coords[:, 0] < 0), 1)[0]
    nrm, excl = weighted_norm(v, dw1d["fields"][0], 0.1, eps=1.0)
    assert nrm == pytest.approx(1.0, rel=1e-12) and excl == 0.0


def test_harmonic_decay_exponent():
    g, V = problem(DomainSpec("interval", (-3, 3), (1201,)), "x^2")
    f = fast_march(g, V, find_wells(V, g)[0])
    hs = [0.14, 0.12, 0.1, 0.08, 0.06]
    modes = [eig.low_spectrum(assemble(g, V, hbar=h), 1)[0] for h in hs]
    chk = agmon_decay_check(modes, f, hs)
    assert np.isfinite(chk.N0) and chk.N0 <= 1 / 2 + 1
