import json

import numpy as np
import pytest

from semitunnel import eig
from semitunnel.agmon import fast_march, pair_geometry
from semitunnel.interaction import (InteractionMatrix, build_interaction, predicted_spectrum, two_level,
                                    w_commutator, w_surface)
from semitunnel.mesh import DomainSpec
from semitunnel.operators import assemble, dirichlet_restrict, make_cutoff, well_region
from semitunnel.potential import evaluate_endomorphism, find_wells

from conftest import problem


def dirichlet_modes(op, fields, wells, rho, count=1):
    out = {}
    for j in range(len(wells)):
        sub = dirichlet_restrict(op, well_region(fields, j, rho), wells=wells)
        out[j] = eig.low_spectrum(sub, count)
    return out


@pytest.fixture(scope="module")
def dw(dw1d):
    S = dw1d["pair"].S
    cut = {j: make_cutoff(f, 0.55 * S, 0.8 * S) for j, f in enumerate(dw1d["fields"])}
    return dict(dw1d, S=S, cut=cut)


def ground(dw, hb):
    op = assemble(dw["graph"], dw["V"], hbar=hb)
    return op, dirichlet_modes(op, dw["fields"], dw["wells"], 0.15 * dw["S"])


def test_commutator_vanishes_for_identical_inputs(dw):
    _, m = ground(dw, 0.1)
    v = m[0][0]
    assert abs(w_commutator(dw["graph"], 0.1, v, dw["cut"][0], v, dw["cut"][0])) < 1e-12


def test_forms_agree(dw):
    _, m = ground(dw, 0.1)
    wc = w_commutator(dw["graph"], 0.1, m[0][0], dw["cut"][0], m[1][0], dw["cut"][1])
    ws = w_surface(dw["pair"], 0.1, m[0][0], m[1][0])
    assert abs(wc - ws) / abs(ws) < 0.02


def test_splitting_and_surface_independence(dw):
    hb = 0.08
    op, m = ground(dw, hb)
    delta = eig.splitting(op, eig.low_spectrum(op, 2))
    im = build_interaction(dw["graph"], hb, m, dw["cut"], {(0, 1): dw["pair"]})
    assert im.forms[0][1] == "surface"
    assert abs(2 * abs(im.w_tilde[0, 1]) - delta) / delta < 0.05
    base = w_surface(dw["pair"], hb, m[0][0], m[1][0])
    for s in (-0.1, 0.1):
        assert abs(w_surface(dw["pair"], hb, m[0][0], m[1][0], shift=s * dw["S"]) - base) / abs(base) < 0.01


def test_swap_with_reversed_normal(dw):
    _, m = ground(dw, 0.1)
    rev = pair_geometry(dw["fields"][1], dw["fields"][0])
    a = w_surface(dw["pair"], 0.1, m[0][0], m[1][0])
    b = w_surface(rev, 0.1, m[1][0], m[0][0])
    assert abs(a - b) <= 1e-10 * abs(a)


def test_two_well_matrix(dw):
    _, m = ground(dw, 0.1)
    im = build_interaction(dw["graph"], 0.1, m, dw["cut"], {(0, 1): dw["pair"]})
    assert im.m_tilde.shape == (2, 2)
    assert im.m_tilde[0, 1] == im.m_tilde[1, 0]
    assert np.isrealobj(im.m_tilde)


def test_rank_two_matrix_hermitian():
    g, V = problem(DomainSpec("interval", (-2, 2), (1001,)), "(1-x^2)^2")
    W = evaluate_endomorphism([["-0.3", "0"], ["0", "0.3"]], g)
    wells = find_wells(V, g, W)
    F = [fast_march(g, V, w) for w in wells]
    pg = pair_geometry(*F)
    S = pg.S
    cut = {j: make_cutoff(f, 0.55 * S, 0.8 * S) for j, f in enumerate(F)}
    op = assemble(g, V, W, hbar=0.08)
    m = dirichlet_modes(op, F, wells, 0.15 * S, count=2)
    im = build_interaction(g, 0.08, m, cut, {(0, 1): pg})
    mt = im.m_tilde
    assert mt.shape == (4, 4)
    assert np.array_equal(mt, mt.T)


def test_nearest_neighbours_dominate():
    g, V = problem(DomainSpec("interval", (-1.9, 1.9), (1201,)), "sin(pi*x)^2")
    wells = find_wells(V, g)
    F = [fast_march(g, V, w) for w in wells]
    S01 = F[0].at(wells[1].coords[None])[0]
    S02 = F[0].at(wells[2].coords[None])[0]
    cut = {j: make_cutoff(f, 0.55 * S01, 0.8 * S01) for j, f in enumerate(F)}
    hb = 0.1
    op = assemble(g, V, hbar=hb)
    m = dirichlet_modes(op, F, wells, 0.15 * S01)
    im = build_interaction(g, hb, m, cut)
    assert abs(im.w_tilde[0, 1]) >= np.exp((S02 - S01) / hb) / 2 * abs(im.w_tilde[0, 2])


def test_predicted_spectrum_symmetric_pair():
    im = InteractionMatrix(index=[(0, 0), (1, 0)], mu=np.array([0.5, 0.5]),
                           w=np.array([[0.0, -0.01], [-0.01, 0.0]]), gram=np.eye(2), forms=[["diag"] * 2] * 2)
    np.testing.assert_allclose(predicted_spectrum(im), [0.49, 0.51], rtol=1e-14)


def test_two_level_closed_form():
    lo, hi, split = two_level(1.0, 1.0001, 1e-6)
    ev = np.linalg.eigvalsh(np.array([[1.0, 1e-6], [1e-6, 1.0001]]))
    assert abs(lo - ev[0]) < 1e-12 and abs(hi - ev[1]) < 1e-12
    assert split == pytest.approx(2 * np.hypot(0.5e-4, 1e-6), rel=1e-12)


def test_json_round_trip(dw):
    _, m = ground(dw, 0.1)
    im = build_interaction(dw["graph"], 0.1, m, dw["cut"], {(0, 1): dw["pair"]})
    back = InteractionMatrix.from_dict(json.loads(im.to_json()))
    np.testing.assert_array_equal(back.w, im.w)
    np.testing.assert_array_equal(back.mu, im.mu)
    assert back.index == im.index and back.forms == im.forms
