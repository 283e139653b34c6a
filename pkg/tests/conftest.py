import numpy as np
import pytest

from semitunnel.agmon import fast_march, pair_geometry
from semitunnel.mesh import DomainSpec, build_domain
from semitunnel.potential import evaluate_field, find_wells

QUARTIC = "(1-x^2)^2"


def problem(spec: DomainSpec, expr: str):
    g = build_domain(spec)
    V = evaluate_field(expr, g)
    return g, V


@pytest.fixture(scope="session")
def dw1d():
    """Quartic double well on [-2, 2], 1001 nodes, with both Agmon fields and the pair."""
    g, V = problem(DomainSpec("interval", (-2, 2), (1001,)), QUARTIC)
    wells = find_wells(V, g)
    fields = [fast_march(g, V, w) for w in wells]
    return {"graph": g, "V": V, "wells": wells, "fields": fields, "pair": pair_geometry(*fields)}


@pytest.fixture(scope="session")
def sphere():
    g, V = problem(DomainSpec("sphere_latlong", (1.0,), (64, 128), "closed_surface"), "sin(theta)^2")
    wells = find_wells(V, g)
    fields = [fast_march(g, V, w) for w in wells]
    return {"graph": g, "V": V, "wells": wells, "fields": fields, "pair": pair_geometry(*fields)}


def rel(a, b):
    return abs(a - b) / abs(b)


def assert_close(a, b, rtol):
    np.testing.assert_allclose(a, b, rtol=rtol)
