"""Agmon distances by fast marching, geodesic back-tracing and well-pair geometry."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Union

import numpy as np

from . import kernels
from .mesh import DomainGraph, discrete_gradient, laplace_beltrami, metric_norm2
from .potential import WellInfo

SEED_HOPS = 5
TAU_CONSTANT = 4.0


class AgmonError(ValueError):
    pass


class GeodesicTraceError(AgmonError):
    pass


class PairGeometryError(AgmonError):
    pass


def fm_tolerance(graph: DomainGraph, V: np.ndarray) -> float:
    """tau_FM = C h^(1/2) max sqrt(V) with C = 4 and h the largest edge length."""
    return float(TAU_CONSTANT * np.sqrt(graph.h_max) * np.sqrt(np.max(V)))


@dataclass(frozen=True, eq=False)
class AgmonField:
    graph: DomainGraph
    V: np.ndarray
    d: np.ndarray
    source: int
    well: Optional[WellInfo]
    accepted_order: np.ndarray
    upwind_grad: np.ndarray
    seed_nodes: np.ndarray
    d_stop: float               # level below which the quadratic model is used
    tau_fm: float
    seed_hops: int = 0

    @cached_property
    def grad(self) -> np.ndarray:
        """Centered coordinate gradient of d."""
        return discrete_gradient(self.graph, self.d)

    @cached_property
    def laplacian(self) -> np.ndarray:
        """Delta d; the quadratic model value tr A is used on the seeded region."""
        lap = laplace_beltrami(self.graph, self.d)
        if self.well is not None:
            lap[self.seed_nodes] = np.trace(self.well.A)
        return lap

    def upwind_norm2(self) -> np.ndarray:
        return metric_norm2(self.graph, self.upwind_grad)

    def at(self, points) -> np.ndarray:
        return self.graph.interpolate(self.d, points)

    def smooth_region(self, others=(), kappa: float = 20.0) -> np.ndarray:
        """Nodes closer to this source than to any other and with bounded Delta d.

        This is the discrete stand-in for the region where the eikonal solution
        is smooth: cut-locus kinks show up as |Delta d| of order 1/h.
        """
        mask = np.ones(self.graph.n_nodes, dtype=bool)
        for other in others:
            mask &= self.d < other.d
        ref = np.trace(self.well.A) if self.well is not None else 1.0
        mask &= np.abs(self.laplacian) <= kappa * max(ref, 1.0)
        return mask

    def to_rows(self):
        for i in range(self.graph.n_nodes):
            yield (i, *self.graph.coords[i].tolist(), float(self.d[i]))


def fast_march(graph: DomainGraph, V: np.ndarray, source: Union[WellInfo, int], *,
               seed_hops: int = SEED_HOPS, order: int = 2) -> AgmonField:
    """Anisotropic fast marching for sum_i (d_i d)^2 / g_i = V.

    With a :class:`WellInfo` source every node within ``seed_hops`` graph steps
    of the well is frozen at the quadratic model value <X, A X>/2.  An integer
    source is a plain point source with d = 0.

    ``order=2`` (default) uses the second-order one-sided difference wherever
    two accepted upwind nodes line up and falls back to the first-order
    stencil elsewhere; ``order=1`` is the classical scheme.  Second
    differences of d (transverse Hessians, Delta d) need the former.
    """
    if order not in (1, 2):
        raise AgmonError("order must be 1 or 2")
    V = np.asarray(V, dtype=float)
    if V.ndim != 1 or V.shape[0] != graph.n_nodes:
        raise AgmonError("V must be a scalar node field")
    if np.any(V < 0):
        raise AgmonError("negative potential values; the Agmon metric V g is undefined")
    if isinstance(source, WellInfo):
        well = source
        seeds = graph.hop_ball(well.node, seed_hops)
        vals = well.quadratic_model(graph, seeds)
        rim = np.setdiff1d(seeds, graph.hop_ball(well.node, seed_hops - 1))
        d_stop = float(vals[np.isin(seeds, rim)].min()) if len(rim) else 0.0
        src = well.index
    else:
        well = None
        seeds = np.array([int(source)], dtype=np.int64)
        vals = np.zeros(1)
        d_stop = 0.0
        src = int(source)
    ginv = np.zeros_like(graph.metric)
    pos = graph.metric > 0
    ginv[pos] = 1.0 / graph.metric[pos]
    indptr, idx, eax, eh, _ = graph.csr
    lo, hi = graph._nbr[0], graph._nbr[1]
    d, order, grad = kernels.fast_march_kernel(indptr, idx, eax, eh, ginv, V,
                                               seeds.astype(np.int64), vals.astype(float),
                                               graph.dim, lo, hi, order == 2)
    if not np.all(np.isfinite(d)):
        raise AgmonError(f"domain is disconnected: {int(np.sum(~np.isfinite(d)))} nodes unreachable")
    if well is None:
        # a descent never reaches d = 0 exactly; stop one cell short
        d_stop = float(d[graph.neighbours(src)].min())
    return AgmonField(graph=graph, V=V, d=d, source=src, well=well, accepted_order=order,
                      upwind_grad=grad, seed_nodes=seeds, d_stop=d_stop,
                      tau_fm=fm_tolerance(graph, V), seed_hops=seed_hops if well is not None else 0)


# ---------------------------------------------------------------------------
# geodesics
# ---------------------------------------------------------------------------

def _trace_inputs(field: AgmonField, f: Optional[np.ndarray] = None):
    graph = field.graph
    f = field.d if f is None else f
    grad = field.grad if f is field.d else discrete_gradient(graph, f)
    G0 = graph.grid_values(grad[:, 0])
    G1 = graph.grid_values(grad[:, 1]) if graph.dim > 1 else np.zeros_like(G0)
    if graph.pole_nodes:
        G0[0, :] = 0.0
        G0[-1, :] = 0.0
        G1[0, :] = 0.0
        G1[-1, :] = 0.0
    return graph.grid_values(f), G0, G1


def trace_step(graph: DomainGraph) -> float:
    scale = graph.sphere_radius if graph.sphere_radius > 0 else 1.0
    return 0.5 * float(np.min(graph.grid_spacing[:graph.dim])) * scale


@dataclass(frozen=True)
class Geodesic:
    points: np.ndarray      # (k, dim) from the start towards the source
    agmon_length: float     # integral of sqrt(V) ds_g along the polyline
    d_start: float
    d_end: float


def trace_geodesics(field: AgmonField, starts: np.ndarray, *, step: float | None = None,
                    max_steps: int | None = None, strict: bool = True) -> list:
    """Steepest-descent back-traces of d from each start point to the source region.

    With ``strict=False`` failed traces come back as None instead of raising.
    """
    graph = field.graph
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    if starts.shape[1] == 1:
        starts = np.hstack([starts, np.zeros((len(starts), 1))])
    step = trace_step(graph) if step is None else step
    if max_steps is None:
        max_steps = 20 * int(max(graph.grid_ids.shape)) + 200
    D, G0, G1 = _trace_inputs(field)
    gscale = float(np.sqrt(np.max(field.V))) * 1e-9 + 1e-300
    pts, npts, status = kernels.trace_kernel(
        D, G0, G1, starts, graph.grid_origin, graph.grid_spacing, graph.grid_periodic,
        float(graph.sphere_radius), float(step), float(field.d_stop), int(max_steps), gscale)
    out = []
    for k in range(len(starts)):
        p = pts[k, :npts[k], :graph.dim]
        if status[k] != kernels.TRACE_OK and not strict:
            out.append(None)
            continue
        if status[k] == kernels.TRACE_STALLED:
            raise GeodesicTraceError(
                f"trace from {starts[k, :graph.dim].tolist()} stalled at {p[-1].tolist()}: "
                "vanishing gradient away from the well (cut locus or flat region)")
        if status[k] == kernels.TRACE_EXHAUSTED:
            raise GeodesicTraceError(
                f"trace from {starts[k, :graph.dim].tolist()} did not reach the source region "
                f"in {max_steps} steps")
        out.append(Geodesic(points=p, agmon_length=agmon_length(field, p),
                            d_start=float(field.at(p[:1])[0]), d_end=float(field.at(p[-1:])[0])))
    return out


def trace_geodesic(field: AgmonField, start) -> np.ndarray:
    """Polyline (coordinates) from ``start`` (node index or point) towards the source."""
    if np.isscalar(start) or np.ndim(start) == 0:
        start = field.graph.coords[int(start)]
        if field.d[np.argmin(np.abs(field.graph.coords - start).sum(axis=1))] <= 0:
            raise GeodesicTraceError("trace start must have d > 0")
    return trace_geodesics(field, np.atleast_2d(start))[0].points


def agmon_length(field: AgmonField, points: np.ndarray) -> float:
    """Length of a coordinate polyline in the Agmon metric V g."""
    graph = field.graph
    p = np.atleast_2d(points)
    if len(p) < 2:
        return 0.0
    seg = graph.segment_lengths(p[:-1], p[1:])
    mid = p[:-1] + 0.5 * graph.wrap_delta(p[1:] - p[:-1])
    sv = np.sqrt(np.maximum(graph.interpolate(field.V, mid), 0.0))
    return float(np.sum(seg * sv))


# ---------------------------------------------------------------------------
# well pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SurfaceQuadrature:
    points: np.ndarray     # (q, dim)
    weights: np.ndarray    # (q,) induced surface measure
    normals: np.ndarray    # (q, dim) coordinate components, unit g-norm, pointing j -> k
    phi: np.ndarray        # d^j + d^k - S at the nodes

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class WellPairGeometry:
    fj: AgmonField
    fk: AgmonField
    S_jk: float             # d^j at well k
    S_kj: float             # d^k at well j
    S0: float
    a: float
    G: np.ndarray           # node mask {d^j + d^k <= S0 + a}
    sigma: SurfaceQuadrature
    H_points: np.ndarray    # (h, dim)
    H_weights: np.ndarray   # surface weights of the H nodes (1 for isolated points)
    H_normals: np.ndarray
    ell: int
    transverse_hessian: list
    tau_fm: float
    tau_h: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def S(self) -> float:
        return 0.5 * (self.S_jk + self.S_kj)

    @property
    def graph(self) -> DomainGraph:
        return self.fj.graph

    @property
    def j(self) -> int:
        return self.fj.source

    @property
    def k(self) -> int:
        return self.fk.source

    def psi(self, shift: float = 0.0) -> np.ndarray:
        """Level function d^j - d^k - 2 shift; Sigma moves by ``shift`` in Agmon length."""
        return self.fj.d - self.fk.d - 2.0 * shift

    def cut_edges(self, shift: float = 0.0):
        """Edges crossing the (shifted) separating surface inside G, oriented j -> k.

        Returns (a, b, c): endpoint on the j side, endpoint on the k side and the
        edge conductance.  Their dual faces form the discrete surface.
        """
        g = self.graph
        psi = self.psi(shift)
        a, b = g.edges[:, 0], g.edges[:, 1]
        ssum = self.fj.d + self.fk.d
        inside = 0.5 * (ssum[a] + ssum[b]) <= self.S0 + self.a
        fwd = (psi[a] < 0) & (psi[b] >= 0) & inside
        bwd = (psi[b] < 0) & (psi[a] >= 0) & inside
        aa = np.concatenate([a[fwd], b[bwd]])
        bb = np.concatenate([b[fwd], a[bwd]])
        cc = np.concatenate([g.conductance[fwd], g.conductance[bwd]])
        return aa, bb, cc

    def summary(self) -> dict:
        return {
            "pair": [self.j, self.k],
            "S_jk": self.S_jk, "S_kj": self.S_kj, "S0": self.S0, "a": self.a,
            "ell": self.ell, "n_sigma": len(self.sigma), "n_H": int(len(self.H_points)),
            "sigma_weight": float(self.sigma.weights.sum()),
            "H_points": self.H_points.tolist(),
            "transverse_hessian": [np.asarray(D).tolist() for D in self.transverse_hessian],
            "tau_fm": self.tau_fm, "tau_h": self.tau_h,
            **{k: v for k, v in self.diagnostics.items()},
        }


def _unit_normals(graph: DomainGraph, cov: np.ndarray, points: np.ndarray) -> np.ndarray:
    g = graph.metric_at(points)
    vec = cov / g
    nrm = np.sqrt(np.sum(g * vec * vec, axis=1))
    return vec / nrm[:, None]


def _grad_at(graph: DomainGraph, f: np.ndarray, points: np.ndarray) -> np.ndarray:
    grad = discrete_gradient(graph, f)
    if graph.pole_nodes:
        grad[list(graph.pole_nodes)] = 0.0
    return np.column_stack([graph.interpolate(grad[:, i], points) for i in range(graph.dim)])


def _sigma_1d(graph, psi, ssum, limit):
    x = graph.coords[:, 0]
    order = np.argsort(x)
    p, s = psi[order], ssum[order]
    lo, hi = p[:-1], p[1:]
    cross = np.flatnonzero(((lo < 0) & (hi >= 0)) | ((lo >= 0) & (hi < 0)))
    cross = cross[0.5 * (s[cross] + s[cross + 1]) <= limit]
    if len(cross) == 0:
        raise PairGeometryError("separating surface is empty inside G (wells not separated)")
    i = cross[np.argmin(s[cross] + s[cross + 1])]
    t = -lo[i] / (hi[i] - lo[i])
    xs = x[order][i] + t * (x[order][i + 1] - x[order][i])
    sign = 1.0 if hi[i] > lo[i] else -1.0
    return np.array([[xs]]), np.ones(1), np.array([[sign]])


def _marching_squares(graph, psi):
    P = graph.grid_values(psi)
    n0, n1 = P.shape
    per0, per1 = graph.grid_periodic
    o, h = graph.grid_origin, graph.grid_spacing
    I0 = np.arange(n0 if per0 else n0 - 1)
    I1 = np.arange(n1 if per1 else n1 - 1)
    segs = []
    for i in I0:
        ip = (i + 1) % n0
        row = P[i]
        rowp = P[ip]
        # corners in counter-clockwise order with their logical offsets
        for j in I1:
            jp = (j + 1) % n1
            c = (row[j], rowp[j], rowp[jp], row[jp])
            neg = [v < 0 for v in c]
            if all(neg) or not any(neg):
                continue
            offs = ((0, 0), (1, 0), (1, 1), (0, 1))
            pts = []
            for e in range(4):
                a_, b_ = e, (e + 1) % 4
                if neg[a_] != neg[b_]:
                    t = c[a_] / (c[a_] - c[b_])
                    u0 = i + offs[a_][0] + t * (offs[b_][0] - offs[a_][0])
                    u1 = j + offs[a_][1] + t * (offs[b_][1] - offs[a_][1])
                    pts.append((o[0] + u0 * h[0], o[1] + u1 * h[1]))
            if len(pts) == 2:
                segs.append(pts)
            elif len(pts) == 4:
                centre_neg = np.mean(c) < 0
                if centre_neg == neg[0]:
                    segs.append([pts[0], pts[3]])
                    segs.append([pts[1], pts[2]])
                else:
                    segs.append([pts[0], pts[1]])
                    segs.append([pts[2], pts[3]])
    if not segs:
        return np.zeros((0, 2)), np.zeros((0, 2))
    arr = np.asarray(segs, dtype=float)
    return arr[:, 0, :], arr[:, 1, :]


def separating_surface(graph: DomainGraph, fj: AgmonField, fk: AgmonField, limit: float,
                       shift: float = 0.0) -> SurfaceQuadrature:
    psi = fj.d - fk.d - 2.0 * shift
    ssum = fj.d + fk.d
    if graph.dim == 1:
        pts, w, nrm = _sigma_1d(graph, psi, ssum, limit)
    else:
        p, q = _marching_squares(graph, psi)
        if len(p) == 0:
            raise PairGeometryError("separating surface is empty (wells not separated)")
        mid = p + 0.5 * graph.wrap_delta(q - p)
        w = graph.segment_lengths(p, q)
        keep = (graph.interpolate(ssum, mid) <= limit) & (w > 0)
        if not np.any(keep):
            raise PairGeometryError("separating surface does not meet G (wells not separated)")
        pts, w = mid[keep], w[keep]
        nrm = _unit_normals(graph, _grad_at(graph, psi, pts), pts)
    phi = graph.interpolate(ssum, pts)
    return SurfaceQuadrature(points=pts, weights=w, normals=nrm, phi=phi)


def pair_geometry(fj: AgmonField, fk: AgmonField, a: float | None = None, *,
                  S0: float | None = None, a_fraction: float = 0.1, ell: int | None = None,
                  tau_h: float | None = None) -> WellPairGeometry:
    """Separating surface, geodesic-manifold dimension and transverse Hessian of a pair.

    ``a`` is the margin of G = {d^j + d^k <= S0 + a} in Agmon length; by default
    ``a_fraction * S0``.  ``ell`` overrides the automatic detection.
    """
    graph = fj.graph
    if fk.graph is not graph:
        raise PairGeometryError("fields live on different graphs")
    if fj.well is None or fk.well is None:
        raise PairGeometryError("pair geometry needs fields sourced at detected wells")
    S_jk = float(fj.at(fk.well.coords[None, :])[0])
    S_kj = float(fk.at(fj.well.coords[None, :])[0])
    S = 0.5 * (S_jk + S_kj)
    S0 = S if S0 is None else float(S0)
    a = a_fraction * S0 if a is None else float(a)
    if a <= 0:
        raise PairGeometryError("margin a must be positive")
    tau = max(fj.tau_fm, fk.tau_fm)
    tau_h = min(4.0 * tau, 0.25 * a) if tau_h is None else float(tau_h)
    ssum = fj.d + fk.d
    G = ssum <= S0 + a
    sigma = separating_surface(graph, fj, fk, S0 + a)
    phi = sigma.phi - S
    diag = {"phi_spread": float(phi.max() - phi.min()) if len(phi) else 0.0}

    if graph.dim == 1:
        ell_auto = 0
    else:
        ell_auto = 1 if diag["phi_spread"] <= tau_h else 0
    ell = ell_auto if ell is None else int(ell)
    diag["ell_auto"] = ell_auto
    if not 0 <= ell <= graph.dim - 1:
        raise PairGeometryError(f"ell = {ell} outside 0..{graph.dim - 1}")

    if graph.dim == 1:
        H_pts, H_w, H_n = sigma.points, sigma.weights, sigma.normals
        hess = [np.zeros((0, 0))]
    elif ell == graph.dim - 1:
        sel = phi - phi.min() <= tau_h
        H_pts, H_w, H_n = sigma.points[sel], sigma.weights[sel], sigma.normals[sel]
        hess = [np.zeros((0, 0)) for _ in range(int(sel.sum()))]
    else:
        H_pts, kappa = _transverse_fit(graph, sigma, phi, a)
        H_n = _fit_normal(graph, fj.d - fk.d, H_pts)
        if not kappa > 0:
            raise PairGeometryError(f"transverse Hessian not positive definite (D^2 = {kappa:.3e})")
        H_w = np.ones(1)
        hess = [np.array([[kappa]])]
    return WellPairGeometry(fj=fj, fk=fk, S_jk=S_jk, S_kj=S_kj, S0=S0, a=a, G=G, sigma=sigma,
                            H_points=H_pts, H_weights=H_w, H_normals=H_n, ell=ell,
                            transverse_hessian=hess, tau_fm=tau, tau_h=tau_h, diagnostics=diag)


def _transverse_fit(graph, sigma, phi, a):
    """Locate the isolated minimum of d^j + d^k on a 2D Sigma and its curvature.

    Points near the discrete minimum are projected on the g-unit tangent there
    and phi(s) is fitted by a parabola; D^2 is its second derivative.
    """
    i0 = int(np.argmin(phi))
    p0 = sigma.points[i0]
    n0 = sigma.normals[i0]
    g0 = graph.metric_at(p0[None, :])[0]
    # tangent: g-orthogonal to the normal, unit g-norm
    t = np.array([-n0[1] * g0[1], n0[0] * g0[0]])
    t /= np.sqrt(np.sum(g0 * t * t))
    du = graph.wrap_delta(sigma.points - p0)
    s = np.sum(g0 * du * t, axis=1)
    span = phi - phi.min()
    for frac in (0.25, 0.5, 1.0):
        sel = span <= frac * max(span.max(), 1e-300)
        if sel.sum() >= 7:
            break
    if sel.sum() < 5:
        raise PairGeometryError("too few Sigma nodes near the minimum to fit the transverse Hessian")
    # symmetric window around the minimum
    smax = min(np.max(s[sel]), -np.min(s[sel]))
    if smax > 0:
        win = sel & (np.abs(s) <= smax)
        if win.sum() >= 5:
            sel = win
    c2, c1, c0 = np.polyfit(s[sel], phi[sel], 2)
    kappa = 2.0 * c2
    s_star = -c1 / kappa if kappa > 0 else 0.0
    pt = p0 + s_star * t
    return pt[None, :], kappa


def _fit_normal(graph, psi, pt):
    return _unit_normals(graph, _grad_at(graph, psi, pt), pt)
