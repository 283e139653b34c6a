"""Discrete geometry substrate: weighted graphs with node volumes and a diagonal metric.

Every domain (interval, rectangle, flat torus, latitude-longitude sphere) is
reduced to the same representation: nodes carry a volume weight and per-axis
metric coefficients, edges carry a finite-volume conductance (dual face measure
divided by edge length).  The graph Laplacian built from these conductances is
symmetric in the volume-weighted inner product by construction.

Node fields are plain numpy arrays: shape ``(n,)`` for scalars and ``(n, r)``
for sections of a trivial rank-r bundle.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels

KINDS = ("interval", "rectangle", "torus2d", "sphere_latlong")
BOUNDARIES = ("dirichlet_outer", "periodic", "closed_surface")

NodeField = np.ndarray


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    extents: tuple
    resolution: tuple
    boundary: str = "dirichlet_outer"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MeshError(f"unknown domain kind {self.kind!r}")
        if self.boundary not in BOUNDARIES:
            raise MeshError(f"unknown boundary {self.boundary!r}")
        res = tuple(int(r) for r in np.atleast_1d(self.resolution))
        object.__setattr__(self, "resolution", res)
        want = 1 if self.kind == "interval" else 2
        if len(res) != want:
            raise MeshError(f"{self.kind} needs {want} resolution entries, got {len(res)}")
        if min(res) < 8:
            raise MeshError(f"resolution {res} too small: need at least 8 nodes per axis")
        if self.kind == "sphere_latlong" and self.boundary != "closed_surface":
            raise MeshError("sphere_latlong requires boundary = closed_surface")
        if self.kind == "torus2d" and self.boundary != "periodic":
            raise MeshError("torus2d requires boundary = periodic")
        if self.kind in ("interval", "rectangle") and self.boundary == "closed_surface":
            raise MeshError(f"{self.kind} cannot have a closed_surface boundary")
        if self.kind == "rectangle" and self.boundary == "periodic":
            raise MeshError("use kind = torus2d for a doubly periodic rectangle")
        if self.kind == "sphere_latlong":
            r = float(np.atleast_1d(self.extents)[0])
            if not r > 0:
                raise MeshError("sphere radius must be positive")
            object.__setattr__(self, "extents", (r,))
        else:
            ext = tuple((float(lo), float(hi)) for lo, hi in np.reshape(self.extents, (-1, 2)))
            if len(ext) != want or any(hi <= lo for lo, hi in ext):
                raise MeshError(f"invalid extents {self.extents!r} for {self.kind}")
            object.__setattr__(self, "extents", ext)

    @property
    def dim(self) -> int:
        return 1 if self.kind == "interval" else 2

    def analytic_volume(self) -> float:
        if self.kind == "sphere_latlong":
            return 4.0 * np.pi * self.extents[0] ** 2
        return float(np.prod([hi - lo for lo, hi in self.extents]))


@dataclass(frozen=True, eq=False)
class DomainGraph:
    """Immutable weighted graph; see module docstring for the conventions."""

    spec: DomainSpec
    coords: np.ndarray          # (n, dim) coordinates (theta, phi on the sphere)
    volume: np.ndarray          # (n,)
    edges: np.ndarray           # (m, 2), each undirected edge stored once
    conductance: np.ndarray     # (m,)
    edge_axis: np.ndarray       # (m,)
    edge_h: np.ndarray          # (m,) coordinate spacing along edge_axis
    edge_length: np.ndarray     # (m,) metric length
    metric: np.ndarray          # (n, dim) diagonal g_i
    boundary: np.ndarray        # (n,) outer Dirichlet wall
    pole_nodes: tuple
    axis_names: tuple
    grid_ids: np.ndarray        # logical grid of node ids, shape (n0, n1)
    grid_origin: np.ndarray
    grid_spacing: np.ndarray
    grid_periodic: np.ndarray
    sphere_radius: float = 0.0
    _csr: tuple = field(default=(), repr=False)
    _nbr: tuple = field(default=(), repr=False)

    def __post_init__(self):
        n = self.coords.shape[0]
        a, b = self.edges[:, 0], self.edges[:, 1]
        src = np.concatenate([a, b])
        dst = np.concatenate([b, a])
        ax = np.concatenate([self.edge_axis, self.edge_axis])
        hh = np.concatenate([self.edge_h, self.edge_h])
        eid = np.concatenate([np.arange(len(a)), np.arange(len(a))])
        order = np.lexsort((dst, src))
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        indptr = np.cumsum(indptr)
        csr = (indptr, dst[order].astype(np.int64), ax[order].astype(np.int64),
               hh[order].astype(float), eid[order].astype(np.int64))
        object.__setattr__(self, "_csr", csr)
        object.__setattr__(self, "_nbr", self._axis_neighbours())

    # -- basic facts -------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def total_volume(self) -> float:
        return float(self.volume.sum())

    @property
    def csr(self):
        """(indptr, neighbour, axis, spacing, edge id) of the symmetric adjacency."""
        return self._csr

    @property
    def h(self) -> float:
        """Smallest metric edge length, the nominal mesh width."""
        return float(self.edge_length.min())

    @property
    def h_max(self) -> float:
        return float(self.edge_length.max())

    def degree(self) -> np.ndarray:
        return np.diff(self._csr[0])

    def neighbours(self, i: int) -> np.ndarray:
        indptr, idx = self._csr[0], self._csr[1]
        return idx[indptr[i]:indptr[i + 1]]

    def is_connected(self) -> bool:
        return len(self.hop_ball(0, self.n_nodes)) == self.n_nodes

    def hop_ball(self, node: int, hops: int) -> np.ndarray:
        """Nodes within ``hops`` graph steps of ``node`` (breadth-first)."""
        indptr, idx = self._csr[0], self._csr[1]
        dist = {int(node): 0}
        queue = deque([int(node)])
        while queue:
            i = queue.popleft()
            if dist[i] >= hops:
                continue
            for j in idx[indptr[i]:indptr[i + 1]]:
                j = int(j)
                if j not in dist:
                    dist[j] = dist[i] + 1
                    queue.append(j)
        return np.array(sorted(dist), dtype=np.int64)

    def component(self, mask: np.ndarray, node: int) -> np.ndarray:
        """Connected component of ``mask`` containing ``node`` as a boolean mask."""
        indptr, idx = self._csr[0], self._csr[1]
        out = np.zeros(self.n_nodes, dtype=bool)
        if not mask[node]:
            return out
        out[node] = True
        queue = deque([int(node)])
        while queue:
            i = queue.popleft()
            for j in idx[indptr[i]:indptr[i + 1]]:
                if mask[j] and not out[j]:
                    out[j] = True
                    queue.append(int(j))
        return out

    # -- structured-grid helpers -------------------------------------------
    def grid_values(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f, dtype=float)[self.grid_ids]

    def interpolate(self, f: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Bilinear (linear in 1D) interpolation of a scalar node field."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] == 1:
            pts = np.hstack([pts, np.zeros((pts.shape[0], 1))])
        return kernels.interp_grid_kernel(self.grid_values(f), pts, self.grid_origin,
                                          self.grid_spacing, self.grid_periodic)

    def metric_at(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind != "sphere_latlong":
            return np.ones((pts.shape[0], self.dim))
        r2 = self.sphere_radius ** 2
        return np.column_stack([np.full(pts.shape[0], r2), r2 * np.sin(pts[:, 0]) ** 2])

    def inverse_metric_jet(self, points: np.ndarray):
        """g^{kk}, its first and second coordinate derivatives and the divergence coefficients.

        Returns (gi, d1, d2, b) with d1[:, i, k] = d_i g^{kk},
        d2[:, i, j, k] = d_i d_j g^{kk} and b[:, i] = |g|^{-1/2} d_i(|g|^{1/2} g^{ii}),
        so that Delta f = sum_i g^{ii} d_i^2 f + b_i d_i f.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        q, n = pts.shape[0], self.dim
        gi = np.ones((q, n))
        d1 = np.zeros((q, n, n))
        d2 = np.zeros((q, n, n, n))
        b = np.zeros((q, n))
        if self.kind == "sphere_latlong":
            r2 = self.sphere_radius ** 2
            s = np.sin(pts[:, 0])
            c = np.cos(pts[:, 0])
            gi[:, 0] = 1.0 / r2
            gi[:, 1] = 1.0 / (r2 * s * s)
            d1[:, 0, 1] = -2.0 * c / (r2 * s ** 3)
            d2[:, 0, 0, 1] = (2.0 / s ** 2 + 6.0 * c * c / s ** 4) / r2
            b[:, 0] = c / (s * r2)
        return gi, d1, d2, b

    def embed(self, points: np.ndarray) -> np.ndarray:
        """Coordinates in a Euclidean space where nearby points keep nearby images."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "sphere_latlong":
            return self.sphere_radius * _unit(pts[:, 0], pts[:, 1])
        cols = []
        for ax in range(self.dim):
            if self.grid_periodic[ax]:
                period = self.grid_spacing[ax] * self.grid_ids.shape[ax]
                ang = 2 * np.pi * (pts[:, ax] - self.grid_origin[ax]) / period
                rad = period / (2 * np.pi)
                cols += [rad * np.cos(ang), rad * np.sin(ang)]
            else:
                cols.append(pts[:, ax])
        return np.column_stack(cols)

    def segment_lengths(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Metric length of straight coordinate segments p->q (midpoint metric)."""
        p = np.atleast_2d(p)
        q = np.atleast_2d(q)
        du = self.wrap_delta(q - p)
        g = self.metric_at(p + 0.5 * du)
        return np.sqrt(np.sum(g * du * du, axis=1))

    def wrap_delta(self, du: np.ndarray) -> np.ndarray:
        du = np.array(du, dtype=float, copy=True)
        for ax in range(self.dim):
            if self.grid_periodic[ax]:
                period = self.grid_spacing[ax] * self.grid_ids.shape[ax]
                du[..., ax] = (du[..., ax] + 0.5 * period) % period - 0.5 * period
        return du

    # -- local charts --------------------------------------------------------
    def chart(self, origin: Sequence[float], points: np.ndarray) -> np.ndarray:
        """Normal coordinates of ``points`` around ``origin`` (isometric at the origin)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        origin = np.asarray(origin, dtype=float)
        if self.kind != "sphere_latlong":
            return self.wrap_delta(pts - origin)
        p = _unit(origin[0], origin[1])
        q = _unit(pts[:, 0], pts[:, 1])
        e1, e2 = _tangent_basis(origin[0], origin[1])
        cosang = np.clip(q @ p, -1.0, 1.0)
        ang = np.arccos(cosang)
        v = q - np.outer(cosang, p)
        nv = np.linalg.norm(v, axis=1)
        scale = np.where(nv > 1e-300, ang / np.maximum(nv, 1e-300), 1.0)
        return self.sphere_radius * scale[:, None] * np.column_stack([v @ e1, v @ e2])

    def exp_chart(self, origin: Sequence[float], X: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`chart`."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        origin = np.asarray(origin, dtype=float)
        if self.kind != "sphere_latlong":
            out = origin + X
            for ax in range(self.dim):
                if self.grid_periodic[ax]:
                    lo = self.grid_origin[ax]
                    period = self.grid_spacing[ax] * self.grid_ids.shape[ax]
                    out[:, ax] = lo + (out[:, ax] - lo) % period
            return out
        p = _unit(origin[0], origin[1])
        e1, e2 = _tangent_basis(origin[0], origin[1])
        Y = X / self.sphere_radius
        ang = np.linalg.norm(Y, axis=1)
        dirn = np.outer(Y[:, 0], e1) + np.outer(Y[:, 1], e2)
        with np.errstate(invalid="ignore", divide="ignore"):
            dirn = np.where(ang[:, None] > 0, dirn / ang[:, None], 0.0)
        q = np.outer(np.cos(ang), p) + np.sin(ang)[:, None] * dirn
        theta = np.arccos(np.clip(q[:, 2], -1.0, 1.0))
        phi = np.arctan2(q[:, 1], q[:, 0]) % (2 * np.pi)
        return np.column_stack([theta, phi])

    # -- gradient stencils -----------------------------------------------------
    def _axis_neighbours(self):
        n, dim = self.n_nodes, self.dim
        lo = np.full((n, dim), -1, dtype=np.int64)
        hi = np.full((n, dim), -1, dtype=np.int64)
        hlo = np.ones((n, dim))
        hhi = np.ones((n, dim))
        G = self.grid_ids
        n0, n1 = G.shape
        poles = set(self.pole_nodes)
        for ax in range(dim):
            step = np.zeros(2, dtype=int)
            step[ax] = 1
            for s, arr, harr in ((-1, lo, hlo), (1, hi, hhi)):
                i0 = np.arange(n0)[:, None] + s * step[0]
                i1 = np.arange(n1)[None, :] + s * step[1]
                i0 = np.broadcast_to(i0, G.shape).copy()
                i1 = np.broadcast_to(i1, G.shape).copy()
                valid = np.ones(G.shape, dtype=bool)
                for k, ii, nk in ((0, i0, n0), (1, i1, n1)):
                    if self.grid_periodic[k]:
                        ii %= nk
                    else:
                        valid &= (ii >= 0) & (ii < nk)
                        np.clip(ii, 0, nk - 1, out=ii)
                nb = G[i0, i1]
                ids = G[valid]
                arr[ids, ax] = nb[valid]
                harr[ids, ax] = self.grid_spacing[ax]
        for p in poles:
            lo[p] = -1
            hi[p] = -1
        return lo, hi, hlo, hhi


def _unit(theta, phi):
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    v = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)
    return v


def _tangent_basis(theta: float, phi: float):
    if np.sin(theta) < 1e-12:
        sgn = 1.0 if np.cos(theta) > 0 else -1.0
        return np.array([1.0, 0.0, 0.0]), np.array([0.0, sgn, 0.0])
    e_t = np.array([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)])
    e_p = np.array([-np.sin(phi), np.cos(phi), 0.0])
    return e_t, e_p


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_domain(spec: DomainSpec) -> DomainGraph:
    builders = {
        "interval": _build_interval,
        "rectangle": _build_tensor,
        "torus2d": _build_tensor,
        "sphere_latlong": _build_sphere,
    }
    graph = builders[spec.kind](spec)
    if not graph.is_connected():  # pragma: no cover - construction guarantees it
        raise MeshError("constructed graph is not connected")
    return graph


def _axis_1d(lo, hi, n, periodic):
    if periodic:
        h = (hi - lo) / n
        x = lo + h * np.arange(n)
        w = np.ones(n)
        a = np.arange(n)
        b = (a + 1) % n
    else:
        h = (hi - lo) / (n - 1)
        x = np.linspace(lo, hi, n)
        w = np.ones(n)
        w[[0, -1]] = 0.5
        a = np.arange(n - 1)
        b = a + 1
    return x, h, w, a, b


def _build_interval(spec: DomainSpec) -> DomainGraph:
    (lo, hi), = spec.extents
    n, = spec.resolution
    periodic = spec.boundary == "periodic"
    x, h, w, a, b = _axis_1d(lo, hi, n, periodic)
    m = len(a)
    boundary = np.zeros(n, dtype=bool)
    if not periodic:
        boundary[[0, -1]] = True
    return DomainGraph(
        spec=spec, coords=x[:, None], volume=h * w,
        edges=np.column_stack([a, b]).astype(np.int64),
        conductance=np.full(m, 1.0 / h), edge_axis=np.zeros(m, dtype=np.int64),
        edge_h=np.full(m, h), edge_length=np.full(m, h),
        metric=np.ones((n, 1)), boundary=boundary, pole_nodes=(), axis_names=("x",),
        grid_ids=np.arange(n)[:, None], grid_origin=np.array([lo, 0.0]),
        grid_spacing=np.array([h, 1.0]), grid_periodic=np.array([periodic, False]),
    )


def _build_tensor(spec: DomainSpec) -> DomainGraph:
    periodic = spec.boundary == "periodic"
    (x0, x1), (y0, y1) = spec.extents
    nx, ny = spec.resolution
    x, hx, wx, ax_, bx_ = _axis_1d(x0, x1, nx, periodic)
    y, hy, wy, ay_, by_ = _axis_1d(y0, y1, ny, periodic)
    ids = np.arange(nx * ny).reshape(nx, ny)
    X, Y = np.meshgrid(x, y, indexing="ij")
    coords = np.column_stack([X.ravel(), Y.ravel()])
    volume = (hx * hy * np.outer(wx, wy)).ravel()
    # x-edges: every row j, consecutive i
    ex = np.column_stack([ids[ax_, :].ravel(), ids[bx_, :].ravel()])
    cx = np.broadcast_to((hy * wy / hx)[None, :], (len(ax_), ny)).ravel()
    ey = np.column_stack([ids[:, ay_].ravel(), ids[:, by_].ravel()])
    cy = np.broadcast_to((hx * wx / hy)[:, None], (nx, len(ay_))).ravel()
    edges = np.vstack([ex, ey]).astype(np.int64)
    mx, my = len(ex), len(ey)
    boundary = np.zeros((nx, ny), dtype=bool)
    if not periodic:
        boundary[[0, -1], :] = True
        boundary[:, [0, -1]] = True
    return DomainGraph(
        spec=spec, coords=coords, volume=volume, edges=edges,
        conductance=np.concatenate([cx, cy]),
        edge_axis=np.concatenate([np.zeros(mx, dtype=np.int64), np.ones(my, dtype=np.int64)]),
        edge_h=np.concatenate([np.full(mx, hx), np.full(my, hy)]),
        edge_length=np.concatenate([np.full(mx, hx), np.full(my, hy)]),
        metric=np.ones((nx * ny, 2)), boundary=boundary.ravel(), pole_nodes=(),
        axis_names=("x", "y"), grid_ids=ids, grid_origin=np.array([x0, y0]),
        grid_spacing=np.array([hx, hy]), grid_periodic=np.array([periodic, periodic]),
    )


def _build_sphere(spec: DomainSpec) -> DomainGraph:
    R, = spec.extents
    nt, nphi = spec.resolution
    dt = np.pi / (nt + 1)
    dp = 2 * np.pi / nphi
    theta = dt * np.arange(1, nt + 1)
    phi = dp * np.arange(nphi)
    north, south = 0, 1 + nt * nphi
    n = nt * nphi + 2
    ring = 1 + np.arange(nt * nphi).reshape(nt, nphi)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    coords = np.vstack([[0.0, 0.0], np.column_stack([T.ravel(), P.ravel()]), [np.pi, 0.0]])
    cap = R * R * 2 * np.pi * (1 - np.cos(dt / 2))
    volume = np.concatenate([[cap], (R * R * np.sin(T) * dt * dp).ravel(), [cap]])

    k = np.arange(nphi)
    e_phi = np.column_stack([ring.ravel(), ring[:, (k + 1) % nphi].ravel()])
    c_phi = np.repeat(dt / (np.sin(theta) * dp), nphi)
    l_phi = np.repeat(R * np.sin(theta) * dp, nphi)
    e_th = np.column_stack([ring[:-1].ravel(), ring[1:].ravel()])
    c_th = np.repeat(np.sin(theta[:-1] + dt / 2) * dp / dt, nphi)
    e_pole = np.vstack([np.column_stack([np.full(nphi, north), ring[0]]),
                        np.column_stack([ring[-1], np.full(nphi, south)])])
    c_pole = np.full(2 * nphi, np.sin(dt / 2) * dp / dt)
    edges = np.vstack([e_phi, e_th, e_pole]).astype(np.int64)
    m_phi, m_th = len(e_phi), len(e_th) + len(e_pole)
    metric = np.column_stack([np.full(n, R * R), R * R * np.sin(coords[:, 0]) ** 2])
    metric[[north, south], 1] = 0.0
    grid_ids = np.vstack([np.full(nphi, north), ring, np.full(nphi, south)])
    return DomainGraph(
        spec=spec, coords=coords, volume=volume, edges=edges,
        conductance=np.concatenate([c_phi, c_th, c_pole]),
        edge_axis=np.concatenate([np.ones(m_phi, dtype=np.int64), np.zeros(m_th, dtype=np.int64)]),
        edge_h=np.concatenate([np.full(m_phi, dp), np.full(m_th, dt)]),
        edge_length=np.concatenate([l_phi, np.full(m_th, R * dt)]),
        metric=metric, boundary=np.zeros(n, dtype=bool), pole_nodes=(north, south),
        axis_names=("theta", "phi"), grid_ids=grid_ids, grid_origin=np.array([0.0, 0.0]),
        grid_spacing=np.array([dt, dp]), grid_periodic=np.array([False, True]),
        sphere_radius=float(R),
    )


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def discrete_gradient(graph: DomainGraph, f: np.ndarray) -> np.ndarray:
    """Coordinate partial derivatives of a scalar node field.

    Centered differences in the interior and one-sided differences at the outer
    wall.  Sphere pole rows hold Cartesian components in the tangent plane
    (fitted by least squares over the adjacent ring), since (theta, phi) is
    singular there; :func:`metric_norm2` knows about this.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim != 1 or f.shape[0] != graph.n_nodes:
        raise MeshError("discrete_gradient expects a scalar (rank-1) node field")
    lo, hi, hlo, hhi = graph._nbr
    grad = np.zeros((graph.n_nodes, graph.dim))
    for ax in range(graph.dim):
        l, u = lo[:, ax], hi[:, ax]
        both = (l >= 0) & (u >= 0)
        only_u = (l < 0) & (u >= 0)
        only_l = (l >= 0) & (u < 0)
        g = grad[:, ax]
        g[both] = (f[u[both]] - f[l[both]]) / (hlo[both, ax] + hhi[both, ax])
        g[only_u] = (f[u[only_u]] - f[only_u]) / hhi[only_u, ax]
        g[only_l] = (f[only_l] - f[l[only_l]]) / hlo[only_l, ax]
    for p in graph.pole_nodes:
        nb = graph.neighbours(p)
        X = graph.chart(graph.coords[p], graph.coords[nb])
        coef, *_ = np.linalg.lstsq(X, f[nb] - f[p], rcond=None)
        grad[p] = coef
    return grad


def metric_norm2(graph: DomainGraph, grad: np.ndarray) -> np.ndarray:
    """|df|^2 = sum_i (d_i f)^2 / g_i, with pole rows read as Cartesian."""
    g = graph.metric.copy()
    if graph.pole_nodes:
        g[list(graph.pole_nodes)] = 1.0
    return np.sum(grad * grad / g, axis=1)


def laplace_beltrami(graph: DomainGraph, f: np.ndarray) -> np.ndarray:
    """Finite-volume Laplace-Beltrami of a scalar field: (1/vol) sum c (f_b - f_a)."""
    f = np.asarray(f, dtype=float)
    a, b = graph.edges[:, 0], graph.edges[:, 1]
    flux = graph.conductance * (f[b] - f[a])
    out = np.zeros(graph.n_nodes)
    np.add.at(out, a, flux)
    np.add.at(out, b, -flux)
    return out / graph.volume
