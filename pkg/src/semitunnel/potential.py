"""Potentials, endomorphism fields and well detection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .expr import EvaluationError, Expr, parse_expr, evaluate, variables
from .mesh import DomainGraph


class WellError(ValueError):
    pass


class DegenerateWellError(WellError):
    pass


class NoWellsError(WellError):
    pass


def _as_expr(e: Union[str, Expr, float]) -> Expr:
    if isinstance(e, str):
        return parse_expr(e)
    if isinstance(e, (int, float, np.floating)):
        return parse_expr(repr(float(e)))
    return e


def evaluate_field(e: Union[str, Expr], graph: DomainGraph) -> np.ndarray:
    """Evaluate an expression at every node (rank-1 result)."""
    e = _as_expr(e)
    unknown = variables(e) - set(graph.axis_names)
    if unknown:
        raise EvaluationError(f"variables {sorted(unknown)} are not coordinates of a "
                              f"{graph.kind} domain (have {list(graph.axis_names)})")
    env = {name: graph.coords[:, i] for i, name in enumerate(graph.axis_names)}
    try:
        out = evaluate(e, env)
    except EvaluationError as exc:
        idx = getattr(exc, "index", None)
        if idx is None:
            raise
        where = dict(zip(graph.axis_names, graph.coords[idx].tolist()))
        raise EvaluationError(f"{exc} (coordinates {where})") from None
    return np.broadcast_to(np.asarray(out, dtype=float), (graph.n_nodes,)).copy()


def evaluate_endomorphism(entries, graph: DomainGraph) -> np.ndarray:
    """Per-node symmetric r x r field from a constant matrix or per-entry expressions.

    Symmetry is checked exactly at every node, never enforced by averaging.
    """
    if isinstance(entries, np.ndarray) and entries.ndim == 3:
        W = np.asarray(entries, dtype=float)
    else:
        rows = [list(r) for r in entries]
        r = len(rows)
        if any(len(row) != r for row in rows):
            raise WellError("endomorphism must be a square matrix")
        W = np.empty((graph.n_nodes, r, r))
        for a in range(r):
            for b in range(r):
                v = rows[a][b]
                if isinstance(v, (int, float, np.floating)):
                    W[:, a, b] = float(v)
                else:
                    W[:, a, b] = evaluate_field(v, graph)
    if W.shape[0] != graph.n_nodes or W.shape[1] != W.shape[2]:
        raise WellError(f"endomorphism field has shape {W.shape}, expected (n, r, r)")
    if not np.array_equal(W, np.swapaxes(W, 1, 2)):
        raise WellError("endomorphism field is not symmetric")
    return W


@dataclass(frozen=True, eq=False)
class WellInfo:
    """A non-degenerate zero of V together with its harmonic data."""

    index: int
    node: int
    coords: np.ndarray
    chart_origin: np.ndarray
    offset: np.ndarray          # refined minimum in the chart at chart_origin
    hessian: np.ndarray         # fitted Hessian in that chart
    hessian_eigs: np.ndarray
    lam: np.ndarray             # sqrt(hessian_eigs / 2), ascending
    A: np.ndarray               # (hessian / 2)^(1/2)
    w_eigs: np.ndarray = field(default_factory=lambda: np.zeros(1))
    w_vecs: np.ndarray = field(default_factory=lambda: np.ones((1, 1)))
    value: float = 0.0

    @property
    def dim(self) -> int:
        return len(self.lam)

    @property
    def rank(self) -> int:
        return len(self.w_eigs)

    def local_coords(self, graph: DomainGraph, nodes) -> np.ndarray:
        nodes = np.atleast_1d(nodes)
        return graph.chart(self.chart_origin, graph.coords[nodes]) - self.offset

    def quadratic_model(self, graph: DomainGraph, nodes) -> np.ndarray:
        """d ~ <X, A X> / 2 in normal coordinates around the refined minimum."""
        X = self.local_coords(graph, nodes)
        return 0.5 * np.einsum("ni,ij,nj->n", X, self.A, X)

    def amplitude_at_well(self) -> float:
        n = self.dim
        return float(np.pi ** (-n / 4) * np.linalg.det(self.A) ** 0.25)

    def summary(self) -> dict:
        return {
            "index": self.index,
            "node": int(self.node),
            "coords": [float(c) for c in self.coords],
            "hessian_eigs": [float(h) for h in self.hessian_eigs],
            "lambda": [float(v) for v in self.lam],
            "w_eigs": [float(m) for m in self.w_eigs],
            "value": float(self.value),
        }


def _domain_diameter(graph: DomainGraph) -> float:
    if graph.kind == "sphere_latlong":
        return float(np.pi * graph.sphere_radius)
    return float(np.sqrt(sum((hi - lo) ** 2 for lo, hi in graph.spec.extents)))


class _LocalPoly:
    """Least-squares polynomial (degree <= 4) in normal coordinates.

    Cubic and quartic terms are fitted whenever the stencil allows it so that
    they do not leak into the quadratic part.
    """

    def __init__(self, X: np.ndarray, v: np.ndarray, degree: int = 4):
        n, dim = X.shape
        exps = [e for e in np.ndindex(*(degree + 1,) * dim) if sum(e) <= degree]
        while len(exps) + 2 > n and degree > 2:
            degree -= 1
            exps = [e for e in exps if sum(e) <= degree]
        self.exps = np.array(sorted(exps, key=lambda e: (sum(e), [-k for k in e])))
        self.scale = float(np.abs(X).max()) or 1.0
        M = self._monomials(X / self.scale)
        self.coef, *_ = np.linalg.lstsq(M, v, rcond=None)
        self.dim = dim

    def _monomials(self, Y):
        return np.prod(Y[:, None, :] ** self.exps[None, :, :], axis=2)

    def derivatives(self, x: np.ndarray):
        """Value, gradient and Hessian at the point x."""
        y = np.asarray(x, dtype=float) / self.scale
        dim = self.dim
        val = 0.0
        grad = np.zeros(dim)
        hess = np.zeros((dim, dim))
        for e, c in zip(self.exps, self.coef):
            val += c * np.prod(y ** e)
            for i in range(dim):
                if e[i] == 0:
                    continue
                ei = e.copy()
                ei[i] -= 1
                grad[i] += c * e[i] * np.prod(y ** ei)
                for j in range(dim):
                    if ei[j] == 0:
                        continue
                    eij = ei.copy()
                    eij[j] -= 1
                    hess[i, j] += c * e[i] * ei[j] * np.prod(y ** eij)
        return val, grad / self.scale, hess / self.scale ** 2

    def minimize(self, iters: int = 20):
        x = np.zeros(self.dim)
        for _ in range(iters):
            _, g, H = self.derivatives(x)
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                break
            x = x - step
            if np.linalg.norm(step) <= 1e-14 * self.scale:
                break
        if np.linalg.norm(x) > self.scale:
            x = np.zeros(self.dim)
        return x


def find_wells(V: np.ndarray, graph: DomainGraph, W: np.ndarray | None = None, *,
               zero_tol: float = 1e-8, degeneracy_tol: float = 1e-2,
               stencil: int = 3) -> list[WellInfo]:
    """Locate the non-degenerate zeros of V and fit their Hessians.

    Candidates are discrete local minima away from the outer wall; each is
    refined by a least-squares quadratic over the ``stencil``-hop neighbourhood
    in normal coordinates.  A fitted Hessian eigenvalue below
    ``degeneracy_tol * max V / diam^2`` marks a degenerate well.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 1 or V.shape[0] != graph.n_nodes:
        raise WellError("V must be a scalar node field")
    if np.any(V < 0):
        raise WellError(f"V must be nonnegative (min {V.min():.3e})")
    vmax = float(V.max())
    if vmax <= 0:
        raise NoWellsError("V vanishes identically; wells are not isolated")
    indptr, idx = graph.csr[0], graph.csr[1]
    src = np.repeat(np.arange(graph.n_nodes), np.diff(indptr))
    lower = (V[idx] < V[src]) | ((V[idx] == V[src]) & (idx < src))
    is_min = np.ones(graph.n_nodes, dtype=bool)
    is_min[src[lower]] = False
    is_min &= ~graph.boundary
    cands = np.flatnonzero(is_min & (V <= max(1e-3 * vmax, zero_tol * vmax)))
    curv_tol = degeneracy_tol * vmax / _domain_diameter(graph) ** 2
    wells = []
    for node in cands:
        ball = graph.hop_ball(node, stencil)
        origin = graph.coords[node]
        X = graph.chart(origin, graph.coords[ball])
        fit = _LocalPoly(X, V[ball])
        _, _, H0 = fit.derivatives(np.zeros(graph.dim))
        if np.linalg.eigvalsh(H0).min() <= curv_tol:
            raise DegenerateWellError(
                f"degenerate well at {origin.tolist()}: fitted Hessian eigenvalues "
                f"{np.linalg.eigvalsh(H0).tolist()} (tolerance {curv_tol:.3e})")
        xstar = fit.minimize()
        vmin, _, H = fit.derivatives(xstar)
        H = 0.5 * (H + H.T)
        heig, hvec = np.linalg.eigh(H)
        if heig.min() <= curv_tol:
            raise DegenerateWellError(
                f"degenerate well at {origin.tolist()}: fitted Hessian eigenvalues "
                f"{heig.tolist()} (tolerance {curv_tol:.3e})")
        vmin = float(vmin)
        if min(abs(vmin), V[node]) > zero_tol * vmax:
            continue
        A = hvec @ np.diag(np.sqrt(heig / 2)) @ hvec.T
        coords = graph.exp_chart(origin, xstar[None, :])[0]
        if W is None:
            w_eigs, w_vecs = np.zeros(1), np.ones((1, 1))
        else:
            Wm = np.array([[graph.interpolate(W[:, a, b], coords[None, :])[0]
                            for b in range(W.shape[2])] for a in range(W.shape[1])])
            w_eigs, w_vecs = np.linalg.eigh(Wm)
        wells.append(WellInfo(index=-1, node=int(node), coords=coords, chart_origin=origin.copy(),
                              offset=xstar, hessian=H, hessian_eigs=np.sort(heig),
                              lam=np.sort(np.sqrt(heig / 2)), A=A, w_eigs=w_eigs,
                              w_vecs=w_vecs, value=vmin))
    if not wells:
        raise NoWellsError("no zeros of V found (shift V so that its minima vanish)")
    wells.sort(key=lambda w: tuple(np.round(w.coords, 12)))
    return [WellInfo(**{**w.__dict__, "index": i}) for i, w in enumerate(wells)]
