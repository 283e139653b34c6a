"""Discrete H = hbar^2 L + hbar W + V on a DomainGraph and the identities it satisfies.

The volume-weighted inner product <u, v> = sum_i vol_i u_i . v_i makes the
finite-volume Laplacian L = M^{-1} K self-adjoint, where K is the stiffness
matrix built from edge conductances and M = diag(vol).  Matrices are stored in
the unitarily equivalent symmetric form

    A = hbar^2 M^{-1/2} K M^{-1/2} + V + hbar W

acting on y = M^{1/2} v, so that the Euclidean dot product of y's is the
volume inner product of v's.  Unknowns are node-major: (node, component).
Outer-wall nodes are eliminated (homogeneous Dirichlet).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .agmon import AgmonField
from .mesh import DomainGraph, discrete_gradient, metric_norm2
from .potential import WellInfo

EXP_CLAMP = 700.0
DIAGNOSTIC_LIMIT = 650.0


class OperatorError(ValueError):
    pass


class RegionError(OperatorError):
    pass


class PartitionError(OperatorError):
    pass


def stiffness(graph: DomainGraph) -> sp.csr_matrix:
    """Symmetric graph Laplacian K with K u . u = sum_edges c (u_b - u_a)^2."""
    a, b = graph.edges[:, 0], graph.edges[:, 1]
    c = graph.conductance
    n = graph.n_nodes
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([b, a, a, b])
    vals = np.concatenate([-c, -c, c, c])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _as_endomorphism(W, n: int) -> np.ndarray:
    if W is None:
        return np.zeros((n, 1, 1))
    W = np.asarray(W, dtype=float)
    if W.ndim == 2:
        W = np.broadcast_to(W, (n,) + W.shape).copy()
    if W.ndim != 3 or W.shape[0] != n or W.shape[1] != W.shape[2]:
        raise OperatorError(f"W has shape {W.shape}, expected (r, r) or ({n}, r, r)")
    if not np.array_equal(W, np.swapaxes(W, 1, 2)):
        raise OperatorError("W is not symmetric")
    return W


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Sparse symmetric matrix of H restricted to ``nodes`` (see module docstring)."""

    matrix: sp.csr_matrix
    hbar: float
    rank: int
    graph: DomainGraph
    nodes: np.ndarray           # active node ids, ascending
    V: np.ndarray
    W: np.ndarray               # (n, r, r)
    region: Optional[np.ndarray] = None   # Dirichlet mask if restricted
    info: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.graph.n_nodes, dtype=bool)
        m[self.nodes] = True
        return m

    def norm_estimate(self) -> float:
        """Row-sum bound on the spectral norm."""
        if "norm" not in self.info:
            self.info["norm"] = float(abs(self.matrix).sum(axis=1).max())
        return self.info["norm"]

    def lower_bound(self) -> float:
        """-hbar max ||W||: the discrete semiboundedness constant."""
        wn = np.abs(np.linalg.eigvalsh(self.W)).max() if self.W.size else 0.0
        return -self.hbar * float(wn)

    # -- field <-> vector ---------------------------------------------------
    def to_vector(self, v: np.ndarray) -> np.ndarray:
        """Node field (n,) or (n, r) -> symmetric-form vector y = M^{1/2} v on active nodes."""
        v = np.asarray(v)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape != (self.graph.n_nodes, self.rank):
            raise OperatorError(f"field shape {v.shape} does not match ({self.graph.n_nodes}, {self.rank})")
        w = np.sqrt(self.graph.volume[self.nodes])[:, None]
        return (w * v[self.nodes]).ravel()

    def to_field(self, y: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_vector`; inactive nodes are zero.  Shape (n, r)."""
        y = np.asarray(y)
        out = np.zeros((self.graph.n_nodes, self.rank), dtype=y.dtype)
        out[self.nodes] = y.reshape(-1, self.rank) / np.sqrt(self.graph.volume[self.nodes])[:, None]
        return out

    def node_of(self, k: int) -> int:
        return int(self.nodes[k // self.rank])

    def diag_expand(self, f: np.ndarray) -> np.ndarray:
        """Per-node scalar -> per-unknown diagonal."""
        return np.repeat(np.asarray(f)[self.nodes], self.rank)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """H v for a node field, returned as a node field."""
        return self.to_field(self.matrix @ self.to_vector(v))

    # -- extended precision -------------------------------------------------
    def energy_form(self, fields: Sequence[np.ndarray], dtype=np.longdouble):
        """Gram and energy matrices <v_i, v_j>, <v_i, H v_j> from the edge form.

        The energy is evaluated as hbar^2 sum_edges c dv_i . dv_j +
        sum_nodes vol (V v_i . v_j + hbar v_i^T W v_j), which avoids the
        cancellation between diagonal and off-diagonal stiffness entries and
        is accumulated in ``dtype``.
        """
        g = self.graph
        X = np.stack([np.asarray(f, dtype=dtype).reshape(g.n_nodes, self.rank) for f in fields])
        mask = self.mask
        X[:, ~mask] = 0
        a, b = g.edges[:, 0], g.edges[:, 1]
        c = g.conductance.astype(dtype)
        vol = g.volume.astype(dtype)
        hb = dtype(self.hbar)
        dX = X[:, b] - X[:, a]
        WX = np.einsum("nrs,jns->jnr", self.W.astype(dtype), X)
        m = len(fields)
        kin = np.empty((m, m), dtype=dtype)
        pot = np.empty((m, m), dtype=dtype)
        wt = np.empty((m, m), dtype=dtype)
        gram = np.empty((m, m), dtype=dtype)
        vV = vol * self.V.astype(dtype)
        # elementwise products reduced with np.sum (pairwise summation)
        for i in range(m):
            for j in range(m):
                kin[i, j] = np.sum(c[:, None] * dX[i] * dX[j])
                pot[i, j] = np.sum(vV[:, None] * X[i] * X[j])
                wt[i, j] = np.sum(vol[:, None] * X[i] * WX[j])
                gram[i, j] = np.sum(vol[:, None] * X[i] * X[j])
        H = hb * hb * kin + pot + hb * wt
        return 0.5 * (H + H.T), 0.5 * (gram + gram.T)

    # -- export ------------------------------------------------------------
    def to_coo_text(self) -> str:
        """Coordinate list 'row col value' with a one-line header, values in full precision."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        lines = [f"% rows={self.size} cols={self.size} nnz={coo.nnz} rank={self.rank} hbar={self.hbar!r}"]
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            lines.append(f"{r} {c} {float(v)!r}")
        return "\n".join(lines) + "\n"

    def save_coo(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_coo_text())


def assemble(graph: DomainGraph, V: np.ndarray, W=None, hbar: float = 1.0) -> DiscreteOperator:
    """Assemble hbar^2 L + hbar W + V with homogeneous Dirichlet data on the outer wall."""
    V = np.asarray(V, dtype=float)
    if V.shape != (graph.n_nodes,):
        raise OperatorError(f"V has shape {V.shape}, expected ({graph.n_nodes},)")
    if not hbar > 0:
        raise OperatorError("hbar must be positive")
    if np.any(V < 0):
        raise OperatorError("V must be nonnegative")
    Wf = _as_endomorphism(W, graph.n_nodes)
    r = Wf.shape[1]
    nodes = np.flatnonzero(~graph.boundary)
    K = stiffness(graph)[nodes][:, nodes]
    s = 1.0 / np.sqrt(graph.volume[nodes])
    L = sp.diags(s) @ K @ sp.diags(s)
    L = (hbar * hbar) * L
    A = sp.kron(L, sp.identity(r), format="csr")
    A = A + sp.diags(np.repeat(V[nodes], r))
    if np.any(Wf):
        blocks = sp.block_diag([Wf[i] for i in nodes], format="csr")
        A = A + hbar * blocks
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    # remove rounding asymmetry from the triple product without averaging the model:
    # every off-diagonal entry is c_ab * s_a * s_b, computed once and mirrored
    A = _mirror_upper(A)
    return DiscreteOperator(matrix=A, hbar=float(hbar), rank=r, graph=graph, nodes=nodes,
                            V=V, W=Wf)


def _mirror_upper(A: sp.csr_matrix) -> sp.csr_matrix:
    U = sp.triu(A, k=1, format="csr")
    D = sp.diags(A.diagonal())
    out = (U + U.T + D).tocsr()
    out.sort_indices()
    return out


def dirichlet_restrict(op: DiscreteOperator, region, *, wells: Sequence[WellInfo] | None = None,
                       field: AgmonField | None = None, radius: float | None = None) -> DiscreteOperator:
    """Principal submatrix of ``op`` on the nodes of ``region``.

    ``region`` is a boolean node mask or a predicate on coordinates.  With
    ``wells`` the region must contain exactly one of them; with ``field`` and
    ``radius`` the Agmon ball {d < radius} of that well must lie inside the
    region and away from the outer wall.
    """
    g = op.graph
    if callable(region):
        mask = np.asarray(region(g.coords), dtype=bool)
    else:
        mask = np.asarray(region, dtype=bool)
    if mask.shape != (g.n_nodes,):
        raise RegionError(f"region mask has shape {mask.shape}, expected ({g.n_nodes},)")
    inside = mask & op.mask
    if wells is not None:
        hits = [w.index for w in wells if mask[w.node]]
        if len(hits) != 1:
            raise RegionError(f"region contains {len(hits)} wells {hits}; exactly one is required")
    if field is not None and radius is not None:
        ball = field.d < radius
        if np.any(ball & g.boundary):
            raise RegionError(f"Agmon ball of radius {radius:.4g} around well {field.source} "
                              "touches the outer boundary")
        if np.any(ball & ~mask):
            raise RegionError(f"region does not contain the Agmon ball of radius {radius:.4g}")
    keep = np.flatnonzero(inside[op.nodes])
    idx = (keep[:, None] * op.rank + np.arange(op.rank)[None, :]).ravel()
    sub = op.matrix[idx][:, idx].tocsr()
    sub.sort_indices()
    return DiscreteOperator(matrix=sub, hbar=op.hbar, rank=op.rank, graph=g,
                            nodes=op.nodes[keep], V=op.V, W=op.W, region=mask)


def well_region(fields: Sequence[AgmonField], j: int, rho: float) -> np.ndarray:
    """Default M_j: component through m^j of {d^k > rho for every k != j}.

    Removing small Agmon balls around the other wells decouples them while
    keeping everything else, in particular the whole tunnelling region.
    """
    g = fields[j].graph
    mask = np.ones(g.n_nodes, dtype=bool)
    for k, f in enumerate(fields):
        if k != j:
            mask &= f.d > rho
    return g.component(mask, fields[j].well.node)


# ---------------------------------------------------------------------------
# conjugation and the weighted energy identity
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConjugatedOperator:
    """e^{phi/hbar} H e^{-phi/hbar} in the symmetric representation (not symmetric)."""

    matrix: sp.csr_matrix
    base: DiscreteOperator
    phi: np.ndarray
    clamped: int                # number of active nodes where phi/hbar was clamped
    exponent: np.ndarray        # clamped phi/hbar on the active unknowns

    def to_vector(self, v):
        return self.base.to_vector(v)

    def to_field(self, y):
        return self.base.to_field(y)


def conjugate(op: DiscreteOperator, phi: np.ndarray) -> ConjugatedOperator:
    """Similarity transform by diag(e^{phi/hbar}) with the exponent clamped at 700."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (op.graph.n_nodes,) or not np.all(np.isfinite(phi)):
        raise OperatorError("phi must be a finite scalar node field")
    e = op.diag_expand(phi) / op.hbar
    clamped = int(np.sum(np.abs(e) > EXP_CLAMP) // op.rank)
    e = np.clip(e, -EXP_CLAMP, EXP_CLAMP)
    A = op.matrix.tocoo()
    with np.errstate(over="ignore"):
        scale = np.exp(e[A.row] - e[A.col])
    if not np.all(np.isfinite(scale)):
        raise OperatorError("overflow in e^{phi/hbar} despite clamping: phi jumps by more "
                            f"than {2 * EXP_CLAMP} hbar across an edge")
    M = sp.csr_matrix((A.data * scale, (A.row, A.col)), shape=A.shape)
    return ConjugatedOperator(matrix=M, base=op, phi=phi, clamped=clamped, exponent=e)


def weighted_identity_residual(op: DiscreteOperator, phi: np.ndarray, E: float,
                               v: np.ndarray, *, relative: bool = False) -> float:
    """|lhs - rhs| of the weighted energy identity for a real field v.

    lhs = <v, e^{phi/hbar} (H - E) e^{-phi/hbar} v>, computed with the
    conjugated matrix.  rhs = hbar^2 ||grad v||^2 + <v, (hbar W + V - |dphi|^2 - E) v>,
    computed from edge differences and the discrete gradient of phi.  With
    ``relative`` the residual is divided by ||v||^2.
    """
    g = op.graph
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    v = v * op.mask[:, None]
    support = np.any(v != 0, axis=1)
    if np.any(np.abs(phi[support]) / op.hbar > DIAGNOSTIC_LIMIT):
        raise OperatorError(f"v reaches phi/hbar > {DIAGNOSTIC_LIMIT}; restrict its support")
    C = conjugate(op, phi)
    y = op.to_vector(v)
    lhs = float(y @ (C.matrix @ y)) - E * float(y @ y)
    a, b = g.edges[:, 0], g.edges[:, 1]
    dv = v[b] - v[a]
    kin = float(np.sum(g.conductance * np.sum(dv * dv, axis=1)))
    dphi2 = metric_norm2(g, discrete_gradient(g, phi))
    vv = np.sum(v * v, axis=1)
    vWv = np.einsum("nr,nrs,ns->n", v, op.W, v)
    pot = float(np.sum(g.volume * ((op.V - dphi2 - E) * vv + op.hbar * vWv)))
    rhs = op.hbar ** 2 * kin + pot
    res = abs(lhs - rhs)
    if relative:
        res /= float(np.sum(g.volume * vv))
    return res


# ---------------------------------------------------------------------------
# cutoffs and IMS localization
# ---------------------------------------------------------------------------

def smoothstep_profile(t: np.ndarray) -> np.ndarray:
    """1 - t^3 (10 - 15 t + 6 t^2) on [0, 1], clamped outside: C^2, 1 -> 0."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return 1.0 - t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t)


@dataclass(frozen=True, eq=False)
class CutoffField:
    chi: np.ndarray
    inner_radius: float
    outer_radius: float
    source: int = -1

    def grad_norm2(self, graph: DomainGraph) -> np.ndarray:
        return metric_norm2(graph, discrete_gradient(graph, self.chi))


def make_cutoff(field: AgmonField, inner: float, outer: float, *,
                others: Sequence[float] | None = None) -> CutoffField:
    """chi_j = profile((d^j - inner) / (outer - inner)).

    ``others`` are the distances S_jk to the other wells; the radii must stay
    below all of them.
    """
    if not 0 < inner < outer:
        raise OperatorError(f"cutoff radii must satisfy 0 < inner < outer (got {inner}, {outer})")
    if others is not None and len(others) and outer >= min(others):
        raise OperatorError(f"outer radius {outer} must be below min S_jk = {min(others)}")
    chi = smoothstep_profile((field.d - inner) / (outer - inner))
    return CutoffField(chi=chi, inner_radius=float(inner), outer_radius=float(outer),
                       source=field.source)


def angular_partition(field: AgmonField, inner: float, outer: float) -> list[CutoffField]:
    """Two-piece quadratic partition chi_1 = cos(theta), chi_2 = sin(theta).

    theta = (pi/2)(1 - profile(t)) runs from 0 inside the inner radius to
    pi/2 outside the outer one, so chi_1^2 + chi_2^2 = 1 exactly and both
    pieces are smooth.
    """
    base = make_cutoff(field, inner, outer)
    theta = 0.5 * np.pi * (1.0 - base.chi)
    c1 = np.where(base.chi >= 1.0, 1.0, np.cos(theta))
    s1 = np.where(base.chi <= 0.0, 1.0, np.sin(theta))
    return [CutoffField(c1, inner, outer, field.source), CutoffField(s1, inner, outer, -1)]


def ims_residual(op: DiscreteOperator, cutoffs: Sequence[Union[CutoffField, np.ndarray]], *,
                 probe: np.ndarray | None = None, tol: float = 1e-10) -> float:
    """Residual of H = sum chi H chi - hbar^2 sum |dchi|^2.

    Without ``probe`` this is the max-norm of the residual matrix.  On a grid
    that matrix has O(1) entries of alternating sign (the continuum identity
    only holds after summing over a stencil), so for convergence studies pass
    a smooth ``probe`` field: the result is then the max-norm of R probe.
    """
    g = op.graph
    chis = [c.chi if isinstance(c, CutoffField) else np.asarray(c, dtype=float) for c in cutoffs]
    total = np.sum([c * c for c in chis], axis=0)
    bad = np.abs(total - 1.0) > tol
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise PartitionError(f"sum chi^2 = {total[i]!r} != 1 at node {i}")
    A = op.matrix
    R = A.copy()
    corr = np.zeros(g.n_nodes)
    for c in chis:
        D = sp.diags(op.diag_expand(c))
        R = R - D @ A @ D
        corr += metric_norm2(g, discrete_gradient(g, c))
    R = R + (op.hbar ** 2) * sp.diags(op.diag_expand(corr))
    if probe is None:
        return float(abs(R).max()) if R.nnz else 0.0
    y = R @ op.to_vector(probe)
    return float(np.max(np.abs(op.to_field(y))))
