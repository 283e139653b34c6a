"""Leading WKB amplitudes, the stationary-phase coefficient I_0 and hbar-sweep fits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .agmon import AgmonField, WellPairGeometry, trace_geodesics
from .eig import EigenPair
from .expr import Expr, evaluate, parse_expr
from .mesh import DomainGraph

CORE_RATIO = 1e-3           # the transport starts at this fraction of the seeded radius
CORE_STEPS = 160
MAX_TRACES = 400
IDW_NEIGHBOURS = 6
ASYMPTOTIC_LIMIT = 1e-3
NOISE_MARGIN = 1e3


class AsymptoticsError(ValueError):
    pass


class PotentialJet:
    """V with its coordinate gradient and Hessian at arbitrary points (central differences)."""

    def __init__(self, potential: Union[str, Expr], graph: DomainGraph, step: float = 1e-4):
        self.expr = parse_expr(potential) if isinstance(potential, str) else potential
        self.graph = graph
        self.step = step

    def value(self, pts: np.ndarray) -> np.ndarray:
        env = {name: pts[:, i] for i, name in enumerate(self.graph.axis_names)}
        return np.broadcast_to(np.asarray(evaluate(self.expr, env), dtype=float), (len(pts),))

    def __call__(self, points: np.ndarray):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        q, n = pts.shape
        h = np.full((q, n), self.step)
        if self.graph.kind == "sphere_latlong":
            # keep the stencil on one side of the poles
            th = pts[:, 0]
            h[:, 0] = np.minimum(self.step, 0.25 * np.minimum(th, np.pi - th))
        v0 = self.value(pts)
        grad = np.empty((q, n))
        hess = np.empty((q, n, n))
        for i in range(n):
            e = np.zeros((q, n))
            e[:, i] = h[:, i]
            vp, vm = self.value(pts + e), self.value(pts - e)
            grad[:, i] = (vp - vm) / (2 * h[:, i])
            hess[:, i, i] = (vp - 2 * v0 + vm) / h[:, i] ** 2
            for j in range(i):
                f = np.zeros((q, n))
                f[:, j] = h[:, j]
                c = (self.value(pts + e + f) - self.value(pts + e - f)
                     - self.value(pts - e + f) + self.value(pts - e - f)) / (4 * h[:, i] * h[:, j])
                hess[:, i, j] = hess[:, j, i] = c
        return v0, grad, hess


@dataclass(eq=False)
class WKBData:
    """Leading ground-state amplitude a_0 of one well (quasimode hbar^{-n/4} e^{-d/hbar} a_0).

    a_0 solves 2 grad d . grad a + (Delta d + mu - E0) a = 0.  Along each
    traced geodesic the coordinate Hessian Phi of d obeys the Riccati
    equation obtained by differentiating the eikonal equation twice, so
    Delta d comes from Phi rather than from second differences of the
    marched field.  The integration starts on the linearised ray
    X(t) = e^{tA} X_end very close to the well, where Phi and a are known
    from the quadratic model.
    """

    field: AgmonField
    E0: float                   # e_0 / hbar units: mu + sum lambda
    mu: float
    a_well: float
    omega: np.ndarray           # node mask where d passed the smoothness diagnostic
    jet: PotentialJet = field(repr=False)
    mu_field: np.ndarray | None = field(default=None, repr=False)
    a0: np.ndarray | None = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    @property
    def well(self):
        return self.field.well

    def amplitude_at(self, points: np.ndarray) -> np.ndarray:
        """a_0 at arbitrary coordinates (one back-trace per point)."""
        return self.transport_at(points)[0]

    def transport_at(self, points: np.ndarray):
        """(a_0, coordinate Hessian of d) at arbitrary coordinates."""
        traces = trace_geodesics(self.field, np.atleast_2d(np.asarray(points, dtype=float)))
        _, la, phi = self._integrate([t.points for t in traces])
        return np.exp(np.array([x[-1] for x in la])), phi

    # -- internals ---------------------------------------------------------
    def _outward_path(self, poly: np.ndarray) -> np.ndarray:
        g, w = self.field.graph, self.well
        X_end = g.chart(w.chart_origin, poly[-1:]) - w.offset
        r = float(np.linalg.norm(X_end))
        if r < 1e-12:
            return poly[-1:]
        ev, U = np.linalg.eigh(w.A)
        T = np.log(1.0 / CORE_RATIO) / ev.min()
        ts = np.linspace(-T, 0.0, CORE_STEPS + 1)[:-1]
        coef = (U.T @ X_end[0])[None, :] * np.exp(np.outer(ts, ev))
        core = g.exp_chart(w.chart_origin, w.offset + coef @ U.T)[:, :g.dim]
        path = np.vstack([core, poly[::-1]])
        du = g.wrap_delta(np.diff(path, axis=0))
        keep = np.concatenate([[True], np.linalg.norm(du, axis=1) > 1e-13])
        return path[keep]

    def _model_hessian(self, x0: np.ndarray) -> np.ndarray:
        g, w = self.field.graph, self.well
        n = g.dim

        def dm(p):
            X = g.chart(w.chart_origin, p) - w.offset
            return 0.5 * np.einsum("qi,ij,qj->q", X, w.A, X)

        r = float(np.linalg.norm(g.chart(w.chart_origin, x0[None]) - w.offset))
        gi = g.inverse_metric_jet(x0[None])[0][0]
        h = 1e-2 * r * np.sqrt(gi)
        out = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                pts = []
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    p = x0.copy()
                    p[i] += si * h[i]
                    p[j] += sj * h[j]
                    pts.append(p)
                v = dm(np.array(pts))
                out[i, j] = (v[0] - v[1] - v[2] + v[3]) / (4 * h[i] * h[j])
        return 0.5 * (out + out.T)

    def _integrate(self, polys):
        g = self.field.graph
        n = g.dim
        paths = [self._outward_path(np.asarray(p)[:, :n]) for p in polys]
        nseg = np.array([len(p) - 1 for p in paths], dtype=np.int64)
        seg_start = np.concatenate([[0], np.cumsum(nseg)]).astype(np.int64)
        K = int(seg_start[-1])
        P0 = np.vstack([p[:-1] for p in paths if len(p) > 1]) if K else np.zeros((0, n))
        P1 = np.vstack([p[1:] for p in paths if len(p) > 1]) if K else np.zeros((0, n))
        du = g.wrap_delta(P1 - P0)
        ds = g.segment_lengths(P0, P1) if K else np.zeros(0)
        u = du / np.maximum(ds, 1e-300)[:, None]
        S = (P0[:, None, :] + np.array([0.0, 0.5, 1.0])[None, :, None] * du[:, None, :]).reshape(-1, n)
        V, _, hess = self.jet(S) if K else (np.zeros(0), None, np.zeros((0, n, n)))
        gi, d1, d2, b = g.inverse_metric_jet(S)
        sv = np.sqrt(np.maximum(V, 1e-300))
        xi = np.repeat(u, 3, axis=0) * sv[:, None] / gi
        hxx = 0.5 * np.einsum("qijk,qk->qij", d2, xi * xi) - 0.5 * hess
        hxs = d1 * xi[:, None, :]
        divt = np.sum(b * xi, axis=1)
        if self.mu_field is not None:
            cc = self.E0 - g.interpolate(self.mu_field, S)
        else:
            cc = np.full(len(S), self.E0 - self.mu)
        phi0 = np.array([self._model_hessian(p[0]) if len(p) > 1 else np.array(self.well.A)
                         for p in paths])
        la0 = np.full(len(paths), np.log(self.a_well))
        la, phi = kernels.transport_kernel(
            seg_start, ds, hxx.reshape(K, 3, n, n), hxs.reshape(K, 3, n, n), gi.reshape(K, 3, n),
            sv.reshape(K, 3), divt.reshape(K, 3), cc.reshape(K, 3), phi0, la0, n)
        out_la = [la[seg_start[t] + t: seg_start[t + 1] + t + 1] for t in range(len(paths))]
        return paths, out_la, phi


def _fan_starts(g: DomainGraph, omega: np.ndarray, max_traces: int) -> np.ndarray:
    idx = np.flatnonzero(omega)
    if len(idx) == 0:
        return idx
    indptr, nbrs = g.csr[0], g.csr[1]
    rim = [i for i in idx if np.any(~omega[nbrs[indptr[i]:indptr[i + 1]]]) or g.boundary[i]]
    rim = np.asarray(rim, dtype=np.int64)
    if len(rim) > max_traces // 2:
        rim = rim[np.linspace(0, len(rim) - 1, max_traces // 2).astype(np.int64)]
    inner = np.setdiff1d(idx, rim)
    k = max(0, min(len(inner), max_traces - len(rim)))
    if k:
        inner = inner[np.linspace(0, len(inner) - 1, k).astype(np.int64)]
    else:
        inner = inner[:0]
    return np.union1d(rim, inner)


def transport_amplitude(field: AgmonField, *, potential: Union[str, Expr], W: np.ndarray | None = None,
                        branch: int = 0, nodes: bool = True, others: Sequence[AgmonField] = (),
                        kappa: float = 20.0, max_traces: int = MAX_TRACES) -> WKBData:
    """Leading WKB amplitude of the ground state of ``field.well`` on the smooth region.

    ``branch`` picks the eigenvalue of the endomorphism W; for a constant W
    the branches decouple.  With ``nodes`` the amplitude is traced along a
    fan of geodesics and scattered to the nodes of the smooth region by
    inverse-distance weighting.
    """
    well = field.well
    if well is None:
        raise AsymptoticsError("transport needs a field sourced at a detected well")
    mus = np.asarray(well.w_eigs, dtype=float)
    if not 0 <= branch < len(mus):
        raise AsymptoticsError(f"branch {branch} out of range for rank {len(mus)}")
    mu = float(mus[branch])
    if np.any(np.abs(np.delete(mus, branch) - mu) <= 1e-12 * max(1.0, abs(mu))):
        raise AsymptoticsError("ground level is not simple: repeated endomorphism eigenvalue")
    g = field.graph
    mu_field = None
    if W is not None:
        W = np.asarray(W, dtype=float)
        ev = np.linalg.eigvalsh(W)[:, branch]
        if np.ptp(ev) > 1e-14 * max(1.0, np.abs(ev).max()):
            mu_field = ev
    wkb = WKBData(field=field, E0=mu + float(np.sum(well.lam)), mu=mu, a_well=well.amplitude_at_well(),
                  omega=field.smooth_region(others, kappa=kappa), jet=PotentialJet(potential, g),
                  mu_field=mu_field)
    if not nodes:
        return wkb
    starts = _fan_starts(g, wkb.omega, max_traces)
    traces = trace_geodesics(field, g.coords[starts], strict=False)
    ok = [t for t in traces if t is not None]
    wkb.diagnostics = {"traces": len(ok), "dropped_traces": len(traces) - len(ok)}
    if not ok:
        raise AsymptoticsError("no geodesic of the fan reached the well")
    paths, la, _ = wkb._integrate([t.points for t in ok])
    pts = np.vstack(paths)
    vals = np.concatenate(la)
    tree = cKDTree(g.embed(pts))
    a0 = np.full(g.n_nodes, np.nan)
    idx = np.flatnonzero(wkb.omega)
    k = min(IDW_NEIGHBOURS, len(pts))
    dist, nb = tree.query(g.embed(g.coords[idx]), k=k)
    dist, nb = np.atleast_2d(dist.T).T, np.atleast_2d(nb.T).T
    wts = 1.0 / np.maximum(dist, 1e-12) ** 2
    a0[idx] = np.exp(np.sum(wts * vals[nb], axis=1) / np.sum(wts, axis=1))
    wkb.a0 = a0
    return wkb


# ---------------------------------------------------------------------------
# stationary phase
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeadingOrder:
    I0: float                   # signed
    ell: int
    S: float
    n_points: int
    details: dict

    def prefactor(self, hbar: float) -> float:
        """2 hbar^{(1 - l)/2} |I_0|: predicted splitting without the exponential."""
        return 2.0 * hbar ** ((1 - self.ell) / 2) * abs(self.I0)

    def predicted_splitting(self, hbar: float) -> float:
        return self.prefactor(hbar) * float(np.exp(-self.S / hbar))


def _normal_derivative(pair: WellPairGeometry, points, normals) -> np.ndarray:
    """d(d^k - d^j)(N) from interpolated eikonal gradients."""
    g = pair.graph
    gj = pair.fj.grad
    gk = pair.fk.grad
    out = np.zeros(len(points))
    for i in range(g.dim):
        comp = g.interpolate(gk[:, i] - gj[:, i], points)
        out += comp * normals[:, i]
    return out


def _transverse_from_transport(pair: WellPairGeometry, pts, nrm, phi_j, phi_k) -> list:
    """t^T (Phi_j + Phi_k) t along the g-unit Sigma tangent (2D, l = 0).

    grad(d^j + d^k) vanishes on H, so the coordinate Hessian is the covariant one.
    """
    g = pair.graph
    gm = g.metric_at(pts)
    out = []
    for q in range(len(pts)):
        t = np.array([-gm[q, 1] * nrm[q, 1], gm[q, 0] * nrm[q, 0]])
        t /= np.sqrt(np.sum(gm[q] * t * t))
        out.append(np.array([[t @ (phi_j[q] + phi_k[q]) @ t]]))
    return out


def leading_I0(pair: WellPairGeometry, wkb_j: WKBData, wkb_k: WKBData, *,
               hessian: str = "transport") -> LeadingOrder:
    """Stationary-phase leading coefficient for a ground-state pair.

    Case l = 0: I_0 = (2 pi)^{(n-1)/2} det(D^2)^{-1/2} d(d^k - d^j)(N) a_j a_k at the
    point of H.  Case l > 0: the same integrand integrated over H with
    the prefactor (2 pi)^{(n-l-1)/2}.  The transverse Hessian D^2 comes from
    the Riccati Hessians carried by the transport (``hessian="transport"``)
    or from the second differences stored on the pair (``"mesh"``).
    """
    if hessian not in ("transport", "mesh"):
        raise AsymptoticsError("hessian must be 'transport' or 'mesh'")
    if wkb_j.field is not pair.fj or wkb_k.field is not pair.fk:
        raise AsymptoticsError("WKB data do not belong to this pair")
    n = pair.graph.dim
    ell = pair.ell
    pts, nrm, wts = pair.H_points, pair.H_normals, pair.H_weights
    if len(pts) == 0:
        raise AsymptoticsError("H is empty")
    aj, phi_j = wkb_j.transport_at(pts)
    ak, phi_k = wkb_k.transport_at(pts)
    tdim = n - ell - 1
    if tdim == 0:
        hess = [np.zeros((0, 0))] * len(pts)
    elif hessian == "transport" and tdim == 1 and n == 2:
        hess = _transverse_from_transport(pair, pts, nrm, phi_j, phi_k)
    else:
        hess = list(pair.transverse_hessian)
    dets = []
    for D in hess:
        D = np.atleast_2d(D)
        if D.size == 0:
            dets.append(1.0)
            continue
        ev = np.linalg.eigvalsh(0.5 * (D + D.T))
        if np.any(ev <= 0):
            raise AsymptoticsError(f"transverse Hessian not positive definite: {ev.tolist()}")
        dets.append(float(np.prod(ev)))
    dets = np.asarray(dets)
    dn = _normal_derivative(pair, pts, nrm)
    integrand = dets ** -0.5 * dn * aj * ak
    pref = (2 * np.pi) ** ((n - ell - 1) / 2)
    if ell == 0:
        I0 = pref * float(integrand[0])
    else:
        I0 = pref * float(np.sum(integrand * wts))
    mesh_d2 = [np.atleast_2d(D).tolist() for D in pair.transverse_hessian] if tdim else []
    details = {
        "normal_derivative_mean": float(np.mean(dn)),
        "amplitude_j_mean": float(np.mean(aj)),
        "amplitude_k_mean": float(np.mean(ak)),
        "det_D2": dets.tolist() if ell == 0 else [],
        "D2_mesh": mesh_d2 if ell == 0 else [],
        "hessian_source": hessian if tdim else "none",
        "H_measure": float(np.sum(wts)) if ell > 0 else 0.0,
    }
    return LeadingOrder(I0=I0, ell=ell, S=pair.S, n_points=len(pts), details=details)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepFit:
    S: float
    p: float
    c: float
    stderr: tuple
    residuals: np.ndarray
    cond: float
    n_points: int

    def to_dict(self) -> dict:
        return {"S": self.S, "p": self.p, "c": self.c,
                "stderr": {"S": self.stderr[0], "p": self.stderr[1], "c": self.stderr[2]},
                "residuals": [float(r) for r in self.residuals], "cond": self.cond,
                "n_points": self.n_points}


def fit_sweep(hbar: Sequence[float], delta: Sequence[float], *, max_cond: float = 1e12) -> SweepFit:
    """Least squares of log Delta = -S/hbar + p log hbar + c."""
    h = np.asarray(hbar, dtype=float)
    dlt = np.asarray(delta, dtype=float)
    if len(h) != len(dlt):
        raise AsymptoticsError("hbar and delta lengths differ")
    if len(h) < 4:
        raise AsymptoticsError(f"fit needs at least 4 points, got {len(h)}")
    if np.any(dlt <= 0) or not np.all(np.isfinite(dlt)):
        raise AsymptoticsError("splittings must be positive and finite")
    X = np.column_stack([-1.0 / h, np.log(h), np.ones_like(h)])
    y = np.log(dlt)
    # column scaling keeps the condition number about the design, not the units
    scale = np.linalg.norm(X, axis=0)
    Xs = X / scale
    cond = float(np.linalg.cond(Xs))
    if not np.isfinite(cond) or cond > max_cond or np.linalg.matrix_rank(Xs) < 3:
        raise AsymptoticsError(f"rank-deficient design (cond {cond:.3e}); widen the hbar range")
    coef, *_ = np.linalg.lstsq(Xs, y, rcond=None)
    coef = coef / scale
    res = y - X @ coef
    dof = len(h) - 3
    if dof > 0:
        s2 = float(res @ res) / dof
        cov = s2 * np.linalg.inv(X.T @ X)
        se = tuple(float(np.sqrt(max(v, 0.0))) for v in np.diag(cov))
    else:
        se = (float("nan"),) * 3
    return SweepFit(S=float(coef[0]), p=float(coef[1]), c=float(coef[2]), stderr=se,
                    residuals=res, cond=cond, n_points=len(h))


def trust_window(hbar: Sequence[float], S: float, delta: Sequence[float],
                 floors: Sequence[float]) -> np.ndarray:
    """hbar values in the asymptotic regime with splittings well above the noise floor.

    Asymptotic: e^{-S/hbar} <= 1e-3.  Resolved: Delta >= 1e3 * floor.
    """
    h = np.asarray(hbar, dtype=float)
    dlt = np.asarray(delta, dtype=float)
    fl = np.asarray(floors, dtype=float)
    return (np.exp(-S / h) <= ASYMPTOTIC_LIMIT) & (dlt >= NOISE_MARGIN * fl)


def leading_ratio(delta: float, hbar: float, lead: LeadingOrder) -> float:
    """R = Delta / (2 hbar^{(1-l)/2} e^{-S/hbar} |I_0|)."""
    return float(delta / lead.predicted_splitting(hbar))


# ---------------------------------------------------------------------------
# Agmon decay
# ---------------------------------------------------------------------------

@dataclass
class DecayCheck:
    hbar: list
    norms: list
    excluded: list              # volume fraction of the support cut by the overflow guard
    N0: float                   # fitted slope of log norm against log(1/hbar)

    def to_dict(self) -> dict:
        return {"hbar": self.hbar, "norms": self.norms, "excluded": self.excluded, "N0": self.N0}


def weighted_norm(mode, field: AgmonField, hbar: float, eps: float = 0.05,
                  limit: float = 650.0) -> tuple[float, float]:
    """||e^{(1-eps) d/hbar} v|| over the region where the exponent stays below ``limit``.

    Returns the norm and the volume fraction of supp v that was excluded.
    """
    v = mode.vector if isinstance(mode, EigenPair) else np.asarray(mode, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    g = field.graph
    expo = (1.0 - eps) * field.d / hbar
    ok = expo <= limit
    supp = np.any(v != 0, axis=1)
    vol_supp = float(np.sum(g.volume[supp]))
    excluded = float(np.sum(g.volume[supp & ~ok])) / vol_supp if vol_supp > 0 else 0.0
    wts = np.where(ok, np.exp(np.minimum(expo, limit)), 0.0)
    nrm = float(np.sqrt(np.sum(g.volume * wts ** 2 * np.sum(v * v, axis=1))))
    return nrm, excluded


def agmon_decay_check(modes: Sequence, field: AgmonField, hbar_list: Sequence[float], *,
                      eps: float = 0.05) -> DecayCheck:
    """Weighted norms across a sweep and the fitted growth exponent N_0."""
    norms, excl = [], []
    for mode, hb in zip(modes, hbar_list):
        nrm, ex = weighted_norm(mode, field, hb, eps)
        if ex > 0.5:
            raise AsymptoticsError(f"hbar = {hb}: overflow guard excluded {ex:.0%} of the support")
        norms.append(nrm)
        excl.append(ex)
    h = np.asarray(hbar_list, dtype=float)
    if len(h) >= 2:
        N0 = float(np.polyfit(np.log(1.0 / h), np.log(norms), 1)[0])
    else:
        N0 = float("nan")
    return DecayCheck(hbar=[float(x) for x in h], norms=norms, excluded=excl, N0=N0)
