"""Hot loops: fast marching, geodesic back-tracing and amplitude transport.

Each kernel is written once in the numba-compatible subset of Python.  When
numba is importable (and ``SEMITUNNEL_NUMBA`` is not ``0``) the functions are
compiled with ``@njit``; otherwise the very same functions run as plain
Python/numpy.  The uncompiled versions stay reachable through ``py_func`` so
the benchmark and the parity tests can compare the two paths in one process.
"""

from __future__ import annotations

import heapq
import math
import os

import numpy as np

_WANT_NUMBA = os.environ.get("SEMITUNNEL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError
    from numba import njit as _njit

    BACKEND = "numba"
except ImportError:  # pragma: no cover - exercised only without numba
    _njit = None
    BACKEND = "python"


def _kernel(fn):
    if _njit is None:
        fn.py_func = fn
        return fn
    return _njit(cache=True, nogil=True)(fn)


# status codes returned by the tracer
TRACE_OK = 0
TRACE_STALLED = 1
TRACE_EXHAUSTED = 2


@_kernel
def _upwind_solve(m, h, gj, vj, ndim):
    # coefficients w_a = g^{aa} / h_a^2 for the active axes, sorted by m;
    # sw d^2 - 2 swm d + swm2 - V = 0, larger root
    order = np.argsort(m)
    best = np.inf
    sw = 0.0
    swm = 0.0
    swm2 = 0.0
    for r in range(ndim):
        a = order[r]
        if not np.isfinite(m[a]):
            break
        w = gj[a] / (h[a] * h[a])
        if w <= 0.0:
            continue
        sw += w
        swm += w * m[a]
        swm2 += w * m[a] * m[a]
        disc = swm * swm - sw * (swm2 - vj)
        if disc < 0.0:
            break
        best = (swm + math.sqrt(disc)) / sw
        if r + 1 < ndim:
            nxt = m[order[r + 1]]
            if best <= nxt or not np.isfinite(nxt):
                break
    return best


@_kernel
def _eikonal_update(j, d, accepted, indptr, indices, eaxis, eh, ginv, V, ndim, lo, hi, order2):
    # smallest accepted neighbour value per axis, then the upwind quadratic
    m = np.full(ndim, np.inf)
    h = np.ones(ndim)
    src = np.full(ndim, -1)
    for p in range(indptr[j], indptr[j + 1]):
        q = indices[p]
        if accepted[q]:
            ax = eaxis[p]
            if d[q] < m[ax]:
                m[ax] = d[q]
                h[ax] = eh[p]
                src[ax] = q
    first = _upwind_solve(m, h, ginv[j], V[j], ndim)
    if not order2:
        return first
    # second-order one-sided difference (3 d - 4 d1 + d2) / 2h where the next
    # node along the same grid line is accepted and upwind
    used = False
    for ax in range(ndim):
        q = src[ax]
        if q < 0:
            continue
        q2 = -1
        if lo[j, ax] == q:
            q2 = lo[q, ax]
        elif hi[j, ax] == q:
            q2 = hi[q, ax]
        if q2 >= 0 and q2 != j and accepted[q2] and d[q2] <= d[q]:
            m[ax] = (4.0 * d[q] - d[q2]) / 3.0
            h[ax] = h[ax] * 2.0 / 3.0
            used = True
    if not used:
        return first
    second = _upwind_solve(m, h, ginv[j], V[j], ndim)
    if not np.isfinite(second):
        return first
    return second


@_kernel
def fast_march_kernel(indptr, indices, eaxis, eh, ginv, V, seed_nodes, seed_vals, ndim,
                      lo, hi, order2):
    """Upwind fast marching on an axis-labelled graph.

    Seeds are frozen at their prescribed values.  ``lo``/``hi`` give the grid
    neighbours per axis (-1 if none) and are only used by the second-order
    stencil.  Returns the distance array, the acceptance order and the
    first-order one-sided (upwind) coordinate gradient.
    """
    n = V.shape[0]
    d = np.full(n, np.inf)
    accepted = np.zeros(n, dtype=np.bool_)
    frozen = np.zeros(n, dtype=np.bool_)
    order = np.empty(n, dtype=np.int64)
    heap = [(0.0, np.int64(-1))]
    heap.pop()
    for s in range(seed_nodes.shape[0]):
        i = seed_nodes[s]
        d[i] = seed_vals[s]
        frozen[i] = True
        heapq.heappush(heap, (seed_vals[s], np.int64(i)))
    count = 0
    while len(heap) > 0:
        dv, i = heapq.heappop(heap)
        if accepted[i] or dv > d[i]:
            continue
        accepted[i] = True
        order[count] = i
        count += 1
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if accepted[j] or frozen[j]:
                continue
            cand = _eikonal_update(j, d, accepted, indptr, indices, eaxis, eh, ginv, V, ndim,
                                   lo, hi, order2)
            if cand < d[j]:
                d[j] = cand
                heapq.heappush(heap, (cand, np.int64(j)))
    grad = np.zeros((n, ndim))
    for i in range(n):
        if not accepted[i]:
            continue
        for ax in range(ndim):
            mv = np.inf
            hv = 1.0
            for p in range(indptr[i], indptr[i + 1]):
                if eaxis[p] == ax and d[indices[p]] < mv:
                    mv = d[indices[p]]
                    hv = eh[p]
            if mv < d[i]:
                grad[i, ax] = (d[i] - mv) / hv
    return d, order[:count], grad


@_kernel
def _interp2(F, u0, u1, origin, spacing, periodic, shape):
    # bilinear interpolation on a logical grid; a length-1 second axis means 1D
    n0 = shape[0]
    n1 = shape[1]
    s0 = (u0 - origin[0]) / spacing[0]
    if periodic[0]:
        s0 = s0 % n0
        i0 = int(math.floor(s0))
        t0 = s0 - i0
        i0 = i0 % n0
        k0 = (i0 + 1) % n0
    else:
        if s0 < 0.0:
            s0 = 0.0
        if s0 > n0 - 1:
            s0 = n0 - 1.0
        i0 = int(math.floor(s0))
        if i0 >= n0 - 1:
            i0 = n0 - 2
        t0 = s0 - i0
        k0 = i0 + 1
    if n1 == 1:
        return (1.0 - t0) * F[i0, 0] + t0 * F[k0, 0]
    s1 = (u1 - origin[1]) / spacing[1]
    if periodic[1]:
        s1 = s1 % n1
        i1 = int(math.floor(s1))
        t1 = s1 - i1
        i1 = i1 % n1
        k1 = (i1 + 1) % n1
    else:
        if s1 < 0.0:
            s1 = 0.0
        if s1 > n1 - 1:
            s1 = n1 - 1.0
        i1 = int(math.floor(s1))
        if i1 >= n1 - 1:
            i1 = n1 - 2
        t1 = s1 - i1
        k1 = i1 + 1
    return ((1.0 - t0) * (1.0 - t1) * F[i0, i1] + t0 * (1.0 - t1) * F[k0, i1]
            + (1.0 - t0) * t1 * F[i0, k1] + t0 * t1 * F[k0, k1])


@_kernel
def interp_grid_kernel(F, pts, origin, spacing, periodic):
    shape = np.array(F.shape, dtype=np.int64)
    out = np.empty(pts.shape[0])
    for k in range(pts.shape[0]):
        u1 = pts[k, 1] if pts.shape[1] > 1 else 0.0
        out[k] = _interp2(F, pts[k, 0], u1, origin, spacing, periodic, shape)
    return out


@_kernel
def trace_kernel(D, G0, G1, starts, origin, spacing, periodic, sphere_radius, step, d_stop,
                 max_steps, grad_tol):
    """Steepest descent on an interpolated distance field.

    ``sphere_radius > 0`` switches the metric to diag(R^2, R^2 sin^2 u0);
    otherwise the metric is Euclidean.  Returns the padded polylines, the
    number of points of each and a status code.
    """
    shape = np.array(D.shape, dtype=np.int64)
    one_d = shape[1] == 1
    m = starts.shape[0]
    pts = np.zeros((m, max_steps + 1, 2))
    npts = np.zeros(m, dtype=np.int64)
    status = np.zeros(m, dtype=np.int64)
    for k in range(m):
        u0 = starts[k, 0]
        u1 = starts[k, 1]
        pts[k, 0, 0] = u0
        pts[k, 0, 1] = u1
        cnt = 1
        st = TRACE_EXHAUSTED
        for it in range(max_steps):
            dv = _interp2(D, u0, u1, origin, spacing, periodic, shape)
            if dv <= d_stop:
                st = TRACE_OK
                break
            g0 = _interp2(G0, u0, u1, origin, spacing, periodic, shape)
            g1 = 0.0
            if not one_d:
                g1 = _interp2(G1, u0, u1, origin, spacing, periodic, shape)
            if sphere_radius > 0.0:
                r2 = sphere_radius * sphere_radius
                sn = math.sin(u0)
                gi0 = 1.0 / r2
                gi1 = 1.0 / (r2 * max(sn * sn, 1e-12))
            else:
                gi0 = 1.0
                gi1 = 1.0
            nrm = math.sqrt(gi0 * g0 * g0 + gi1 * g1 * g1)
            if nrm < grad_tol:
                st = TRACE_STALLED
                break
            u0 = u0 - step * gi0 * g0 / nrm
            u1 = u1 - step * gi1 * g1 / nrm
            if sphere_radius > 0.0:
                if u0 < 0.0:
                    u0 = -u0
                    u1 = u1 + math.pi
                elif u0 > math.pi:
                    u0 = 2.0 * math.pi - u0
                    u1 = u1 + math.pi
            pts[k, cnt, 0] = u0
            pts[k, cnt, 1] = u1
            cnt += 1
        npts[k] = cnt
        status[k] = st
    return pts, npts, status


@_kernel
def _transport_rhs(phi, hxx, hxs, gi, sv, divt, c0, dphi, ndim):
    # d(Phi)/ds = -(H_xx + H_x.xi Phi + Phi H_xi.x + Phi H_xixi Phi) / sqrt(V)
    tr = 0.0
    for i in range(ndim):
        tr += gi[i] * phi[i, i]
        for j in range(ndim):
            acc = hxx[i, j]
            for k in range(ndim):
                acc += hxs[i, k] * phi[k, j] + phi[i, k] * hxs[j, k] + phi[i, k] * gi[k] * phi[k, j]
            dphi[i, j] = -acc / sv
    return 0.5 * (c0 - tr - divt) / sv


@_kernel
def transport_kernel(seg_start, ds, hxx, hxs, gi, sv, divt, cc, phi0, la0, ndim):
    """RK4 for the Hessian Riccati equation and ln a along outward polylines.

    Every segment carries three samples (start, midpoint, end) of the
    precomputed coefficients.  Returns ln a at every vertex, trace after
    trace, and the final Hessian of each trace.
    """
    ntr = seg_start.shape[0] - 1
    out = np.empty(seg_start[ntr] + ntr)
    phi_end = np.empty((ntr, ndim, ndim))
    phi = np.empty((ndim, ndim))
    tmp = np.empty((ndim, ndim))
    k1 = np.empty((ndim, ndim))
    k2 = np.empty((ndim, ndim))
    k3 = np.empty((ndim, ndim))
    k4 = np.empty((ndim, ndim))
    for t in range(ntr):
        for i in range(ndim):
            for j in range(ndim):
                phi[i, j] = phi0[t, i, j]
        la = la0[t]
        v = seg_start[t] + t
        out[v] = la
        for s in range(seg_start[t], seg_start[t + 1]):
            h = ds[s]
            a1 = _transport_rhs(phi, hxx[s, 0], hxs[s, 0], gi[s, 0], sv[s, 0], divt[s, 0], cc[s, 0], k1, ndim)
            for i in range(ndim):
                for j in range(ndim):
                    tmp[i, j] = phi[i, j] + 0.5 * h * k1[i, j]
            a2 = _transport_rhs(tmp, hxx[s, 1], hxs[s, 1], gi[s, 1], sv[s, 1], divt[s, 1], cc[s, 1], k2, ndim)
            for i in range(ndim):
                for j in range(ndim):
                    tmp[i, j] = phi[i, j] + 0.5 * h * k2[i, j]
            a3 = _transport_rhs(tmp, hxx[s, 1], hxs[s, 1], gi[s, 1], sv[s, 1], divt[s, 1], cc[s, 1], k3, ndim)
            for i in range(ndim):
                for j in range(ndim):
                    tmp[i, j] = phi[i, j] + h * k3[i, j]
            a4 = _transport_rhs(tmp, hxx[s, 2], hxs[s, 2], gi[s, 2], sv[s, 2], divt[s, 2], cc[s, 2], k4, ndim)
            for i in range(ndim):
                for j in range(ndim):
                    phi[i, j] += h * (k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j]) / 6.0
            la += h * (a1 + 2.0 * a2 + 2.0 * a3 + a4) / 6.0
            v += 1
            out[v] = la
        for i in range(ndim):
            for j in range(ndim):
                phi_end[t, i, j] = phi[i, j]
    return out, phi_end
