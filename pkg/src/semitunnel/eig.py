"""Low-lying spectra, extended-precision cluster refinement and harmonic reference levels."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .operators import DiscreteOperator
from .potential import WellInfo

DENSE_LIMIT = 3000
LANCZOS_MAXITER = 500
RESIDUAL_TOL = 1e-8
ORTHO_TOL = 1e-8


class EigenError(RuntimeError):
    pass


class WindowError(EigenError):
    pass


@dataclass(frozen=True, eq=False)
class EigenPair:
    value: float
    vector: np.ndarray      # node field (n, r), ||v||_vol = 1
    residual: float
    y: np.ndarray = field(repr=False, default=None)   # symmetric-form vector

    def summary(self) -> dict:
        return {"value": self.value, "residual": self.residual}


def _gauge(y: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(y)))
    return -y if y[i] < 0 else y


def _is_tridiagonal(A: sp.csr_matrix) -> bool:
    coo = A.tocoo()
    return bool(np.all(np.abs(coo.row - coo.col) <= 1))


def _dense_lowest(A: sp.csr_matrix, k: int, window):
    n = A.shape[0]
    k = min(k, n)
    if _is_tridiagonal(A) and n > 2:
        d = A.diagonal()
        e = A.diagonal(1)
        if window is None:
            w, V = sla.eigh_tridiagonal(d, e, select="i", select_range=(0, k - 1))
        else:
            w, V = sla.eigh_tridiagonal(d, e, select="v", select_range=window)
    else:
        M = A.toarray()
        if window is None:
            w, V = sla.eigh(M, subset_by_index=[0, k - 1])
        else:
            w, V = sla.eigh(M, subset_by_value=window)
    return w[:k], V[:, :k]


def _factorize(A: sp.csr_matrix, sigma: float, scale: float):
    """LU of A - sigma I; a singular factorization nudges sigma down, at most 3 times."""
    n = A.shape[0]
    last = None
    for attempt in range(4):
        try:
            lu = spla.splu((A - sigma * sp.identity(n, format="csr")).tocsc(),
                           permc_spec="COLAMD")
            if not np.all(np.isfinite(lu.U.diagonal())) or np.any(lu.U.diagonal() == 0):
                raise RuntimeError("exactly singular")
            return lu, sigma
        except RuntimeError as exc:
            last = exc
            if attempt == 3:
                break
            sigma -= 1e-6 * scale * 10.0 ** attempt
    raise EigenError(f"shift-invert factorization failed after 3 nudges: {last}")


def _lanczos_lowest(A: sp.csr_matrix, k: int, sigma: float, seed: int, scale: float):
    lu, sigma = _factorize(A, sigma, scale)
    n = A.shape[0]
    opinv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        w, V = spla.eigsh(A, k=k, sigma=sigma, which="LM", OPinv=opinv, v0=v0,
                          maxiter=LANCZOS_MAXITER, tol=0)
    except spla.ArpackNoConvergence as exc:
        raise EigenError(f"shift-invert Lanczos did not converge in {LANCZOS_MAXITER} "
                         f"iterations ({len(exc.eigenvalues)} of {k} pairs)") from None
    order = np.argsort(w)
    return w[order], V[:, order], sigma


def low_spectrum(op: DiscreteOperator, k: int, window=None, *, seed: int = 0,
                 method: str = "auto", check: bool = True) -> list[EigenPair]:
    """The k lowest eigenpairs (or those in ``window``, at most k).

    Dense LAPACK below 3000 unknowns (tridiagonal band solver for scalar 1D
    operators), otherwise ARPACK shift-invert Lanczos with the shift at the
    window's lower edge or just below -hbar max||W||.  Every pair is verified
    with one extra matrix-vector product.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    A = op.matrix
    n = A.shape[0]
    if method == "auto":
        method = "dense" if n < DENSE_LIMIT else "lanczos"
    scale = op.norm_estimate()
    if method == "dense":
        w, Y = _dense_lowest(A, k, None if window is None else (float(window[0]), float(window[1])))
        shift = None
    elif method == "lanczos":
        if window is not None:
            sigma = float(window[0])
        else:
            sigma = op.lower_bound() - 1e-3 * max(op.hbar, 1e-12) - 1e-9 * scale
        w, Y, shift = _lanczos_lowest(A, min(k, n - 1), sigma, seed, scale)
        if window is not None:
            keep = (w >= window[0]) & (w <= window[1])
            w, Y = w[keep], Y[:, keep]
    else:
        raise ValueError(f"unknown method {method!r}")
    pairs = []
    for i in range(len(w)):
        y = _gauge(Y[:, i] / np.linalg.norm(Y[:, i]))
        Ay = A @ y
        lam = float(y @ Ay)
        res = float(np.linalg.norm(Ay - lam * y))
        if check and res > RESIDUAL_TOL * (abs(lam) + scale):
            raise EigenError(f"eigenpair {i} residual {res:.3e} exceeds "
                             f"{RESIDUAL_TOL:g} (|lambda| + ||H||)")
        pairs.append(EigenPair(value=lam, vector=op.to_field(y), residual=res, y=y))
    pairs.sort(key=lambda p: p.value)
    if check and len(pairs) > 1:
        Yk = np.column_stack([p.y for p in pairs])
        err = np.abs(Yk.T @ Yk - np.eye(len(pairs))).max()
        if err > ORTHO_TOL:
            raise EigenError(f"eigenvectors not orthonormal (max deviation {err:.2e})")
    op.info["last_solver"] = {"method": method, "shift": shift}
    return pairs


# ---------------------------------------------------------------------------
# clusters
# ---------------------------------------------------------------------------

def spectral_clusters(values: Sequence[float], hbar: float, *, width_factor: float = 5.0,
                      rel_gap: float = 1e-3) -> list[list[int]]:
    """Group sorted eigenvalues into clusters separated by gap >= max(5 width, 1e-3 hbar)."""
    vals = np.asarray(values, dtype=float)
    if len(vals) == 0:
        return []
    if np.any(np.diff(vals) < 0):
        raise ValueError("values must be sorted ascending")
    floor = rel_gap * hbar
    bounds = [i + 1 for i in range(len(vals) - 1) if vals[i + 1] - vals[i] >= floor]
    while True:
        edges = [0] + bounds + [len(vals)]
        groups = [list(range(edges[i], edges[i + 1])) for i in range(len(edges) - 1)]
        width = [vals[g[-1]] - vals[g[0]] for g in groups]
        bad = None
        for b in range(len(bounds)):
            gap = vals[bounds[b]] - vals[bounds[b] - 1]
            if gap < width_factor * max(width[b], width[b + 1]):
                bad = b
                break
        if bad is None:
            return groups
        del bounds[bad]


def select_window(values: Sequence[float], hbar: float, count: int) -> tuple[float, float]:
    """Energy interval around the lowest clusters holding at least ``count`` values.

    The edges sit halfway into the separating gaps.  Raises :class:`WindowError`
    if the requested values do not end at a cluster boundary.
    """
    vals = np.asarray(values, dtype=float)
    groups = spectral_clusters(vals, hbar)
    taken = 0
    for gi, g in enumerate(groups):
        taken += len(g)
        if taken >= count:
            if gi + 1 == len(groups):
                raise WindowError(f"no spectral gap above the lowest {taken} values; "
                                  "compute more eigenvalues")
            gap = vals[groups[gi + 1][0]] - vals[g[-1]]
            return float(vals[0] - 0.5 * gap), float(vals[g[-1]] + 0.5 * gap)
    raise WindowError(f"only {len(vals)} eigenvalues available, {count} requested")


# ---------------------------------------------------------------------------
# extended-precision refinement of near-degenerate clusters
# ---------------------------------------------------------------------------

def refine_cluster(op: DiscreteOperator, pairs: Sequence[EigenPair]) -> np.ndarray:
    """Rayleigh-Ritz on span(pairs) in extended precision.

    Splittings far below eps * ||H|| are invisible to a float64 eigensolver
    but survive in the projected 2x2 (or m x m) problem because the energy
    form is accumulated edge by edge in long double.  The basis is
    orthonormalized with the Lowdin series (I - E/2 + 3E^2/8) and the result
    is returned as c + eig(H' - c I) so the tiny differences keep their digits.
    """
    Hm, Gm = op.energy_form([p.vector for p in pairs])
    m = len(pairs)
    E = Gm - np.eye(m, dtype=Gm.dtype)
    S = np.eye(m, dtype=Gm.dtype) - E / 2 + 3 * (E @ E) / 8
    Hp = S @ Hm @ S
    c = np.trace(Hp) / m
    w = np.linalg.eigvalsh(np.asarray(Hp - c * np.eye(m, dtype=Hp.dtype), dtype=float))
    return np.array([c + np.longdouble(x) for x in w], dtype=np.longdouble)


def splitting(op: DiscreteOperator, pairs: Sequence[EigenPair]) -> float:
    """E_1 - E_0 of a two-level cluster, refined in extended precision."""
    if len(pairs) != 2:
        raise ValueError("splitting needs exactly two pairs")
    r = refine_cluster(op, pairs)
    return float(r[1] - r[0])


def noise_floor(op: DiscreteOperator) -> float:
    """Resolution limit of refined splittings: long-double epsilon times ||H||."""
    return float(np.finfo(np.longdouble).eps) * op.norm_estimate()


# ---------------------------------------------------------------------------
# harmonic reference levels
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class HarmonicLevel:
    energy_over_hbar: float
    gamma: tuple = ()
    ell_index: int = 0
    well: int = -1


def harmonic_levels(well: Union[WellInfo, tuple], count: int) -> list[HarmonicLevel]:
    """e_{gamma,l} = mu_l + sum_k (2 gamma_k + 1) lambda_k, ascending, at least ``count``.

    ``well`` is a :class:`WellInfo` or a ``(lam, mu)`` tuple.  Levels are
    generated by a best-first walk over multi-indices, so the cost is
    proportional to ``count``.
    """
    if isinstance(well, WellInfo):
        lam, mu, widx = np.asarray(well.lam), np.asarray(well.w_eigs), well.index
    else:
        lam, mu = (np.atleast_1d(np.asarray(x, dtype=float)) for x in well)
        widx = -1
    if np.any(lam <= 0):
        raise ValueError("harmonic frequencies must be positive")
    n = len(lam)
    base = float(np.sum(lam))
    heap = []
    seen = set()
    for l, m in enumerate(mu):
        g0 = (0,) * n
        heapq.heappush(heap, (float(m) + base, g0, l))
        seen.add((g0, l))
    out = []
    while heap and len(out) < count:
        e, g, l = heapq.heappop(heap)
        out.append(HarmonicLevel(energy_over_hbar=e, gamma=g, ell_index=l, well=widx))
        for k in range(n):
            g2 = g[:k] + (g[k] + 1,) + g[k + 1:]
            if (g2, l) not in seen:
                seen.add((g2, l))
                heapq.heappush(heap, (e + 2 * float(lam[k]), g2, l))
    # complete the last degenerate group so multiplicities are never cut
    while heap and abs(heap[0][0] - out[-1].energy_over_hbar) <= 1e-12 * max(1.0, abs(out[-1].energy_over_hbar)):
        e, g, l = heapq.heappop(heap)
        out.append(HarmonicLevel(energy_over_hbar=e, gamma=g, ell_index=l, well=widx))
    return out


def pooled_levels(wells: Sequence[WellInfo], count: int) -> list[HarmonicLevel]:
    pool = []
    for w in wells:
        pool.extend(harmonic_levels(w, count))
    pool.sort(key=lambda h: (h.energy_over_hbar, h.well, h.ell_index, h.gamma))
    return pool[:count]


def essential_floor(op: DiscreteOperator) -> float:
    """Discrete stand-in for inf sigma_ess: min V next to the outer wall (max V if none)."""
    g = op.graph
    if not np.any(g.boundary):
        return float(np.max(op.V))
    ring = np.zeros(g.n_nodes, dtype=bool)
    a, b = g.edges[:, 0], g.edges[:, 1]
    ring[a[g.boundary[b]]] = True
    ring[b[g.boundary[a]]] = True
    ring &= ~g.boundary
    return float(np.min(op.V[ring]))


@dataclass
class HarmonicCheck:
    rows: list                  # dicts: hbar, ell, E, hbar_e, deviation
    exponents: dict             # ell -> fitted exponent of |E - hbar e| vs hbar
    inversions: dict            # ell -> number of non-monotone steps

    def summary(self) -> dict:
        return {"rows": self.rows, "exponents": {str(k): v for k, v in self.exponents.items()},
                "inversions": {str(k): v for k, v in self.inversions.items()}}


def harmonic_check(make_op: Union[Callable[[float], DiscreteOperator], Sequence[DiscreteOperator]],
                   wells: Sequence[WellInfo], hbar_list: Sequence[float], m: int, *,
                   seed: int = 0) -> HarmonicCheck:
    """Compare the m lowest eigenvalues with the m lowest pooled levels hbar e_l.

    ``make_op`` maps hbar to an operator (or is a list aligned with
    ``hbar_list``).  Levels are indexed l = 1..m.  The exponent is the slope
    of log|E_l - hbar e_l| against log hbar.
    """
    levels = pooled_levels(wells, m)
    if len(levels) < m:
        raise EigenError("not enough harmonic levels")
    rows = []
    devs = {l: [] for l in range(1, m + 1)}
    for i, hb in enumerate(hbar_list):
        op = make_op(hb) if callable(make_op) else make_op[i]
        delta = essential_floor(op)
        if hb * levels[m - 1].energy_over_hbar >= delta:
            raise EigenError(f"hbar = {hb}: level {m} ({hb * levels[m - 1].energy_over_hbar:.4g}) "
                             f"is not below the wall-potential floor {delta:.4g}")
        pairs = low_spectrum(op, m, seed=seed)
        if len(pairs) < m:
            raise EigenError(f"hbar = {hb}: only {len(pairs)} eigenvalues found, {m} requested")
        for l in range(1, m + 1):
            E = pairs[l - 1].value
            he = hb * levels[l - 1].energy_over_hbar
            dev = abs(E - he)
            rows.append({"hbar": float(hb), "ell": l, "E": E, "hbar_e": he, "deviation": dev})
            devs[l].append(dev)
    hb = np.asarray(hbar_list, dtype=float)
    exps, inv = {}, {}
    for l, d in devs.items():
        d = np.asarray(d)
        if len(hb) < 2:
            exps[l] = float("nan")
        else:
            exps[l] = float(np.polyfit(np.log(hb), np.log(d), 1)[0]) if np.all(d > 0) else float("inf")
        order = np.argsort(-hb)
        inv[l] = int(np.sum(np.diff(d[order]) > 0))
    return HarmonicCheck(rows=rows, exponents=exps, inversions=inv)
