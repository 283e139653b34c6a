"""Interaction matrix between Dirichlet modes of different wells.

Two evaluations of w_{ab} are provided.  The commutator form sums
hbar^2 chi_a dchi_b (dv_a v_b - v_a dv_b) over edges; the surface form is
the discrete flux hbar^2 sum c (v_a(q) v_b(p) - v_a(p) v_b(q)) through the
edges cut by the separating surface, which is the exact discrete analogue of
the Green identity, so it does not depend on which surface is used as long
as both modes are eigenvectors with equal eigenvalue in between.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .agmon import WellPairGeometry
from .eig import EigenPair
from .mesh import DomainGraph
from .operators import CutoffField

MIN_SURFACE_EDGES_2D = 8


class InteractionError(ValueError):
    pass


def _as_field(v) -> np.ndarray:
    v = v.vector if isinstance(v, EigenPair) else np.asarray(v, dtype=float)
    return v[:, None] if v.ndim == 1 else v


def w_commutator(graph: DomainGraph, hbar: float, v_alpha, chi_alpha, v_beta, chi_beta) -> float:
    """hbar^2 (<chi_a grad v_a, dchi_b v_b> - <chi_a dchi_b v_a, grad v_b>) on edges.

    Each edge contributes c * avg(chi_a) * (chi_b(q) - chi_b(p)) *
    ((v_a(q) - v_a(p)) . avg(v_b) - avg(v_a) . (v_b(q) - v_b(p))).
    The bracket vanishes identically when v_a = v_b.
    """
    va, vb = _as_field(v_alpha), _as_field(v_beta)
    ca = chi_alpha.chi if isinstance(chi_alpha, CutoffField) else np.asarray(chi_alpha)
    cb = chi_beta.chi if isinstance(chi_beta, CutoffField) else np.asarray(chi_beta)
    p, q = graph.edges[:, 0], graph.edges[:, 1]
    dchi = cb[q] - cb[p]
    act = dchi != 0
    p, q, dchi = p[act], q[act], dchi[act]
    abar = 0.5 * (ca[p] + ca[q])
    # (dv_a) . avg(v_b) - avg(v_a) . (dv_b) == v_a(q).v_b(p) - v_a(p).v_b(q)
    flux = np.sum(va[q] * vb[p] - va[p] * vb[q], axis=1)
    return float(hbar ** 2 * np.sum(graph.conductance[act] * abar * dchi * flux))


def w_surface(pair: WellPairGeometry, hbar: float, v_alpha, v_beta, *, shift: float = 0.0) -> float:
    """hbar^2 int_Sigma (<grad_N v_a, v_b> - <v_a, grad_N v_b>) dsigma as a discrete flux.

    v_a belongs to well j and v_b to well k of ``pair``; N points j -> k.
    ``shift`` translates Sigma along the geodesic by that Agmon length.
    """
    va, vb = _as_field(v_alpha), _as_field(v_beta)
    p, q, c = pair.cut_edges(shift)
    g = pair.graph
    if g.dim == 2 and len(c) < MIN_SURFACE_EDGES_2D:
        raise InteractionError(f"Sigma underresolved: {len(c)} cut edges (need {MIN_SURFACE_EDGES_2D})")
    if len(c) == 0:
        raise InteractionError("Sigma does not cross any edge inside G")
    flux = np.sum(va[q] * vb[p] - va[p] * vb[q], axis=1)
    return float(hbar ** 2 * np.sum(c * flux))


@dataclass
class InteractionMatrix:
    index: list                 # (well, local index) per row
    mu: np.ndarray
    w: np.ndarray
    gram: np.ndarray
    forms: list                 # per entry: "surface", "commutator" or "diag"
    diagnostics: dict = field(default_factory=dict)

    @property
    def m_tilde(self) -> np.ndarray:
        return np.diag(self.mu) + 0.5 * (self.w + self.w.T)

    @property
    def w_tilde(self) -> np.ndarray:
        return 0.5 * (self.w + self.w.T)

    def to_dict(self) -> dict:
        return {
            "index": [list(map(int, ix)) for ix in self.index],
            "mu": [float(x) for x in self.mu],
            "w": self.w.tolist(),
            "m_tilde": self.m_tilde.tolist(),
            "gram": self.gram.tolist(),
            "forms": self.forms,
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "InteractionMatrix":
        return cls(index=[tuple(ix) for ix in d["index"]], mu=np.asarray(d["mu"], dtype=float),
                   w=np.asarray(d["w"], dtype=float), gram=np.asarray(d["gram"], dtype=float),
                   forms=[list(r) for r in d["forms"]], diagnostics=dict(d.get("diagnostics", {})))


def surface_regime(pair: WellPairGeometry, hbar: float, mu_a: float, mu_b: float) -> bool:
    """S_jk < S0 + a and the two levels agree up to e^{-a/hbar}."""
    return pair.S < pair.S0 + pair.a and abs(mu_a - mu_b) <= np.exp(-pair.a / hbar)


def build_interaction(graph: DomainGraph, hbar: float, modes: Mapping[int, Sequence[EigenPair]],
                      cutoffs: Mapping[int, CutoffField],
                      pairs: Mapping[tuple, WellPairGeometry] | None = None, *,
                      use_surface: bool = True) -> InteractionMatrix:
    """Interaction matrix over all (well, mode) pairs.

    ``modes[j]`` are the window eigenpairs of the Dirichlet operator of well
    j.  Off-well entries use the surface form when the pair geometry is
    available and in regime, otherwise the commutator form; same-well
    entries always use the commutator form.
    """
    index = [(j, i) for j in sorted(modes) for i in range(len(modes[j]))]
    if not index:
        raise InteractionError("no modes in the window")
    for j in modes:
        if j not in cutoffs:
            raise InteractionError(f"missing cutoff for well {j}")
    m = len(index)
    mu = np.array([modes[j][i].value for j, i in index])
    w = np.zeros((m, m))
    gram = np.zeros((m, m))
    forms = [["" for _ in range(m)] for _ in range(m)]
    vol = graph.volume
    psi = [cutoffs[j].chi[:, None] * _as_field(modes[j][i]) for j, i in index]
    for a, (ja, ia) in enumerate(index):
        va = modes[ja][ia]
        for b, (jb, ib) in enumerate(index):
            vb = modes[jb][ib]
            gram[a, b] = float(np.sum(vol[:, None] * psi[a] * psi[b]))
            pg, first, second = None, va, vb
            if ja != jb and pairs is not None:
                if (ja, jb) in pairs:
                    pg = pairs[(ja, jb)]
                elif (jb, ja) in pairs:
                    # the flux is symmetric under swapping both the modes and N
                    pg, first, second = pairs[(jb, ja)], vb, va
            if pg is not None and use_surface and surface_regime(pg, hbar, mu[a], mu[b]):
                w[a, b] = w_surface(pg, hbar, first, second)
                forms[a][b] = "surface"
            else:
                w[a, b] = w_commutator(graph, hbar, va, cutoffs[ja], vb, cutoffs[jb])
                forms[a][b] = "commutator" if ja != jb else "diag"
    im = InteractionMatrix(index=index, mu=mu, w=w, gram=gram, forms=forms)
    off = np.array([[index[a][0] != index[b][0] for b in range(m)] for a in range(m)])
    im.diagnostics = {
        "gram_deviation": float(np.abs(gram - np.eye(m)).max()),
        "max_offwell_w": float(np.abs(w[off]).max()) if off.any() else 0.0,
        "max_samewell_w": float(np.abs(w[~off]).max()),
        "asymmetry": float(np.abs(w - w.T).max()),
    }
    return im


def predicted_spectrum(im: InteractionMatrix) -> np.ndarray:
    """Eigenvalues of m_tilde, ascending."""
    return np.linalg.eigvalsh(im.m_tilde)


def two_level(mu_a: float, mu_b: float, w_tilde: float) -> tuple[float, float, float]:
    """(lambda_minus, lambda_plus, splitting) of [[mu_a, w], [w, mu_b]] in closed form."""
    mean = 0.5 * (mu_a + mu_b)
    half = float(np.hypot(0.5 * (mu_a - mu_b), w_tilde))
    return mean - half, mean + half, 2.0 * half
