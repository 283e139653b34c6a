"""From a problem file to report sections.

``prepare`` does the hbar-independent work once (mesh, wells, Agmon fields,
pair geometry, cutoffs, Dirichlet regions, WKB amplitudes).  ``analyze``
runs one hbar; ``sweep`` fans that out over a thread pool.  The ``section_*``
functions turn the results into plain dictionaries for the report.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import agmon, asymptotics, eig, interaction, operators
from .config import ProblemConfig
from .mesh import DomainSpec, build_domain
from .potential import evaluate_endomorphism, evaluate_field, find_wells


class PipelineError(RuntimeError):
    pass


@dataclass(eq=False)
class Setup:
    config: ProblemConfig
    graph: object
    V: np.ndarray
    W: np.ndarray | None
    wells: list
    fields: list
    S: np.ndarray                   # S[j, k] = d^j at m^k
    S0: float
    pairs: dict                     # (j, k) j < k -> WellPairGeometry
    pair_errors: dict
    cutoffs: dict
    regions: dict
    ground_pair: tuple | None
    wkb: dict = field(default_factory=dict)
    leading: object = None
    leading_error: str | None = None

    @property
    def tau_fm(self) -> float:
        return self.fields[0].tau_fm

    def S_sym(self, j: int, k: int) -> float:
        return 0.5 * (self.S[j, k] + self.S[k, j])


def _select_wells(found, graph, locations):
    if not locations:
        return found
    chosen = []
    tol = 3.0 * graph.h_max
    for loc in locations:
        loc = np.asarray(loc, dtype=float)
        if len(loc) != graph.dim:
            raise PipelineError(f"well location {loc.tolist()} has the wrong dimension")
        dist = [float(graph.segment_lengths(loc[None], w.coords[None])[0]) for w in found]
        i = int(np.argmin(dist)) if dist else -1
        if i < 0 or dist[i] > tol:
            raise PipelineError(f"no detected well within {tol:.3g} of {loc.tolist()}")
        chosen.append(found[i])
    return [dataclasses.replace(w, index=i) for i, w in enumerate(chosen)]


def prepare(cfg: ProblemConfig, *, with_wkb: bool = True) -> Setup:
    g = build_domain(cfg.domain)
    V = evaluate_field(cfg.potential, g)
    W = evaluate_endomorphism([list(r) for r in cfg.endomorphism], g) if cfg.endomorphism else None
    wells = _select_wells(find_wells(V, g, W), g, cfg.well_locations)
    geo = cfg.geometry
    fields = [agmon.fast_march(g, V, w, seed_hops=geo.seed_hops, order=geo.fm_order) for w in wells]
    nw = len(wells)
    S = np.zeros((nw, nw))
    for j, k in itertools.permutations(range(nw), 2):
        S[j, k] = float(fields[j].at(wells[k].coords[None])[0])
    setup = Setup(config=cfg, graph=g, V=V, W=W, wells=wells, fields=fields, S=S, S0=math.nan,
                  pairs={}, pair_errors={}, cutoffs={}, regions={}, ground_pair=None)
    if nw < 2:
        return setup
    Ssym = 0.5 * (S + S.T)
    off = ~np.eye(nw, dtype=bool)
    S0 = float(Ssym[off].min())
    setup.S0 = S0
    a = geo.a_fraction * S0
    for j, k in itertools.combinations(range(nw), 2):
        if Ssym[j, k] >= S0 + a:
            setup.pair_errors[(j, k)] = f"S_jk = {Ssym[j, k]:.6g} outside the surface regime S0 + a = {S0 + a:.6g}"
            continue
        try:
            setup.pairs[(j, k)] = agmon.pair_geometry(fields[j], fields[k], S0=S0, a_fraction=geo.a_fraction,
                                                      ell=cfg.ell_overrides.get((j, k)))
        except agmon.AgmonError as exc:
            setup.pair_errors[(j, k)] = str(exc)
    for j in range(nw):
        others = [Ssym[j, k] for k in range(nw) if k != j]
        smin = min(others)
        setup.cutoffs[j] = operators.make_cutoff(fields[j], geo.cutoff_inner * smin, geo.cutoff_outer * smin,
                                                 others=others)
        setup.regions[j] = operators.well_region(fields, j, geo.rho_fraction * S0)
    if setup.pairs:
        setup.ground_pair = min(setup.pairs, key=lambda p: (Ssym[p], p))
    if with_wkb and setup.ground_pair is not None:
        _prepare_leading(setup)
    return setup


def _prepare_leading(setup: Setup) -> None:
    j, k = setup.ground_pair
    f = setup.fields
    try:
        for i in (j, k):
            setup.wkb[i] = asymptotics.transport_amplitude(
                f[i], potential=setup.config.potential, W=setup.W, others=[f[o] for o in range(len(f)) if o != i])
        setup.leading = asymptotics.leading_I0(setup.pairs[(j, k)], setup.wkb[j], setup.wkb[k],
                                               hessian=setup.config.geometry.hessian)
    except (asymptotics.AsymptoticsError, agmon.AgmonError) as exc:
        setup.leading_error = str(exc)


# ---------------------------------------------------------------------------
# one hbar
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class HbarResult:
    hbar: float
    window: tuple
    full: list                      # EigenPairs of the full operator inside the window
    refined: np.ndarray             # extended-precision window eigenvalues
    delta_direct: float
    noise_floor: float
    modes: dict                     # well -> Dirichlet EigenPairs in the window
    im: interaction.InteractionMatrix
    predicted: np.ndarray
    delta_predicted: float
    w_tilde: float
    cross_form: dict
    surface_shifts: dict
    solver: dict
    op: operators.DiscreteOperator = field(repr=False, default=None)


def _ground_index(im, pair):
    j, k = pair
    return im.index.index((j, 0)), im.index.index((k, 0))


def analyze(setup: Setup, hbar: float, *, seed: int = 0, keep_operator: bool = False) -> HbarResult:
    if setup.ground_pair is None:
        raise PipelineError("interaction analysis needs at least one well pair in the surface regime")
    cfg = setup.config
    g = setup.graph
    nw = len(setup.wells)
    count = nw * cfg.windows.modes_per_well
    op = operators.assemble(g, setup.V, setup.W, hbar)
    pairs_full = eig.low_spectrum(op, count + cfg.windows.extra, seed=seed)
    window = eig.select_window([p.value for p in pairs_full], hbar, count)
    inside = [p for p in pairs_full if window[0] <= p.value <= window[1]]
    refined = eig.refine_cluster(op, inside)
    floor = eig.noise_floor(op)
    modes = {}
    solver = {"full": dict(op.info.get("last_solver", {}))}
    for j in range(nw):
        sub = operators.dirichlet_restrict(op, setup.regions[j], wells=setup.wells,
                                           field=setup.fields[j], radius=setup.cutoffs[j].outer_radius)
        cand = eig.low_spectrum(sub, cfg.windows.modes_per_well + 1, seed=seed)
        modes[j] = [p for p in cand if window[0] <= p.value <= window[1]]
        if not modes[j]:
            raise PipelineError(f"hbar = {hbar}: no Dirichlet eigenvalue of well {j} inside the window "
                                f"[{window[0]:.6g}, {window[1]:.6g}]")
        solver[f"dirichlet_{j}"] = dict(sub.info.get("last_solver", {}))
    im = interaction.build_interaction(g, hbar, modes, setup.cutoffs, setup.pairs)
    pred = interaction.predicted_spectrum(im)
    a, b = _ground_index(im, setup.ground_pair)
    w_t = float(im.w_tilde[a, b])
    if len(im.index) == 2:
        delta_pred = interaction.two_level(im.mu[0], im.mu[1], w_t)[2]
    else:
        delta_pred = float(pred[1] - pred[0])
    delta = float(refined[1] - refined[0])
    j, k = setup.ground_pair
    pg = setup.pairs[(j, k)]
    va, vb = modes[j][0], modes[k][0]
    cross = {"w_commutator": interaction.w_commutator(g, hbar, va, setup.cutoffs[j], vb, setup.cutoffs[k])}
    try:
        cross["w_surface"] = interaction.w_surface(pg, hbar, va, vb)
        cross["rel_diff"] = abs(cross["w_commutator"] - cross["w_surface"]) / abs(cross["w_surface"])
    except interaction.InteractionError as exc:
        cross["w_surface"] = None
        cross["rel_diff"] = None
        cross["error"] = str(exc)
    shifts = {}
    base = cross.get("w_surface")
    for s in cfg.surface_shifts:
        try:
            ws = interaction.w_surface(pg, hbar, va, vb, shift=s * pg.S)
            shifts[repr(float(s))] = {"w_surface": ws,
                                      "rel_change": abs(ws - base) / abs(base) if base else None}
        except interaction.InteractionError as exc:
            shifts[repr(float(s))] = {"error": str(exc)}
    return HbarResult(hbar=float(hbar), window=window, full=inside, refined=refined, delta_direct=delta,
                      noise_floor=floor, modes=modes, im=im, predicted=pred, delta_predicted=float(delta_pred),
                      w_tilde=w_t, cross_form=cross, surface_shifts=shifts, solver=solver,
                      op=op if keep_operator else None)


def sweep(setup: Setup, hbar_list, *, seed: int = 0, threads: int = 1) -> list[HbarResult]:
    hs = [float(h) for h in hbar_list]
    if threads <= 1 or len(hs) == 1:
        return [analyze(setup, h, seed=seed) for h in hs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda h: analyze(setup, h, seed=seed), hs))


# ---------------------------------------------------------------------------
# report sections
# ---------------------------------------------------------------------------

def section_wells(setup: Setup) -> dict:
    cfg = setup.config
    nw = len(setup.wells)
    tau = setup.tau_fm
    sym = [abs(setup.S[j, k] - setup.S[k, j]) for j, k in itertools.combinations(range(nw), 2)]
    tri = []
    for i, j, k in itertools.permutations(range(nw), 3):
        tri.append(setup.S[i, k] - setup.S[i, j] - setup.S[j, k] - 2 * tau)
    levels = {}
    for w in setup.wells:
        levels[str(w.index)] = [dataclasses.asdict(lv) for lv in eig.harmonic_levels(w, cfg.windows.harmonic_m)]
    return {
        "count": nw,
        "wells": [w.summary() for w in setup.wells],
        "harmonic_levels": levels,
        "pooled_levels": [lv.energy_over_hbar for lv in eig.pooled_levels(setup.wells, cfg.windows.harmonic_m)],
        "agmon": {
            "S": setup.S.tolist(),
            "S0": setup.S0 if nw > 1 else None,
            "tau_fm": tau,
            "symmetry_max_residual": max(sym) if sym else 0.0,
            "symmetry_ok": all(s <= tau for s in sym),
            "triangle_max_excess": max(tri) if tri else None,
            "triangle_ok": all(t <= 0 for t in tri),
            "fm_order": cfg.geometry.fm_order,
        },
    }


def section_pairs(setup: Setup) -> dict:
    out = {}
    for (j, k), pg in sorted(setup.pairs.items()):
        out[f"{j}-{k}"] = pg.summary()
    for (j, k), msg in sorted(setup.pair_errors.items()):
        out[f"{j}-{k}"] = {"error": msg}
    return out


def _hbar_list_for_harmonics(cfg: ProblemConfig):
    return cfg.windows.harmonic_hbar or cfg.hbar


def harmonic_section(setup: Setup, *, seed: int = 0) -> dict:
    cfg = setup.config
    hb = _hbar_list_for_harmonics(cfg)
    m = cfg.windows.harmonic_m
    chk = eig.harmonic_check(lambda h: operators.assemble(setup.graph, setup.V, setup.W, h),
                             setup.wells, hb, m, seed=seed)
    out = chk.summary()
    out["hbar"] = [float(h) for h in hb]
    # first gap between distinct pooled harmonic groups: E_q - E_0 ~ hbar (e_q - e_0)
    pooled = eig.pooled_levels(setup.wells, m)
    e = np.array([lv.energy_over_hbar for lv in pooled])
    jumps = np.flatnonzero(np.diff(e) > 1e-9)
    if len(jumps):
        q = int(jumps[0] + 1)
        rows = {(r["hbar"], r["ell"]): r["E"] for r in chk.rows}
        gaps = [rows[(float(h), q + 1)] - rows[(float(h), 1)] for h in hb]
        slope = float(np.polyfit(np.asarray(hb, dtype=float), gaps, 1)[0])
        out["level_gap"] = {"index": q, "predicted_slope": float(e[q] - e[0]), "slope": slope,
                            "rel_error": abs(slope - (e[q] - e[0])) / abs(e[q] - e[0]), "gaps": gaps}
    return out


def spectrum_section(setup: Setup, *, seed: int = 0) -> dict:
    """Full and Dirichlet low spectra at the reference hbar."""
    cfg = setup.config
    hb = cfg.hbar_ref
    nw = len(setup.wells)
    count = max(nw, 1) * cfg.windows.modes_per_well
    op = operators.assemble(setup.graph, setup.V, setup.W, hb)
    full = eig.low_spectrum(op, count + cfg.windows.extra, seed=seed)
    out = {"hbar": hb, "unknowns": op.size, "solver": dict(op.info.get("last_solver", {})),
           "full": [p.summary() for p in full], "essential_floor": eig.essential_floor(op),
           "noise_floor": eig.noise_floor(op)}
    try:
        out["window"] = list(eig.select_window([p.value for p in full], hb, count))
    except eig.WindowError as exc:
        out["window"] = {"error": str(exc)}
    dirichlet = {}
    for j in setup.regions:
        try:
            sub = operators.dirichlet_restrict(op, setup.regions[j], wells=setup.wells, field=setup.fields[j],
                                               radius=setup.cutoffs[j].outer_radius)
            dirichlet[str(j)] = [p.summary() for p in eig.low_spectrum(sub, cfg.windows.modes_per_well, seed=seed)]
        except (operators.OperatorError, eig.EigenError) as exc:
            dirichlet[str(j)] = {"error": str(exc)}
    out["dirichlet"] = dirichlet
    return out


def _orders(h, r):
    h, r = np.asarray(h, dtype=float), np.asarray(r, dtype=float)
    if np.any(r <= 0):
        return None
    return float(np.polyfit(np.log(h), np.log(r), 1)[0])


def _refined_spec(spec: DomainSpec, factor: int) -> DomainSpec:
    """Nested refinement: every coarse node stays a node."""
    if spec.kind == "sphere_latlong":
        nt, nphi = spec.resolution
        res = ((nt + 1) * factor - 1, nphi * factor)
    elif spec.boundary == "periodic":
        res = tuple(n * factor for n in spec.resolution)
    else:
        res = tuple((n - 1) * factor + 1 for n in spec.resolution)
    return DomainSpec(spec.kind, spec.extents, res, spec.boundary)


def structural_section(setup: Setup, *, levels: int = 3, hbar: float | None = None) -> dict:
    """Weighted energy identity and IMS residuals under mesh doubling, symmetry, interlacing."""
    cfg = setup.config
    hb = cfg.hbar_ref if hbar is None else hbar
    h, wres, ires = [], [], []
    S0 = setup.S0 if math.isfinite(setup.S0) else 1.0
    for lvl in range(levels):
        spec = _refined_spec(cfg.domain, 2 ** lvl)
        g = build_domain(spec)
        V = evaluate_field(cfg.potential, g)
        W = evaluate_endomorphism([list(r) for r in cfg.endomorphism], g) if cfg.endomorphism else None
        w0 = _select_wells(find_wells(V, g, W), g, [setup.wells[0].coords])[0]
        op = operators.assemble(g, V, W, hb)
        r = np.linalg.norm(w0.local_coords(g, np.arange(g.n_nodes)), axis=1)
        R = 0.9
        bump = np.where(r < R, np.cos(0.5 * np.pi * np.minimum(r / R, 1.0)) ** 4, 0.0)
        v = np.exp(-4 * r * r) * bump
        probe = 1.0 + V
        if op.rank > 1:
            v = np.repeat(v[:, None], op.rank, axis=1)
            probe = np.repeat(probe[:, None], op.rank, axis=1)
        phi = 0.2 * V
        wres.append(operators.weighted_identity_residual(op, phi, hb, v, relative=True))
        f = agmon.fast_march(g, V, w0, order=cfg.geometry.fm_order)
        parts = operators.angular_partition(f, 0.3 * S0, 0.6 * S0)
        ires.append(operators.ims_residual(op, parts, probe=probe))
        h.append(g.h_max)
    op = operators.assemble(setup.graph, setup.V, setup.W, hb)
    asym = op.matrix - op.matrix.T
    k = 4
    full = eig.low_spectrum(op, k)
    sub = operators.dirichlet_restrict(op, setup.regions[0] if setup.regions else
                                       ~setup.graph.boundary, wells=None)
    dvals = eig.low_spectrum(sub, k)
    slack = 1e-12 * op.norm_estimate()
    inter = [float(d.value - f_.value) for d, f_ in zip(dvals, full)]
    return {
        "hbar": float(hb),
        "h": h,
        "weighted_identity_residuals": wres,
        "weighted_identity_order": _orders(h, wres),
        "ims_residuals": ires,
        "ims_order": _orders(h, ires),
        "matrix_asymmetry_nnz": int(abs(asym).count_nonzero()),
        "interlacing_margins": inter,
        "interlacing_slack": slack,
        "interlacing_ok": all(m >= -slack for m in inter),
    }


def _pair_rel_error(setup: Setup, res: HbarResult):
    """|2 |w~| - Delta| / Delta; only meaningful for a two-well problem."""
    if len(setup.wells) != 2:
        return None
    return abs(2 * abs(res.w_tilde) - res.delta_direct) / res.delta_direct


def _spectrum_rel_error(res: HbarResult):
    """Largest gap between the m~ spectrum and the direct window, in units of Delta."""
    if len(res.predicted) != len(res.refined):
        return None
    return float(np.abs(np.sort(res.predicted) - np.sort(res.refined)).max() / res.delta_direct)


def _block_structure(im) -> dict:
    mt = im.m_tilde
    wells = np.array([ix[0] for ix in im.index])
    same = wells[:, None] == wells[None, :]
    wt = im.w_tilde
    off_scale = float(np.abs(wt[~same]).max()) if (~same).any() else 0.0
    same_max = float(np.abs(wt - np.diag(np.diag(wt)))[same].max())
    return {"hermitian_defect": float(np.abs(mt - mt.T).max()), "samewell_max": same_max,
            "offwell_max": off_scale, "samewell_ratio": same_max / off_scale if off_scale else None}


def interaction_section(setup: Setup, res: HbarResult) -> dict:
    j, k = setup.ground_pair
    return {
        "hbar": res.hbar,
        "ground_pair": [j, k],
        "window": list(res.window),
        "full_window_eigenvalues": [float(x) for x in res.refined],
        "dirichlet_eigenvalues": {str(w): [p.value for p in ps] for w, ps in res.modes.items()},
        "delta_direct": res.delta_direct,
        "delta_predicted": res.delta_predicted,
        "predicted_spectrum": [float(x) for x in res.predicted],
        "w_tilde": res.w_tilde,
        "interaction_rel_error": _pair_rel_error(setup, res),
        "spectrum_rel_error": _spectrum_rel_error(res),
        "cross_form": res.cross_form,
        "surface_shifts": res.surface_shifts,
        "noise_floor": res.noise_floor,
        "matrix": res.im.to_dict(),
        "block_structure": _block_structure(res.im),
        "surface_regime": bool(interaction.surface_regime(setup.pairs[(j, k)], res.hbar,
                                                          res.im.mu[_ground_index(res.im, (j, k))[0]],
                                                          res.im.mu[_ground_index(res.im, (j, k))[1]])),
        "solver": res.solver,
    }


def leading_section(setup: Setup) -> dict:
    if setup.leading is None:
        return {"error": setup.leading_error or "no ground pair"}
    lo = setup.leading
    return {"I0": lo.I0, "abs_I0": abs(lo.I0), "ell": lo.ell, "S": lo.S, "n_points": lo.n_points,
            "details": lo.details,
            "wkb": {str(j): {"E0": w.E0, "mu": w.mu, "a_well": w.a_well, **w.diagnostics}
                    for j, w in sorted(setup.wkb.items())}}


def sweep_section(setup: Setup, results: list[HbarResult]) -> dict:
    j, k = setup.ground_pair
    pg = setup.pairs[(j, k)]
    lo = setup.leading
    nw = len(setup.wells)
    rows = []
    for r in results:
        row = {
            "hbar": r.hbar,
            "delta_direct": r.delta_direct,
            "delta_predicted": r.delta_predicted,
            "w_tilde": r.w_tilde,
            "interaction_rel_error": _pair_rel_error(setup, r),
            "spectrum_rel_error": _spectrum_rel_error(r),
            "noise_floor": r.noise_floor,
            "asymptotic": bool(math.exp(-pg.S / r.hbar) <= asymptotics.ASYMPTOTIC_LIMIT),
            "envelope": math.log(abs(r.w_tilde)) + pg.S / r.hbar if r.w_tilde else None,
            "gram_deviation": r.im.diagnostics["gram_deviation"],
        }
        if lo is not None:
            row["i0_leading"] = lo.predicted_splitting(r.hbar)
            # the two-well ratio; with more wells Delta is not 2|w~|
            row["ratio_R"] = asymptotics.leading_ratio(r.delta_direct, r.hbar, lo) if nw == 2 else None
        else:
            row["i0_leading"] = None
            row["ratio_R"] = None
        rows.append(row)
    hs = [r.hbar for r in results]
    trusted = asymptotics.trust_window(hs, pg.S, [r.delta_direct for r in results],
                                       [r.noise_floor for r in results])
    for row, t in zip(rows, trusted):
        row["trusted"] = bool(t)
    out = {"S_geometry": pg.S, "ell": pg.ell, "rows": rows}
    th = [r.hbar for r, t in zip(results, trusted) if t]
    td = [r.delta_direct for r, t in zip(results, trusted) if t]
    try:
        out["fit"] = asymptotics.fit_sweep(th, td).to_dict()
    except asymptotics.AsymptoticsError as exc:
        out["fit"] = {"error": str(exc)}
    if lo is not None and th and nw == 2:
        order = sorted((h, row) for h, row, t in zip(hs, rows, trusted) if t)
        out["R_at_smallest_trusted"] = order[0][1]["ratio_R"]
        out["smallest_trusted_hbar"] = order[0][0]
    try:
        dec = asymptotics.agmon_decay_check([r.modes[j][0] for r in results], setup.fields[j], hs)
        out["agmon_decay"] = dec.to_dict()
    except asymptotics.AsymptoticsError as exc:
        out["agmon_decay"] = {"error": str(exc)}
    return out


SWEEP_CSV_HEADER = ("hbar", "delta_direct", "delta_predicted", "w_tilde", "i0_leading")
