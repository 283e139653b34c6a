"""Acceptance criteria 1-10, read straight from report fields.

Run under pytest, or standalone for the summary table:

    python3 tests/test_acceptance.py
"""

import dataclasses
import math
from functools import lru_cache
from pathlib import Path

import pytest

from semitunnel import cli
from semitunnel.config import load_config
from semitunnel.mesh import DomainSpec

PROBLEMS = Path(__file__).resolve().parent.parent / "problems"


@lru_cache(maxsize=None)
def report(name: str, command: str = "report", resolution: tuple | None = None) -> dict:
    cfg = load_config(PROBLEMS / f"{name}.ini")
    if resolution is not None:
        d = cfg.domain
        cfg = dataclasses.replace(cfg, domain=DomainSpec(d.kind, d.extents, resolution, d.boundary))
    rep, _ = cli.build_report(cfg, command)
    return rep


def shipped():
    return sorted(p.stem for p in PROBLEMS.glob("*.ini"))


def rel(a, b):
    return abs(a - b) / abs(b)


def tail_decreasing(xs, n=3):
    t = xs[-n:]
    return len(t) == n and all(b < a for a, b in zip(t, t[1:]))


def criterion_1():
    rep = report("double_well_1d")
    exps = rep["spectrum"]["harmonic"]["exponents"]
    lam = [l for w in rep["wells"]["wells"] for l in w["lambda"]]
    pooled = rep["wells"]["pooled_levels"]
    ok = (all(exps[str(l)] >= 1.15 for l in (1, 2, 3, 4))
          and all(abs(l - 2.0) <= 1e-6 for l in lam)
          and all(abs(e - o) <= 1e-6 for e, o in zip(pooled, (2.0, 2.0, 6.0, 6.0))))
    return ok, f"exponents {[round(exps[str(l)], 3) for l in (1, 2, 3, 4)]}, lambda {lam}"


def criterion_2():
    line = report("double_well_1d", "wells", (2001,))["wells"]["agmon"]
    sph = report("sphere", "wells", (64, 128))["wells"]["agmon"]
    d1, d2 = line["S"][0][1], sph["S"][0][1]
    ok = (rel(d1, 4 / 3) <= 0.01 and rel(d2, 2.0) <= 0.02
          and all(a["symmetry_ok"] and a["triangle_ok"] for a in (line, sph)))
    return ok, f"d(-1,+1) = {d1:.5f}, S(N,S) = {d2:.5f}"


def criterion_3():
    rows = report("double_well_1d")["sweep"]["rows"]
    errs = [r["interaction_rel_error"] for r in rows]
    last = rows[-1]
    ok = math.isclose(last["hbar"], 0.06) and errs[-1] <= 0.05 and tail_decreasing(errs)
    return ok, f"relative errors {['%.2e' % e for e in errs]}"


def criterion_4():
    out = []
    for name in ("double_well_1d", "sphere"):
        it = report(name)["interaction"]
        assert math.isclose(it["hbar"], 0.08)
        out += [v["rel_change"] for v in it["surface_shifts"].values()]
    return len(out) == 4 and max(out) <= 0.01, f"max relative change {max(out):.2e}"


def criterion_5():
    diffs = {}
    for name in shipped():
        it = report(name)["interaction"]
        if it["surface_regime"]:
            diffs[name] = it["cross_form"]["rel_diff"]
    ok = len(diffs) == len(shipped()) and max(diffs.values()) <= 0.02
    return ok, ", ".join(f"{k} {v:.1e}" for k, v in diffs.items())


def criterion_6():
    a = report("double_well_1d_prefactor")["sweep"]
    b = report("sphere")["sweep"]
    fa, fb = a["fit"], b["fit"]
    ok = (a["ell"] == 0 and b["ell"] == 1
          and rel(fa["S"], 4 / 3) <= 0.02 and abs(fa["p"] - 0.5) <= 0.15
          and rel(fb["S"], 2.0) <= 0.02 and abs(fb["p"]) <= 0.15)
    return ok, f"line (S, p) = ({fa['S']:.4f}, {fa['p']:.3f}), sphere ({fb['S']:.4f}, {fb['p']:.3f})"


def criterion_7():
    ok, parts = True, []
    for name in ("double_well_1d_prefactor", "sphere"):
        sw = report(name)["sweep"]
        R = sw["R_at_smallest_trusted"]
        dev = [abs(r["ratio_R"] - 1) for r in sw["rows"] if r["trusted"]]
        ok &= R is not None and abs(R - 1) <= 0.25 and tail_decreasing(dev)
        parts.append(f"{name} R = {R:.4f} at hbar {sw['smallest_trusted_hbar']}")
    return ok, ", ".join(parts)


def criterion_8():
    ok, worst = True, math.inf
    for name in shipped():
        st = report(name)["spectrum"]["structural"]
        o = min(st["weighted_identity_order"], st["ims_order"])
        worst = min(worst, o)
        ok &= o >= 1.8 and st["matrix_asymmetry_nnz"] == 0 and st["interlacing_ok"]
    return ok, f"smallest order {worst:.3f}"


def criterion_9():
    n0 = {name: report(name)["sweep"]["agmon_decay"]["N0"] for name in ("double_well_1d", "sphere")}
    ok = all(isinstance(v, float) and math.isfinite(v) and v <= 6 for v in n0.values())
    return ok, ", ".join(f"{k} N0 = {v:.3f}" for k, v in n0.items())


def criterion_10():
    rep = report("bundle_rank2")
    pooled = rep["wells"]["pooled_levels"]
    gap = rep["spectrum"]["harmonic"]["level_gap"]
    exps = rep["spectrum"]["harmonic"]["exponents"]
    bs = rep["interaction"]["block_structure"]
    ok = (all(abs(e - o) <= 1e-6 for e, o in zip(pooled, (1.7, 1.7, 2.3, 2.3)))
          and all(v >= 1.15 for v in exps.values())
          and abs(gap["predicted_slope"] - 0.6) <= 1e-9 and gap["rel_error"] <= 0.02
          and bs["hermitian_defect"] == 0.0 and bs["samewell_ratio"] <= 0.1)
    return ok, f"slope {gap['slope']:.6f}, hermitian defect {bs['hermitian_defect']}, samewell ratio {bs['samewell_ratio']:.1e}"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


def verdict(k, fn):
    ok, detail = fn()
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    return ok, line


@pytest.mark.parametrize("k", range(1, 11))
def test_criterion(k):
    ok, line = verdict(k, CRITERIA[k - 1])
    assert ok, line


if __name__ == "__main__":
    results = [verdict(k, fn)[0] for k, fn in enumerate(CRITERIA, 1)]
    raise SystemExit(0 if all(results) else 1)
