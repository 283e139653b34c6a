"""Command-line front end.

    semitunnel {wells,spectrum,interaction,sweep,report} --config FILE --out DIR

Each command writes ``report.json`` (sorted keys, fixed float formatting, so
identical inputs give identical bytes) plus the CSV side products.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, agmon, asymptotics, eig, operators, pipeline
from .config import SCHEMA_VERSION, ConfigError, ProblemConfig, load_config

REPORT_SCHEMA = 1
COMMANDS = ("wells", "spectrum", "interaction", "sweep", "report")


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


def dumps(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"


def _context(setup: pipeline.Setup) -> dict:
    g = setup.graph
    return {
        "mesh": {"kind": g.kind, "nodes": g.n_nodes, "h_max": g.h_max, "resolution": list(g.spec.resolution)},
        "tolerances": {
            "tau_fm": setup.tau_fm,
            "tau_constant": agmon.TAU_CONSTANT,
            "exponent_clamp": operators.EXP_CLAMP,
            "diagnostic_exponent_limit": operators.DIAGNOSTIC_LIMIT,
            "dense_limit": eig.DENSE_LIMIT,
            "lanczos_maxiter": eig.LANCZOS_MAXITER,
            "eigen_residual_tol": eig.RESIDUAL_TOL,
            "asymptotic_limit": asymptotics.ASYMPTOTIC_LIMIT,
            "noise_margin": asymptotics.NOISE_MARGIN,
        },
    }


def _guarded(fn, *args, **kw):
    """Run an optional report piece; a failure becomes an ``error`` entry."""
    try:
        return fn(*args, **kw)
    except (pipeline.PipelineError, eig.EigenError, operators.OperatorError, agmon.AgmonError,
            asymptotics.AsymptoticsError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


def build_report(cfg: ProblemConfig, command: str, *, seed: int = 0, threads: int = 1,
                 structural_levels: int = 3) -> tuple[dict, dict]:
    """The report dictionary and the side products (sweep rows, setup, reference result)."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    full = command == "report"
    setup = pipeline.prepare(cfg, with_wkb=command in ("interaction", "sweep", "report"))
    rep = {"report_schema": REPORT_SCHEMA, "config_schema": SCHEMA_VERSION, "version": __version__,
           "command": command, "seed": seed, "config": cfg.to_dict(), **_context(setup),
           "wells": pipeline.section_wells(setup), "pairs": pipeline.section_pairs(setup)}
    extra = {"setup": setup}
    if command in ("spectrum",) or full:
        spec = _guarded(pipeline.spectrum_section, setup, seed=seed)
        if "error" not in spec:
            spec["harmonic"] = _guarded(pipeline.harmonic_section, setup, seed=seed)
            spec["structural"] = _guarded(pipeline.structural_section, setup, levels=structural_levels)
        rep["spectrum"] = spec
    if command in ("interaction", "sweep") or full:
        if setup.ground_pair is None:
            raise pipeline.PipelineError("no well pair in the surface regime; "
                                         f"pair diagnostics: {rep['pairs']}")
        rep["leading"] = pipeline.leading_section(setup)
    results = {}
    if command in ("sweep",) or full:
        for r in pipeline.sweep(setup, cfg.hbar, seed=seed, threads=threads):
            results[r.hbar] = r
        rep["sweep"] = pipeline.sweep_section(setup, [results[float(h)] for h in cfg.hbar])
        extra["sweep_rows"] = rep["sweep"]["rows"]
    if command in ("interaction",) or full:
        ref = results.get(float(cfg.hbar_ref)) or pipeline.analyze(setup, cfg.hbar_ref, seed=seed)
        rep["interaction"] = pipeline.interaction_section(setup, ref)
        extra["reference"] = ref
    return rep, extra


def write_outputs(out: Path, cfg: ProblemConfig, rep: dict, extra: dict) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "report.json"
    p.write_text(dumps(rep))
    written.append(p)
    if "sweep_rows" in extra:
        p = out / "sweep.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(pipeline.SWEEP_CSV_HEADER)
            for row in extra["sweep_rows"]:
                w.writerow(["" if row[k] is None else repr(float(row[k])) for k in pipeline.SWEEP_CSV_HEADER])
        written.append(p)
    setup = extra["setup"]
    if cfg.output.fields:
        fdir = out / "fields"
        fdir.mkdir(exist_ok=True)
        for f in setup.fields:
            p = fdir / f"agmon_{f.well.index}.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["node", *setup.graph.axis_names, "d"])
                for row in f.to_rows():
                    w.writerow([row[0], *(repr(v) for v in row[1:])])
            written.append(p)
    ref = extra.get("reference")
    if ref is not None:
        p = out / "interaction.json"
        p.write_text(ref.im.to_json() + "\n")
        written.append(p)
    if cfg.output.operator:
        op = operators.assemble(setup.graph, setup.V, setup.W, cfg.hbar_ref)
        p = out / "operator.coo"
        op.save_coo(p)
        written.append(p)
    return written


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semitunnel", description="Semiclassical tunnelling laboratory.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "wells": "locate wells, harmonic levels and Agmon distances",
        "spectrum": "full and Dirichlet spectra, harmonic check, structural identities",
        "interaction": "interaction matrix at the reference hbar and leading-order I0",
        "sweep": "splittings over the hbar list, exponential fit, leading-order ratio",
        "report": "everything above in one report",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, type=Path, help="problem file")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        p.add_argument("--seed", type=int, default=0, help="Lanczos start-vector seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for the hbar sweep")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.threads < 1:
        print("semitunnel: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"semitunnel: config error: {exc}", file=sys.stderr)
        return 2
    try:
        rep, extra = build_report(cfg, args.command, seed=args.seed, threads=args.threads)
    except Exception as exc:  # upstream failures are reported with the command as context
        print(f"semitunnel {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for p in write_outputs(args.out, cfg, rep, extra):
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
