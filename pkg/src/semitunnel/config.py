"""Problem files: INI sections with ``key = value`` lines.

Every file starts with ``[problem]`` holding ``schema_version``.  Unknown
sections and keys are errors, so a typo never silently falls back to a
default.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .expr import ParseError, parse_expr
from .mesh import DomainSpec, MeshError

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WindowPolicy:
    modes_per_well: int = 1         # Dirichlet modes per well in the window
    extra: int = 2                  # additional full-operator eigenvalues used to locate the gap
    harmonic_m: int = 4
    harmonic_hbar: tuple = ()


@dataclass(frozen=True)
class GeometryPolicy:
    fm_order: int = 2
    seed_hops: int = 5
    a_fraction: float = 0.1
    rho_fraction: float = 0.15
    cutoff_inner: float = 0.55
    cutoff_outer: float = 0.8
    hessian: str = "transport"


@dataclass(frozen=True)
class OutputPolicy:
    fields: bool = True
    operator: bool = False


@dataclass(frozen=True)
class ProblemConfig:
    name: str
    domain: DomainSpec
    potential: str
    endomorphism: tuple | None = None       # rows of expression texts
    hbar: tuple = ()
    reference_hbar: float | None = None
    well_locations: tuple = ()
    ell_overrides: dict = field(default_factory=dict)
    windows: WindowPolicy = WindowPolicy()
    geometry: GeometryPolicy = GeometryPolicy()
    surface_shifts: tuple = ()
    output: OutputPolicy = OutputPolicy()
    source: str = ""

    @property
    def hbar_ref(self) -> float:
        return self.reference_hbar if self.reference_hbar is not None else self.hbar[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        d["domain"] = {"kind": self.domain.kind, "extents": list(self.domain.extents),
                       "resolution": list(self.domain.resolution), "boundary": self.domain.boundary}
        d["ell_overrides"] = {f"{j}-{k}": v for (j, k), v in sorted(self.ell_overrides.items())}
        return _listify(d)


def _listify(x):
    if isinstance(x, dict):
        return {str(k): _listify(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_listify(v) for v in x]
    return x


_SCHEMA: dict[str, dict[str, bool]] = {
    # section -> key -> required
    "problem": {"schema_version": True, "name": True},
    "domain": {"kind": True, "extents": True, "resolution": True, "boundary": False},
    "potential": {"v": True, "w": False},
    "hbar": {"values": True, "reference": False},
    "wells": {"locations": False, "ell": False},
    "windows": {"modes_per_well": False, "extra": False, "harmonic_m": False, "harmonic_hbar": False},
    "geometry": {"fm_order": False, "seed_hops": False, "a_fraction": False, "rho_fraction": False,
                 "cutoff_inner": False, "cutoff_outer": False, "hessian": False},
    "surfaces": {"shifts": False},
    "output": {"fields": False, "operator": False},
}
_REQUIRED_SECTIONS = ("problem", "domain", "potential", "hbar")
_DEFAULT_BOUNDARY = {"interval": "dirichlet_outer", "rectangle": "dirichlet_outer",
                     "torus2d": "periodic", "sphere_latlong": "closed_surface"}


def _floats(text: str, what: str) -> tuple:
    try:
        return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"{what}: expected a comma-separated list of numbers, got {text!r}") from None


def _int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{what}: expected an integer, got {text!r}") from None


def _float(text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{what}: expected a number, got {text!r}") from None


def _bool(text: str, what: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{what}: expected true/false, got {text!r}")


def _expr(text: str, what: str) -> str:
    try:
        parse_expr(text)
    except ParseError as exc:
        raise ConfigError(f"{what}: {exc}") from None
    return text.strip()


def parse_config(text: str, source: str = "<string>") -> ProblemConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                   comment_prefixes=("#", ";"), strict=True)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for sec in cp.sections():
        if sec not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key in cp[sec]:
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
        for key, req in _SCHEMA[sec].items():
            if req and key not in cp[sec]:
                raise ConfigError(f"{source}: missing key {key!r} in [{sec}]")
    for sec in _REQUIRED_SECTIONS:
        if sec not in cp:
            raise ConfigError(f"{source}: missing section [{sec}]")

    version = _int(cp["problem"]["schema_version"], "schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{source}: schema_version {version} is not supported "
                          f"(this build reads {SCHEMA_VERSION})")

    d = cp["domain"]
    kind = d["kind"].strip()
    boundary = d.get("boundary", _DEFAULT_BOUNDARY.get(kind, "dirichlet_outer")).strip()
    ext = _floats(d["extents"], "domain.extents")
    res = tuple(_int(t, "domain.resolution") for t in d["resolution"].split(",") if t.strip())
    try:
        extents = ext if kind == "sphere_latlong" else tuple(zip(ext[0::2], ext[1::2]))
        spec = DomainSpec(kind, extents, res, boundary)
    except (MeshError, ValueError) as exc:
        raise ConfigError(f"{source}: [domain] {exc}") from None

    pot = cp["potential"]
    V = _expr(pot["v"], "potential.V")
    W = None
    if "w" in pot:
        rows = [r for r in pot["w"].split(";") if r.strip()]
        W = tuple(tuple(_expr(e, "potential.W") for e in r.split(",")) for r in rows)
        if any(len(r) != len(W) for r in W):
            raise ConfigError(f"{source}: potential.W must be square")

    hb = cp["hbar"]
    hbar = _floats(hb["values"], "hbar.values")
    if not hbar or any(not 0 < h <= 1 for h in hbar):
        raise ConfigError(f"{source}: hbar values must lie in (0, 1]")
    ref = _float(hb["reference"], "hbar.reference") if "reference" in hb else None
    if ref is not None and not 0 < ref <= 1:
        raise ConfigError(f"{source}: hbar.reference must lie in (0, 1]")

    locations: tuple = ()
    ells: dict = {}
    if "wells" in cp:
        w = cp["wells"]
        if "locations" in w:
            locations = tuple(_floats(p, "wells.locations") for p in w["locations"].split(";") if p.strip())
        if "ell" in w:
            for item in w["ell"].split(","):
                if not item.strip():
                    continue
                try:
                    pair, val = item.split(":")
                    j, k = (int(t) for t in pair.split("-"))
                    ells[(min(j, k), max(j, k))] = int(val)
                except ValueError:
                    raise ConfigError(f"{source}: wells.ell entries look like '0-1:0', got {item!r}") from None

    win = WindowPolicy()
    if "windows" in cp:
        s = cp["windows"]
        win = WindowPolicy(
            modes_per_well=_int(s.get("modes_per_well", "1"), "windows.modes_per_well"),
            extra=_int(s.get("extra", "2"), "windows.extra"),
            harmonic_m=_int(s.get("harmonic_m", "4"), "windows.harmonic_m"),
            harmonic_hbar=_floats(s.get("harmonic_hbar", ""), "windows.harmonic_hbar"))
        if win.modes_per_well < 1 or win.extra < 1 or win.harmonic_m < 1:
            raise ConfigError(f"{source}: window counts must be positive")

    geo = GeometryPolicy()
    if "geometry" in cp:
        s = cp["geometry"]
        base = asdict(geo)
        for key in base:
            if key in s:
                if key in ("fm_order", "seed_hops"):
                    base[key] = _int(s[key], f"geometry.{key}")
                elif key == "hessian":
                    base[key] = s[key].strip()
                else:
                    base[key] = _float(s[key], f"geometry.{key}")
        geo = GeometryPolicy(**base)
        if geo.fm_order not in (1, 2):
            raise ConfigError(f"{source}: geometry.fm_order must be 1 or 2")
        if geo.hessian not in ("transport", "mesh"):
            raise ConfigError(f"{source}: geometry.hessian must be transport or mesh")
        if not 0 < geo.cutoff_inner < geo.cutoff_outer < 1:
            raise ConfigError(f"{source}: need 0 < cutoff_inner < cutoff_outer < 1")
        if not 0 < geo.rho_fraction < 1 - geo.cutoff_outer:
            raise ConfigError(f"{source}: rho_fraction must lie in (0, 1 - cutoff_outer) so the "
                              "Dirichlet region contains the cutoff support")

    shifts = _floats(cp["surfaces"].get("shifts", ""), "surfaces.shifts") if "surfaces" in cp else ()
    out = OutputPolicy()
    if "output" in cp:
        s = cp["output"]
        out = OutputPolicy(fields=_bool(s.get("fields", "true"), "output.fields"),
                           operator=_bool(s.get("operator", "false"), "output.operator"))

    return ProblemConfig(name=cp["problem"]["name"].strip(), domain=spec, potential=V, endomorphism=W,
                         hbar=hbar, reference_hbar=ref, well_locations=locations, ell_overrides=ells,
                         windows=win, geometry=geo, surface_shifts=shifts, output=out, source=source)


def load_config(path) -> ProblemConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from None
    return parse_config(text, source=str(p))


def dump_config(cfg: ProblemConfig) -> str:
    """Inverse of :func:`parse_config` (up to comments and key order)."""
    lines = ["[problem]", f"schema_version = {SCHEMA_VERSION}", f"name = {cfg.name}", "",
             "[domain]", f"kind = {cfg.domain.kind}"]
    if cfg.domain.kind == "sphere_latlong":
        lines.append(f"extents = {_num(cfg.domain.extents[0])}")
    else:
        lines.append("extents = " + ", ".join(_num(v) for pair in cfg.domain.extents for v in pair))
    lines += ["resolution = " + ", ".join(str(r) for r in cfg.domain.resolution),
              f"boundary = {cfg.domain.boundary}", "", "[potential]", f"V = {cfg.potential}"]
    if cfg.endomorphism is not None:
        lines.append("W = " + "; ".join(", ".join(r) for r in cfg.endomorphism))
    lines += ["", "[hbar]", "values = " + ", ".join(_num(h) for h in cfg.hbar)]
    if cfg.reference_hbar is not None:
        lines.append(f"reference = {_num(cfg.reference_hbar)}")
    if cfg.well_locations or cfg.ell_overrides:
        lines += ["", "[wells]"]
        if cfg.well_locations:
            lines.append("locations = " + "; ".join(", ".join(_num(c) for c in p) for p in cfg.well_locations))
        if cfg.ell_overrides:
            lines.append("ell = " + ", ".join(f"{j}-{k}:{v}" for (j, k), v in sorted(cfg.ell_overrides.items())))
    w = cfg.windows
    lines += ["", "[windows]", f"modes_per_well = {w.modes_per_well}", f"extra = {w.extra}",
              f"harmonic_m = {w.harmonic_m}"]
    if w.harmonic_hbar:
        lines.append("harmonic_hbar = " + ", ".join(_num(h) for h in w.harmonic_hbar))
    lines += ["", "[geometry]"] + [f"{k} = {_num(v) if isinstance(v, float) else v}"
                                   for k, v in asdict(cfg.geometry).items()]
    if cfg.surface_shifts:
        lines += ["", "[surfaces]", "shifts = " + ", ".join(_num(s) for s in cfg.surface_shifts)]
    lines += ["", "[output]", f"fields = {str(cfg.output.fields).lower()}",
              f"operator = {str(cfg.output.operator).lower()}", ""]
    return "\n".join(lines)


def _num(x: Any) -> str:
    return repr(float(x))
