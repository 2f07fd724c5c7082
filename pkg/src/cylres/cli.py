"""Batch runner: ``cylres run <config>`` and ``cylres digest <manifest>``.

Config grammar (TOML; JSON with the same structure is accepted)::

    seed = 0                  # optional, default 0
    out = "results"           # optional output directory (relative to the config)

    [defaults]                # optional, merged under every task
    [defaults.geometry] ...

    [[tasks]]
    name = "sweep"            # unique, used as the output subdirectory
    kind = "bounds"           # validate | bounds | semiclassical | scan | modes | embedded |
                              # agmon | microlocal | resonances | vodev | region
    ...kind-specific keys...

A config without ``tasks`` is a single task described by its top-level keys
(``kind`` required). Geometry is declared as::

    [geometry]
    kind = "half-cylinder"    # or "full-cylinder"
    E0 = 1.0
    cJ = 0.5
    profile = { family = "bump", c = 0.5, b = 6.0 }       # power | bump | constant | tabulated
    spectrum = { kind = "circle", count = 401 }           # circle | sphere | explicit
    V_L = { family = "power", A = 1.0, m = 1.0 }          # optional
    V_S = { amplitude = 1.0, r0 = 1.0, r1 = 4.0 }         # optional

h-sets are lists, ``{ logspace = [hmin, hmax, n] }`` or ``"threshold-aligned"``.
Complex numbers are written as ``[re, im]``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import re
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import (EndProfile, GeometryError, InputError, ManifoldConfig, RepulsivePotential, ResolutionError,
                       compact_bump, transverse_spectrum, validate_profile)
from .halfline import PreconditionError

SCHEMA = "cylres-report/1"
KINDS = ("validate", "bounds", "semiclassical", "scan", "modes", "embedded", "agmon", "microlocal",
         "resonances", "vodev", "region")

EXIT_OK, EXIT_FINDINGS, EXIT_INPUT = 0, 2, 3


class ConfigError(InputError):
    """Malformed experiment config; the message carries file, line and field."""


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _load_toml(text):
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text), tomllib.TOMLDecodeError


def parse_config(path) -> dict:
    """Read a TOML or JSON config into a normalized dict (see module docstring)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    else:
        try:
            raw, _ = _load_toml(text)
        except Exception as exc:  # TOMLDecodeError carries "(at line L, column C)"
            m = re.search(r"line (\d+), column (\d+)", str(exc))
            where = f"{path}:{m.group(1)}:{m.group(2)}" if m else str(path)
            if not m and "end of document" in str(exc):
                where = f"{path}:{len(text.splitlines()) or 1}"
            msg = re.sub(r"\s*\(at (line \d+, column \d+|end of document)\)", "", str(exc))
            raise ConfigError(f"{where}: {msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return normalize(raw, source=path, text=text)


def _line_of(text, key):
    if not text:
        return None
    pat = re.compile(r'^\s*"?' + re.escape(key) + r'"?\s*[=:]', re.M)
    m = pat.search(text)
    return text.count("\n", 0, m.start()) + 1 if m else None


class Fields:
    """Typed access to one table with dotted-path error messages."""

    def __init__(self, data, where, source=None, text=None):
        if not isinstance(data, dict):
            raise self._err(where, "expected a table", source, text)
        self.data, self.where, self.source, self.text = data, where, source, text
        self.used = set()
        self.optional = set()  # keys inherited from [defaults]

    @staticmethod
    def _err(where, msg, source, text):
        key = where.rsplit(".", 1)[-1].split("[")[0]
        line = _line_of(text, key)
        loc = f"{source}:{line}" if line else str(source or "<config>")
        return ConfigError(f"{loc}: field '{where}': {msg}")

    def error(self, key, msg):
        return self._err(f"{self.where}.{key}" if self.where else key, msg, self.source, self.text)

    def has(self, key):
        return key in self.data

    def raw(self, key, default=None):
        self.used.add(key)
        return self.data.get(key, default)

    def num(self, key, default=None, positive=False, integer=False):
        self.used.add(key)
        if key not in self.data:
            if default is None:
                raise self.error(key, "required number is missing")
            return default
        v = self.data[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self.error(key, f"expected a number, got {type(v).__name__}")
        if integer and int(v) != v:
            raise self.error(key, "expected an integer")
        if positive and not v > 0:
            raise self.error(key, "must be positive")
        return int(v) if integer else float(v)

    def text_(self, key, default=None, choices=None):
        self.used.add(key)
        if key not in self.data:
            if default is None:
                raise self.error(key, "required string is missing")
            return default
        v = self.data[key]
        if not isinstance(v, str):
            raise self.error(key, "expected a string")
        if choices and v not in choices:
            raise self.error(key, f"unknown value {v!r} (choose from {', '.join(choices)})")
        return v

    def flag(self, key, default=False):
        self.used.add(key)
        v = self.data.get(key, default)
        if not isinstance(v, bool):
            raise self.error(key, "expected true or false")
        return v

    def cplx(self, key, default=None):
        self.used.add(key)
        if key not in self.data:
            if default is None:
                raise self.error(key, "required complex number is missing")
            return complex(default)
        return _as_complex(self.data[key], lambda m: self.error(key, m))

    def nums(self, key, default=None, length=None, positive=False):
        self.used.add(key)
        if key not in self.data:
            if default is None:
                raise self.error(key, "required list is missing")
            return list(default)
        v = self.data[key]
        if not isinstance(v, list) or not v or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                                       for x in v):
            raise self.error(key, "expected a nonempty list of numbers")
        if length is not None and len(v) != length:
            raise self.error(key, f"expected {length} numbers")
        if positive and any(x <= 0 for x in v):
            raise self.error(key, "values must be positive")
        return [float(x) for x in v]

    def sub(self, key, required=True):
        self.used.add(key)
        if key not in self.data:
            if required:
                raise self.error(key, "required table is missing")
            return None
        return Fields(self.data[key], f"{self.where}.{key}" if self.where else key, self.source, self.text)

    def done(self):
        extra = sorted(set(self.data) - self.used - self.optional)
        if extra:
            raise self.error(extra[0], "unknown field")


def _as_complex(v, err):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return complex(v)
    if isinstance(v, list) and len(v) == 2 and all(isinstance(x, (int, float)) for x in v):
        return complex(v[0], v[1])
    raise err("expected a number or [re, im]")


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def normalize(raw, source=None, text=None) -> dict:
    """Split a raw config into run options and a list of task tables."""
    top = Fields(raw, "", source, text)
    seed = top.num("seed", 0, integer=True)
    out = top.text_("out", "results")
    defaults = raw.get("defaults", {})
    top.used.add("defaults")
    if not isinstance(defaults, dict):
        raise top.error("defaults", "expected a table")
    if "tasks" in raw:
        top.used.add("tasks")
        tasks = raw["tasks"]
        if not isinstance(tasks, list) or not tasks:
            raise top.error("tasks", "expected a nonempty array of tables")
        top.done()
        items = [(f"tasks[{i}]", t) for i, t in enumerate(tasks)]
    else:
        single = {k: v for k, v in raw.items() if k not in ("seed", "out", "defaults")}
        items = [("", single)]
    norm, names, read = [], set(), set()
    for where, t in items:
        if not isinstance(t, dict):
            raise Fields._err(where, "expected a table", source, text)
        own = set(t)
        t = _merge(defaults, t)
        f = Fields(t, where, source, text)
        kind = f.text_("kind", choices=KINDS)
        name = f.text_("name", kind)
        if not re.fullmatch(r"[A-Za-z0-9_.-]+", name):
            raise f.error("name", "use letters, digits, '_', '-' or '.'")
        if name in names:
            raise f.error("name", f"duplicate task name {name!r}")
        names.add(name)
        task = dict(t)
        task["kind"], task["name"] = kind, name
        # build once so that schema errors surface before any work starts;
        # defaults a task never reads are dropped instead of flagged
        probe = Fields(task, where, source, text)
        probe.used.update({"kind", "name"})
        probe.optional = set(defaults) - own
        _TASKS[kind](probe, dry=True, base=_base(source))
        for k in probe.optional - probe.used:
            del task[k]
        read |= set(defaults) & probe.used
        task["_where"] = where
        norm.append(task)
    unread = sorted(set(defaults) - read)
    if unread:
        raise Fields(defaults, "defaults", source, text).error(unread[0], "no task reads this default")
    return {"seed": seed, "out": out, "tasks": norm, "source": str(source) if source else None}


def _base(source):
    return Path(source).resolve().parent if source else Path.cwd()


def config_hash(cfg) -> str:
    canon = json.dumps({"seed": cfg["seed"], "tasks": [{k: v for k, v in t.items() if not k.startswith("_")}
                                                       for t in cfg["tasks"]]},
                       sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# builders from config tables
# ---------------------------------------------------------------------------

def build_profile(f: Fields, base: Path):
    fam = f.text_("family", choices=("power", "bump", "constant", "tabulated"))
    d0 = f.num("delta0", 0.0) or None
    if fam == "power":
        prof = EndProfile.power(f.num("c", 0.5), f.num("m", 1.0, positive=True), delta0=d0)
    elif fam == "bump":
        prof = EndProfile.bump(f.num("c", 0.5), f.num("b", 6.0, positive=True), delta0=d0)
    elif fam == "constant":
        prof = EndProfile.constant()
    else:
        p = Path(f.text_("path"))
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise f.error("path", f"file not found: {p}")
        prof = EndProfile.load(p, delta0=d0)
    f.done()
    return prof


def build_potential(f: Fields | None):
    if f is None:
        return None
    fam = f.text_("family", choices=("power", "bump", "zero"))
    dV = f.num("deltaV", 0.0) or None
    if fam == "power":
        V = RepulsivePotential.power(f.num("A", 1.0), f.num("m", 1.0, positive=True), deltaV=dV)
    elif fam == "bump":
        V = RepulsivePotential.bump(f.num("A", 1.0), f.num("b", 4.0, positive=True), deltaV=dV)
    else:
        V = RepulsivePotential.zero(dV or 1.0)
    f.done()
    return V


def build_spectrum(f: Fields):
    kind = f.text_("kind", choices=("circle", "sphere", "explicit"))
    count = f.num("count", integer=True, positive=True)
    if kind == "circle":
        sp = transverse_spectrum("circle", count, L=f.num("L", 2 * math.pi, positive=True))
    elif kind == "sphere":
        sp = transverse_spectrum("sphere", count, dim=f.num("dim", 2, integer=True, positive=True))
    else:
        sp = transverse_spectrum("explicit", count, dim=f.num("dim", 1, integer=True, positive=True),
                                 values=f.nums("values"))
    f.done()
    return sp


def check_geometry(profile: EndProfile):
    """Reject profiles outside the admissible class (0 < f <= 1 and f < 1 on [0, 6))."""
    rep = validate_profile(profile, np.linspace(0.0, 60.0, 6001))
    for name, ok, margin in rep.checks[:2]:
        if not ok:
            raise GeometryError(f"profile fails '{name}' (margin {margin:.3g})")
    return rep


def build_config(f: Fields, base: Path, check=True) -> ManifoldConfig:
    prof = build_profile(f.sub("profile"), base)
    if check:
        check_geometry(prof)
    spec = build_spectrum(f.sub("spectrum"))
    VL = build_potential(f.sub("V_L", required=False))
    vs = f.sub("V_S", required=False)
    VS = None
    if vs is not None:
        VS = compact_bump(vs.num("amplitude", 1.0), vs.num("r0"), vs.num("r1"))
        vs.done()
    cfg = ManifoldConfig(prof, spec, E0=f.num("E0", 1.0, positive=True), cJ=f.num("cJ", 0.5, positive=True),
                         V_L=VL, V_S=VS,
                         geometry=f.text_("kind", "half-cylinder", choices=("half-cylinder", "full-cylinder")))
    f.done()
    return cfg


def build_hs(f: Fields, key="h", E0=1.0, L=2 * math.pi, default=None):
    f.used.add(key)
    v = f.data.get(key, default)
    if v is None:
        raise f.error(key, "required h-set is missing")
    if v == "threshold-aligned":
        from .modes import threshold_aligned_hs
        return threshold_aligned_hs(E0, L=L)
    if isinstance(v, dict):
        if set(v) != {"logspace"} or not isinstance(v["logspace"], list) or len(v["logspace"]) != 3:
            raise f.error(key, "expected { logspace = [hmin, hmax, n] }")
        a, b, n = v["logspace"]
        if not (0 < a < b) or int(n) != n or n < 2:
            raise f.error(key, "logspace needs 0 < hmin < hmax and an integer n >= 2")
        return [float(x) for x in np.geomspace(a, b, int(n))]
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, list) or not v or not all(isinstance(x, (int, float)) and x > 0 for x in v):
        raise f.error(key, "expected positive numbers, a logspace table or \"threshold-aligned\"")
    return [float(x) for x in v]


def build_cutoff(f: Fields, key, default):
    """[a, b, ramp] -> smooth cutoff equal to 1 on [a, b]."""
    from .halfline import cutoff_weight
    a, b, ramp = f.nums(key, default, length=3)
    if not (b > a and ramp > 0):
        raise f.error(key, "need a < b and ramp > 0")
    return cutoff_weight(a, b, ramp)


# ---------------------------------------------------------------------------
# task results and output files
# ---------------------------------------------------------------------------

@dataclass
class TaskOutput:
    report: dict
    findings: list = field(default_factory=list)
    headline: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)  # extra digest lines
    csv: dict = field(default_factory=dict)  # file name -> rows (first row = header)
    dat: dict = field(default_factory=dict)  # file name -> (x, y) pairs


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [_clean(v) for v in items]
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": _clean(obj.real), "im": _clean(obj.imag)}
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if hasattr(obj, "to_dict"):
        return _clean(obj.to_dict())
    if callable(obj):
        return getattr(obj, "label", None) or getattr(obj, "__name__", "function")
    return obj


def _cell(v):
    if isinstance(v, (complex, np.complexfloating)):
        return f"{v.real:.12g}{v.imag:+.12g}j"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def _write_csv(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([_cell(v) for v in r])
    path.write_text(buf.getvalue())


def _write_dat(path, pairs):
    path.write_text("".join(f"{float(x):.12g} {float(y):.12g}\n" for x, y in pairs))


def _records_rows(records, keys=None):
    keys = keys or sorted({k for r in records for k in r})
    return [keys] + [[r.get(k, "") for k in keys] for r in records]


# ---------------------------------------------------------------------------
# task kinds; each takes (fields, dry, base, seed) and returns TaskOutput
# ---------------------------------------------------------------------------

def _task_validate(f, dry=False, base=None, seed=0):
    prof = build_profile(f.sub("profile"), base)
    r_max = f.num("r_max", 60.0, positive=True)
    n = f.num("n", 6001, integer=True, positive=True)
    f.done()
    if dry:
        return None
    rep = validate_profile(prof, np.linspace(0.0, r_max, n))
    out = TaskOutput({"profile": prof.to_dict(), "validation": rep.to_dict()},
                     headline={"passed": rep.passed, "delta0": rep.delta0},
                     csv={"checks.csv": [["check", "passed", "margin"]] + [[c, ok, m] for c, ok, m in rep.checks]})
    for name, ok, margin in rep.checks[:2]:
        if not ok:
            raise GeometryError(f"profile fails '{name}' (margin {margin:.3g})")
    out.findings = [f"hypothesis '{c}' fails (margin {m:.3g})" for c, ok, m in rep.checks if not ok]
    return out


def _zset(f: Fields):
    from .halfline import explicit_zset
    f.used.add("z")
    v = f.data.get("z", {"grid": {}})
    if isinstance(v, dict) and set(v) == {"grid"}:
        t = Fields(v["grid"], f"{f.where}.z.grid", f.source, f.text)
        zs = explicit_zset(t.num("count", 200, integer=True, positive=True), t.num("zmin", 1e-2, positive=True),
                            t.num("zmax", 1e2, positive=True), t.num("eps", 1e-6, positive=True))
        t.done()
        return zs
    if isinstance(v, list) and v:
        return [_as_complex(z, lambda m: f.error("z", m)) for z in v]
    raise f.error("z", "expected a list of spectral parameters or { grid = {...} }")


def _task_bounds(f, dry=False, base=None, seed=0):
    from .halfline import check_explicit_bounds
    f.used.add("potentials")
    plist = f.data.get("potentials")
    if not isinstance(plist, list) or not plist:
        raise f.error("potentials", "expected a nonempty array of potential tables")
    pots = []
    for i, p in enumerate(plist):
        pf = Fields(p, f"{f.where}.potentials[{i}]" if f.where else f"potentials[{i}]", f.source, f.text)
        delta = pf.num("delta", 1.0, positive=True)
        pf.used.add("delta")
        pots.append((build_potential(pf), delta))
    zs = _zset(f)
    thetas = f.nums("theta", (0.0, 0.5, 1.0))
    tol = f.num("tol", 0.02, positive=True)
    r_max = f.num("r_max", 30.0, positive=True)
    f.done()
    if dry:
        return None
    reports, recs, findings = [], [], []
    worst = 0.0
    for V, delta in pots:
        for kind, rep in check_explicit_bounds(V, delta, zs, thetas, r_max=r_max, tol=tol).items():
            reports.append(rep.to_dict())
            for r in rep.records:
                recs.append({"kind": kind, **r})
            findings += rep.findings
            worst = max(worst, rep.worst_ratio)
    keys = ["kind", "potential", "delta", "theta", "z", "norm", "rhs", "ratio", "margin", "truncation", "n"]
    by_mag = {}
    for r in recs:
        k = round(abs(r["z"]), 12)
        by_mag[k] = max(by_mag.get(k, 0.0), r["ratio"])
    return TaskOutput({"reports": reports, "count": len(recs)}, findings,
                      {"worst_ratio": worst, "norms": len(recs), "tol": tol},
                      csv={"digest.csv": _records_rows(recs, keys)}, dat={"ratio_vs_absz.dat": sorted(by_mag.items())})


def _task_semiclassical(f, dry=False, base=None, seed=0):
    from .halfline import check_semiclassical, semiclassical_zetas
    V = build_potential(f.sub("potential"))
    hs = build_hs(f, default={"logspace": [0.02, 0.2, 6]})
    zetas = semiclassical_zetas(f.num("zeta_count", 19, integer=True, positive=True))
    kinds = f.raw("bounds", ["pdbigh", "pdsmallh", "pdvboundh"])
    if not isinstance(kinds, list) or not set(kinds) <= {"pdbigh", "pdsmallh", "pdvboundh"}:
        raise f.error("bounds", "expected a list drawn from pdbigh, pdsmallh, pdvboundh")
    exp_tol = f.num("exp_tol", 0.15, positive=True)
    r_max = f.num("r_max", 60.0, positive=True)
    f.done()
    if dry:
        return None
    rep = check_semiclassical(V, hs, zetas, kinds=tuple(kinds), r_max=r_max, exp_tol=exp_tol)
    dat = {f"{k}.dat": [(r["h"], r["sup"]) for r in rep.records if r["kind"] == k] for k in kinds}
    return TaskOutput(rep.to_dict(), list(rep.findings),
                      {k: round(v["exponent"], 4) for k, v in rep.fits.items()},
                      csv={"digest.csv": rep.csv_rows()}, dat=dat)


def _task_scan(f, dry=False, base=None, seed=0):
    from .modes import scan_uniform_bound
    cfg = build_config(f.sub("geometry"), base, check=not dry)
    z0, z1 = f.nums("z_range", (5.0, 100.0), length=2)
    n = f.num("points", 100, integer=True, positive=True)
    eps = f.num("eps", 1e-6, positive=True)
    chi = build_cutoff(f, "chi", (0.0, 8.0, 1.0))
    h = f.num("h", 1.0, positive=True)
    r_max = f.num("r_max", 14.0, positive=True)
    slope_tol = f.num("slope_tol", 0.1, positive=True)
    f.done()
    if dry:
        return None
    rep = scan_uniform_bound(cfg, np.linspace(z0, z1, n), eps, chi, h, r_max, slope_tol=slope_tol)
    return TaskOutput(rep.to_dict(), list(rep.findings),
                      {"slope": round(rep.slope, 4), "min_upper": rep.min_upper, "median": rep.median},
                      csv={"digest.csv": [["z", "norm", "argmax_sigma"]] + [list(t) for t in
                                                                          zip(rep.zs, rep.norms, rep.argmax_sigma)]},
                      dat={"scan.dat": rep.columns()})


def _task_modes(f, dry=False, base=None, seed=0):
    from .halfline import check_mode_estimates
    from .modes import check_taway_scaling, check_tcont_scaling, measure_a_of_h
    cfg = build_config(f.sub("geometry"), base, check=not dry)
    hs = build_hs(f, E0=cfg.E0 if not dry else 1.0, default="threshold-aligned")
    checks = f.raw("checks", ["taway", "tcont"])
    if not isinstance(checks, list) or not checks or not set(checks) <= {"taway", "tcont", "estimates"}:
        raise f.error("checks", "expected a list drawn from taway, tcont, estimates")
    exp_tol = f.num("exp_tol", 0.3, positive=True)
    f.done()
    if dry:
        return None
    table = measure_a_of_h(cfg, hs)
    out = TaskOutput({"a_of_h": table}, csv={"a_of_h.csv": _records_rows(table)},
                     dat={"a_of_h.dat": [(t["h"], t["a"]) for t in table]})
    for c in checks:
        if c == "taway":
            rep = check_taway_scaling(cfg, hs, a_table=table, exp_tol=exp_tol)
            out.headline.update(cut=round(rep.fits["cut_exponent"], 4), uncut=round(rep.fits["uncut_exponent"], 4))
            out.dat["cut.dat"] = [(r["h"], r["cut"]) for r in rep.records]
            out.dat["uncut.dat"] = [(r["h"], r["uncut"]) for r in rep.records]
        elif c == "tcont":
            rep = check_tcont_scaling(cfg, hs, a_table=table, exp_tol=exp_tol)
            out.headline["tcont"] = round(rep.fits["exponent"], 4)
        else:
            rep = check_mode_estimates(cfg, hs, exp_tol=exp_tol)
            out.headline["estimates"] = {k: round(v["exponent"], 4) for k, v in rep.fits.items()}
        out.report[c] = rep.to_dict()
        out.csv[f"{c}.csv"] = rep.csv_rows()
        out.findings += rep.findings
    return out


def _task_embedded(f, dry=False, base=None, seed=0):
    from .embedded import HourglassSpec, build_VJ, certify_embedded
    s = f.sub("hourglass")
    shape = s.text_("shape", "recipe", choices=("recipe", "multiwell"))
    R = s.num("R", 2.0 if shape == "recipe" else 4.0, positive=True)
    J = s.num("J", 5, integer=True)
    kw = {"L": s.num("L", 2 * math.pi, positive=True), "dim": s.num("dim", 1, integer=True, positive=True)}
    if shape == "recipe":
        budget = s.num("budget", 0.2, positive=True)
        make = lambda: HourglassSpec.recipe(R=R, J=J, budget=budget, **kw)
    else:
        k = s.num("wells", 2, integer=True, positive=True)
        gap = s.num("gap", 1.0, positive=True)
        c = s.num("c", 0.0) or None
        make = lambda: HourglassSpec.multiwell(k, R=R, J=J, c=c, gap=gap, **kw)
    s.done()
    dr = f.num("dr", 0.005, positive=True)
    digits = f.num("digits", 4, integer=True, positive=True)
    f.done()
    if dry:
        return None
    spec = make()
    rep = certify_embedded(spec, dr=dr, digits=digits)
    findings = list(rep.findings)
    if not all(rep.criterion[k] for k in ("integral_ok", "positivity_ok")):
        findings.append("embedded criterion fails for this instance")
    r = np.linspace(-rep.box, rep.box, 2001)
    return TaskOutput({"spec": spec.to_dict(), "report": rep.to_dict()}, findings,
                      {"embedded": int(sum(rep.embedded)), "E": [round(e, 8) for e in rep.energies]},
                      csv={"states.csv": [["E", "lambda", "residual", "doubling_change", "embedded"]]
                           + [list(t) for t in zip(rep.energies, rep.lambdas, rep.residuals, rep.stability,
                                                   rep.embedded)]},
                      dat={"VJ.dat": list(zip(r, build_VJ(spec, r)))})


def _task_agmon(f, dry=False, base=None, seed=0):
    from .halfline import agmon_probe
    cfg = build_config(f.sub("geometry"), base, check=not dry)
    hs = build_hs(f, default=[0.2, 0.125, 0.077, 0.05, 0.03125, 0.02])
    minus = f.nums("minus", (1.0, 1.8), length=2)
    plus = f.nums("plus", (2.2, 3.0), length=2)
    s = f.num("s", 1.0, positive=True)
    eps = f.num("eps", 1e-6, positive=True)
    energy = f.num("energy", 0.0)
    r2_min = f.num("r2_min", 0.99, positive=True)
    max_var = f.num("overlap_variation", 3.0, positive=True)
    f.done()
    if dry:
        return None
    fit = agmon_probe(cfg, hs, tuple(minus), tuple(plus), s, eps, energy)
    findings = []
    if not (fit.slope < 0 and fit.r2 >= r2_min):
        findings.append(f"no exponential decay: slope {fit.slope:.3g}, R^2 {fit.r2:.4f}")
    if fit.overlap_variation > max_var:
        findings.append(f"overlap norms vary by {fit.overlap_variation:.2f}x")
    return TaskOutput(fit.to_dict(), findings,
                      {"slope": round(fit.slope, 4), "r2": round(fit.r2, 5),
                       "overlap_variation": round(fit.overlap_variation, 3)},
                      csv={"digest.csv": [["h", "disjoint", "overlap", "mode"]]
                           + [list(t) for t in zip(fit.hs, fit.disjoint, fit.overlap, fit.modes)]},
                      dat={"log_norm_vs_inv_h.dat": [(1 / h, math.log(d)) for h, d in zip(fit.hs, fit.disjoint)]})


def _task_microlocal(f, dry=False, base=None, seed=0):
    from .halfline import microlocal_sweep
    cfg = build_config(f.sub("geometry"), base, check=not dry)
    hs = build_hs(f, default=[0.1, 0.07, 0.05, 0.035, 0.025, 0.02])
    min_out = f.num("min_outgoing_exponent", 4.0)
    min_in = f.num("min_incoming_exponent", -1.5)
    f.done()
    if dry:
        return None
    out = microlocal_sweep(cfg, hs)
    eo, ei = out["outgoing_exponent"], out["incoming_exponent"]
    findings = []
    if eo < min_out:
        findings.append(f"outgoing exponent {eo:.3g} below {min_out:g}")
    if ei < min_in:
        findings.append(f"incoming exponent {ei:.3g} below {min_in:g}")
    return TaskOutput(out, findings, {"outgoing": round(eo, 3), "incoming": round(ei, 3)},
                      csv={"digest.csv": [["h", "outgoing", "incoming"]]
                           + [list(t) for t in zip(out["hs"], out["outgoing"], out["incoming"])]},
                      dat={"outgoing.dat": list(zip(out["hs"], out["outgoing"])),
                           "incoming.dat": list(zip(out["hs"], out["incoming"]))})


def _axiom_check(h, sigmas, E0, n, seed):
    """Worst violation of the metric axioms for d_h over n random triples."""
    from .continuation import boundary_point, dh_metric, transport
    rng = np.random.default_rng(seed)
    start = boundary_point(E0, h, 1)
    def point():
        return transport(start, E0 + rng.uniform(-0.5, 0.5) * E0 + 1j * rng.uniform(-0.3, 0.3) * E0, sigmas)
    worst = 0.0
    for _ in range(n):
        p, q, r = point(), point(), point()
        d = lambda a, b: dh_metric(a, b, sigmas).value
        worst = max(worst, d(p, r) - d(p, q) - d(q, r), abs(d(p, q) - d(q, p)), d(p, p))
    return worst


def _task_resonances(f, dry=False, base=None, seed=0, workers=1):
    from .continuation import boundary_point, rho, search_modes
    cfg = build_config(f.sub("geometry"), base, check=not dry)
    h = f.num("h", positive=True)
    box = f.num("box", 0.5, positive=True)
    side = f.num("side", 1, integer=True)
    f.used.add("modes")
    modes = f.data.get("modes")
    if modes is not None and not (isinstance(modes, list) and all(isinstance(j, int) and j >= 0 for j in modes)):
        raise f.error("modes", "expected a list of nonnegative mode indices")
    triples = f.num("axiom_triples", 0, integer=True)
    f.done()
    if dry:
        return None
    if side not in (-1, 1):
        raise InputError("side must be +1 or -1")
    sig = np.array([s for s, _ in cfg.spectrum.distinct()])
    if modes is None:
        modes = [j for j in range(sig.size) if h * h * sig[j] ** 2 <= cfg.E0 + 1.0]
    ref = boundary_point(cfg.E0, h, side)
    jobs = []
    for j in modes:
        if j >= sig.size:
            raise InputError(f"mode {j} outside the spectrum list ({sig.size} distinct values)")
        c = rho(ref, j, sig)
        jobs.append((j, (c.real - box * h, c.real + box * h, c.imag - box * h, c.imag + box * h)))
    recs = search_modes(cfg, h, jobs, side, cfg.E0, workers)
    findings = []
    report = {"h": h, "box": box, "side": side, "modes": modes, "resonances": [r.to_dict() for r in recs]}
    if triples:
        worst = _axiom_check(h, sig, cfg.E0, triples, seed)
        report["metric_axioms"] = {"triples": triples, "seed": seed, "worst": worst}
        if worst > 1e-12:
            findings.append(f"d_h axioms violated by {worst:.3g}")
    sheets = {}
    for r in recs:
        sheets.setdefault(tuple(sorted(r.location.flipped)), []).append(r)
    csvs = {"digest.csv": [["j", "sigma", "re_z", "im_z", "re_rho", "im_rho", "residual", "dh", "sheet"]]}
    for k, (flips, rs) in enumerate(sorted(sheets.items())):
        csvs[f"sheet{k}.csv"] = [["re_z", "im_z"]] + [[r.location.base.real, r.location.base.imag] for r in rs]
        for r in rs:
            csvs["digest.csv"].append([r.j, r.sigma, r.location.base.real, r.location.base.imag, r.rho.real,
                                       r.rho.imag, r.residual, r.dh, k])
    report["sheets"] = [list(flips) for flips in sorted(sheets)]
    nearest = min((r.dh for r in recs), default=float("inf"))
    return TaskOutput(report, findings, {"found": len(recs), "nearest_dh": nearest}, csv=csvs)


def _task_vodev(f, dry=False, base=None, seed=0):
    from .continuation import smooth_cutoff, verify_vodev_identity, vodev_convergence
    cfg = build_config(f.sub("geometry"), base, check=not dry)
    h = f.num("h", 1.0, positive=True)
    z, z0 = f.cplx("z", -1.0), f.cplx("z0", -2.0)
    chi = f.nums("chi", (-2.0, 10.0, 1.0), length=3)
    chi1 = f.nums("chi1", (-2.0, 8.0, 1.0), length=3)
    dr = f.num("dr", 0.01, positive=True)
    n_modes = f.num("n_modes", 4, integer=True, positive=True)
    ref = f.text_("reference", "kernel", choices=("kernel", "fd"))
    conv = f.flag("convergence", False)
    tol = f.num("tol", 1e-4, positive=True)
    f.done()
    if dry:
        return None
    c, c1 = smooth_cutoff(*chi), smooth_cutoff(*chi1)
    rep = verify_vodev_identity(cfg, h, z, z0, c, c1, dr=dr, n_modes=n_modes, reference=ref)
    out = TaskOutput({"identity": rep.to_dict()}, headline={"discrepancy": rep.discrepancy},
                     csv={"per_mode.csv": [["mode", "discrepancy"]] + [[i, d] for i, d in enumerate(rep.per_mode)]})
    if rep.discrepancy > tol:
        out.findings.append(f"discrepancy {rep.discrepancy:.3g} above {tol:g}")
    if conv:
        cv = vodev_convergence(cfg, h, z, z0, c, c1, dr=2 * dr, n_modes=n_modes, reference=ref)
        out.report["convergence"] = cv
        out.headline["order"] = round(cv["order"], 3)
        out.dat["discrepancy_vs_dr.dat"] = [(2 * dr, cv["coarse"]), (dr, cv["fine"])]
    return out


def _task_region(f, dry=False, base=None, seed=0, workers=1):
    from .continuation import resonance_free_region, smooth_cutoff
    cfg = build_config(f.sub("geometry"), base, check=not dry)
    hs = build_hs(f, E0=cfg.E0 if not dry else 1.0, default="threshold-aligned")
    chi = f.nums("chi", (-2.0, 10.0, 1.0), length=3)
    box = f.num("box", 0.5, positive=True)
    C = f.num("C", 0.0) or None
    eps = f.num("eps", 1e-8, positive=True)
    stability = f.num("stability", 2.0, positive=True)
    f.done()
    if dry:
        return None
    from .halfline import Weight
    rep = resonance_free_region(cfg, hs, Weight(smooth_cutoff(*chi), "chi"), C=C, box=box, eps=eps,
                                stability=stability, workers=workers)
    keys = ["h", "N0", "mu", "cprime_max", "cprime_kind", "nearest", "resonances", "modes", "samples",
            "max_norm", "chat"]
    rows = [f"h={r['h']:.4g}  mu={r['mu']:.4g}  N0={r['N0']:.4g}  C_hat={r['chat']:.4g}  "
            f"C'_max={r['cprime_max']:.4g} ({r['cprime_kind']})" for r in rep.table]
    return TaskOutput(rep.to_dict(), list(rep.findings),
                      {"C": rep.C, "cprime": rep.cprime, "chat_variation": round(rep.chat_variation, 3)}, rows,
                      csv={"mu_table.csv": _records_rows(rep.table, keys),
                           "resonances.csv": [["j", "re_z", "im_z", "dh"]] + [
                               [r.j, r.location.base.real, r.location.base.imag, r.dh] for r in rep.resonances]},
                      dat={"mu.dat": [(r["h"], r["mu"]) for r in rep.table]})


_TASKS = {"validate": _task_validate, "bounds": _task_bounds, "semiclassical": _task_semiclassical,
          "scan": _task_scan, "modes": _task_modes, "embedded": _task_embedded, "agmon": _task_agmon,
          "microlocal": _task_microlocal, "resonances": _task_resonances, "vodev": _task_vodev,
          "region": _task_region}
_INNER_PARALLEL = {"resonances", "region"}


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def _execute(task, out_dir, seed, source, inner_workers):
    """Run one task in the current process and write its files."""
    name, kind = task["name"], task["kind"]
    start = time.perf_counter()
    rec = {"name": name, "kind": kind, "status": "ok", "headline": {}, "rows": [], "findings": [], "files": []}
    tdir = Path(out_dir) / name
    try:
        np.random.seed(seed)
        fields = Fields(task, task.get("_where", ""), source, None)
        fields.used.update({"kind", "name", "_where"})
        kw = {"workers": inner_workers} if kind in _INNER_PARALLEL else {}
        res = _TASKS[kind](fields, dry=False, base=_base(source), seed=seed, **kw)
        tdir.mkdir(parents=True, exist_ok=True)
        files = {"report.json": None}
        (tdir / "report.json").write_text(json.dumps(
            {"schema": SCHEMA, "version": __version__, "task": name, "kind": kind, "headline": _clean(res.headline),
             "findings": res.findings, "report": _clean(res.report)}, indent=1, sort_keys=True) + "\n")
        for fname, rows in res.csv.items():
            _write_csv(tdir / fname, rows)
            files[fname] = None
        for fname, pairs in res.dat.items():
            _write_dat(tdir / fname, pairs)
            files[fname] = None
        rec.update(headline=_clean(res.headline), rows=res.rows, findings=list(res.findings),
                   files=[f"{name}/{k}" for k in files])
        if res.findings:
            rec["status"] = "findings"
    except PreconditionError as exc:
        rec.update(status="precondition", error=str(exc))
    except (InputError, GeometryError, ResolutionError) as exc:
        rec.update(status="input-error", error=f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # keep independent tasks running
        rec.update(status="crashed", error=f"{type(exc).__name__}: {exc}",
                   traceback=traceback.format_exc(limit=4))
    rec["wall_time"] = round(time.perf_counter() - start, 3)
    return rec


def _file_entry(root, rel):
    p = Path(root) / rel
    data = p.read_bytes()
    return {"path": rel, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}


def exit_code(tasks) -> int:
    states = {t["status"] for t in tasks}
    if states & {"input-error", "crashed"}:
        return EXIT_INPUT
    if states & {"findings", "precondition"}:
        return EXIT_FINDINGS
    return EXIT_OK


def run(config_path, workers=1, out=None, seed=None):
    """Run every task of a config; returns (exit status, manifest dict).

    Tasks run in a process pool when ``workers`` > 1 (a single task hands the
    workers to its mode searches instead). The manifest lands in
    ``<out>/manifest.json``.
    """
    start = time.perf_counter()
    cfg = parse_config(config_path)
    seed = cfg["seed"] if seed is None else int(seed)
    out_dir = Path(out) if out else _base(config_path) / cfg["out"]
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = cfg["tasks"]
    source = cfg["source"]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            futs = [pool.submit(_execute, t, str(out_dir), seed, source, 1) for t in tasks]
            records = [fu.result() for fu in futs]
    else:
        records = [_execute(t, str(out_dir), seed, source, workers) for t in tasks]
    inventory = []
    for rec in records:
        missing = [p for p in rec["files"] if not (out_dir / p).exists()]
        if missing:
            rec["status"] = "crashed"
            rec["error"] = f"declared outputs missing: {', '.join(missing)}"
        inventory += [_file_entry(out_dir, p) for p in rec["files"] if (out_dir / p).exists()]
    manifest = {"schema": SCHEMA, "version": __version__, "config": str(Path(config_path).resolve()),
                "config_hash": config_hash(cfg), "seed": seed, "out": str(out_dir.resolve()), "workers": workers,
                "wall_time": round(time.perf_counter() - start, 3), "tasks": records,
                "inventory": inventory + [{"path": "manifest.json"}]}
    code = exit_code(records)
    manifest["exit_status"] = code
    (out_dir / "manifest.json").write_text(json.dumps(_clean(manifest), indent=1, sort_keys=True) + "\n")
    return code, manifest


def _headline_text(h):
    parts = []
    for k, v in h.items():
        if isinstance(v, float):
            v = f"{v:.4g}"
        parts.append(f"{k}={v}")
    return ", ".join(parts)


def report_digest(manifest, root=None) -> list:
    """One row per task: (name, kind, headline, verdict), plus indented detail rows.

    ``manifest`` is a dict or a path to manifest.json. Listed outputs that no
    longer exist turn the verdict into MISSING.
    """
    if not isinstance(manifest, dict):
        p = Path(manifest)
        try:
            manifest = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{p}: cannot read manifest ({exc})") from None
        root = p.parent if root is None else root
    rows = []
    for t in manifest.get("tasks", []):
        verdict = {"ok": "PASS", "findings": "FAIL", "precondition": "FAIL"}.get(t["status"], "ERROR")
        if root is not None:
            missing = [f for f in t.get("files", []) if not (Path(root) / f).exists()]
            if missing:
                verdict = f"MISSING {len(missing)} output(s)"
        head = _headline_text(t.get("headline", {})) or t.get("error", "")
        rows.append((t["name"], t["kind"], head, verdict))
        for line in t.get("rows", []):
            rows.append(("", "", "  " + line, ""))
    return rows


def format_digest(rows) -> str:
    if not rows:
        return "(no tasks)"
    head = ("task", "kind", "headline", "verdict")
    w = [max(len(str(r[i])) for r in rows + [head]) for i in range(4)]
    w[2] = min(w[2], 110)
    fmt = "  ".join(f"{{:<{x}}}" for x in w)
    lines = [fmt.format(*head), fmt.format(*("-" * x for x in w))]
    lines += [fmt.format(*(str(c) for c in r)) for r in rows]
    return "\n".join(lines)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="cylres", description="Resolvent and resonance experiments on cylindrical ends.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    rp = sub.add_parser("run", help="run an experiment config")
    rp.add_argument("config")
    rp.add_argument("--workers", type=int, default=1)
    rp.add_argument("--out", default=None, help="output directory (default: the config's 'out', next to it)")
    rp.add_argument("--seed", type=int, default=None)
    dp = sub.add_parser("digest", help="summarize a manifest.json")
    dp.add_argument("manifest")
    args = ap.parse_args(argv)
    if args.cmd == "run":
        if args.workers < 1:
            ap.error("--workers must be >= 1")
        try:
            code, manifest = run(args.config, args.workers, args.out, args.seed)
        except (ConfigError, InputError, GeometryError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        print(format_digest(report_digest(manifest, manifest["out"])))
        return code
    try:
        print(format_digest(report_digest(args.manifest)))
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
