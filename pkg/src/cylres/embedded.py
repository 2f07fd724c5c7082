"""Warped products whose Laplacian has eigenvalues embedded in [0, inf).

An hourglass surface R x S^1 with metric dr^2 + f(r)^2 dtheta^2 and a
potential V_W supported in the neck. Conjugating by f, mode J of
Delta + V_W becomes -d^2 + V_J + sigma_J^2 with
V_J = f''/f + sigma_J^2 (f^{-4/(d-1)} - 1) + V_W. A bound state of
-d^2 + V_J at lambda in (-sigma_J^2, 0) is an eigenvalue
E = lambda + sigma_J^2 > 0 of the full operator, inside its continuous
spectrum.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import brentq

from .geometry import GeometryError, InputError
from .halfline import cinf_step


def neck_bump(x):
    """exp(1 - 1/(1 - x^2)) on |x| < 1, zero outside; equals 1 at 0."""
    x = np.asarray(x, float)
    inside = np.abs(x) < 1
    out = np.zeros_like(x)
    xi = x[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - xi * xi))
    return out


def neck_bump_d2(x):
    x = np.asarray(x, float)
    inside = np.abs(x) < 1
    out = np.zeros_like(x)
    xi = x[inside]
    q = 1.0 - xi * xi
    g1 = -2 * xi / q**2
    g2 = -2 / q**2 - 8 * xi * xi / q**3
    out[inside] = np.exp(1.0 - 1.0 / q) * (g2 + g1 * g1)
    return out


def plateau(depth, half, taper):
    """-depth on [-half, half], C-infinity taper to 0 over ``taper`` on each side."""
    def V(r):
        r = np.asarray(r, float)
        return -depth * cinf_step((half + taper - np.abs(r)) / taper)
    return V


@dataclass(frozen=True)
class HourglassSpec:
    """f = 1 - c phi(r/R) on the line and a neck potential V_W.

    ``wells`` lists (center, half-width, depth fraction) triples; the
    potential is -frac sigma_J^2 on each plateau with C-infinity tapers of
    width ``taper``. The default single well is the recipe's plateau on
    [-R/2, R/2] at depth sigma_J^2/2.
    """

    R: float = 2.0
    c: float = 0.02
    J: int = 5
    L: float = 2 * math.pi
    dim: int = 1  # transverse dimension; d = dim + 1
    wells: tuple = ((0.0, None, 0.5),)
    taper: float = 0.25

    def __post_init__(self):
        if not self.R > 0:
            raise InputError("R must be positive")
        if not 0 <= self.c < 1:
            raise GeometryError("f must stay positive: need 0 <= c < 1")
        if self.J < 0:
            raise InputError("J must be nonnegative")
        for ctr, half, frac in self.wells:
            hw = self.R / 2 if half is None else half
            if not 0 <= frac <= 0.5:
                raise InputError("well depth must lie in [0, sigma_J^2/2]")
            if abs(ctr) + hw + self.taper >= self.R:
                raise InputError("V_W must be supported inside (-R, R)")

    @property
    def sigma(self):
        return 2 * math.pi * self.J / self.L

    @property
    def d(self):
        return self.dim + 1

    @property
    def multiplicity(self):
        return 2 if (self.dim == 1 and self.J > 0) else 1

    def f(self, r):
        return 1.0 - self.c * neck_bump(np.asarray(r, float) / self.R)

    def f_d2(self, r):
        return -self.c * neck_bump_d2(np.asarray(r, float) / self.R) / self.R**2

    def V_W(self, r):
        r = np.asarray(r, float)
        out = np.zeros_like(r)
        for ctr, half, frac in self.wells:
            hw = self.R / 2 if half is None else half
            out += plateau(frac * self.sigma**2, hw, self.taper)(r - ctr)
        return out

    def with_wells(self, wells):
        return HourglassSpec(self.R, self.c, self.J, self.L, self.dim, tuple(wells), self.taper)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self):
        return {"R": self.R, "c": self.c, "J": self.J, "L": self.L, "dim": self.dim,
                "wells": [list(w) for w in self.wells], "taper": self.taper}

    @classmethod
    def recipe(cls, R=2.0, J=5, budget=0.2, **kw):
        """Largest-neck instance with the integral of f^{-4/(d-1)} - 1 equal to ``budget`` (<= 1/4)."""
        probe = cls(R=R, c=0.0, J=J, **kw)
        alpha = 4.0 / (probe.d - 1)

        def excess(c):
            g = lambda r: (1 - c * neck_bump(np.array([r / R]))[0]) ** (-alpha) - 1
            return quad(g, -R, R, limit=200)[0] - budget

        c = brentq(excess, 1e-9, 0.5)
        return cls(R=R, c=c, J=J, **kw)

    @classmethod
    def multiwell(cls, k=2, R=4.0, J=5, c=None, gap=1.0, **kw):
        """k equal plateaus of depth sigma_J^2/2 separated by ``gap``; each binds a state."""
        base = cls.recipe(R=R, J=J, **kw) if c is None else cls(R=R, c=c, J=J, **kw)
        taper = base.taper
        span = R - 0.2 - 2 * taper  # room inside (-R, R) after the outer tapers
        width = (2 * span - (k - 1) * (gap + 2 * taper)) / k
        if width <= 0:
            raise InputError("wells do not fit: lower k or the gap")
        wells, left = [], -span
        for _ in range(k):
            wells.append((left + width / 2, width / 2, 0.5))
            left += width + gap + 2 * taper
        return base.with_wells(wells)


def build_VJ(spec: HourglassSpec, r):
    """f''/f + sigma_J^2 (f^{-4/(d-1)} - 1) + V_W, pointwise."""
    r = np.asarray(r, float)
    f = spec.f(r)
    if np.any(f <= 0):
        raise GeometryError("profile must be positive")
    alpha = 4.0 / (spec.d - 1)
    return spec.f_d2(r) / f + spec.sigma**2 * (f ** (-alpha) - 1.0) + spec.V_W(r)


@dataclass
class CriterionReport:
    integral: float
    minimum: float
    threshold: float  # -sigma_J^2
    integral_ok: bool
    positivity_ok: bool
    nontrivial: bool

    @property
    def passed(self):
        return self.integral_ok and self.positivity_ok and self.nontrivial

    def to_dict(self):
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def _breaks(spec):
    pts = {-spec.R, spec.R}
    for ctr, half, _ in spec.wells:
        hw = spec.R / 2 if half is None else half
        pts.update({ctr - hw - spec.taper, ctr - hw, ctr + hw, ctr + hw + spec.taper})
    return sorted(p for p in pts if -spec.R <= p <= spec.R)


def embedded_criterion(spec: HourglassSpec) -> CriterionReport:
    """Integral of V_J <= 0 (and V_J not identically 0) gives a bound state
    of -d^2 + V_J; min V_J > -sigma_J^2 puts it above the bottom of the
    continuous spectrum of the full operator."""
    g = lambda r: float(build_VJ(spec, np.array([r]))[0])
    edges = _breaks(spec)
    total = sum(quad(g, a, b, limit=200, epsabs=1e-12)[0] for a, b in zip(edges[:-1], edges[1:]))
    r = np.linspace(-spec.R, spec.R, 40001)
    v = build_VJ(spec, r)
    vmin = float(np.min(v))
    nontrivial = bool(np.max(np.abs(v)) > 0)
    return CriterionReport(float(total), vmin, -spec.sigma**2, total <= 0 and nontrivial,
                           vmin > -spec.sigma**2, nontrivial)


@dataclass
class BoundState:
    lam: float
    vector: np.ndarray = field(repr=False)
    residual: float
    tail: float
    nodes: int  # sign changes


def find_bound_states(V, grid, residual_tol=1e-8, tail_tol=1e-6):
    """Negative eigenvalues of -d^2 + V on a uniform grid with Dirichlet ends.

    ``grid`` holds the interior nodes. Vectors are normalized in the
    discrete L^2 sense; ``residual`` is ||(A - lam) v|| / (|lam| ||v||) and
    ``tail`` the larger end value over the max. States failing either
    tolerance are dropped: the caller must widen the box.
    """
    grid = np.asarray(grid, float)
    V = np.asarray(V, float)
    dr = float(grid[1] - grid[0])
    if np.ptp(np.diff(grid)) > 1e-9 * dr:
        raise InputError("grid must be uniform")
    d = 2.0 / dr**2 + V
    e = np.full(grid.size - 1, -1.0 / dr**2)
    lo = float(np.min(V)) - 1.0
    if lo >= 0:
        return []
    try:
        w, vecs = eigh_tridiagonal(d, e, select="v", select_range=(lo, 0.0))
    except ValueError:
        return []
    out = []
    for k in range(w.size):
        v = vecs[:, k]
        v = v / math.sqrt(dr * np.sum(v * v))
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        Av = d * v
        Av[:-1] += e * v[1:]
        Av[1:] += e * v[:-1]
        res = float(np.linalg.norm(Av - w[k] * v) / (abs(w[k]) * np.linalg.norm(v)))
        tail = float(max(abs(v[0]), abs(v[-1])) / np.max(np.abs(v)))
        if res <= residual_tol and tail <= tail_tol:
            nodes = int(np.sum(np.diff(np.sign(v[np.abs(v) > 1e-12 * np.max(np.abs(v))])) != 0))
            out.append(BoundState(float(w[k]), v, res, tail, nodes))
    return out


def square_well_count(V0, a):
    """Bound states of -d^2 - V0 1_{|r|<a/2}: ceil(a sqrt(V0) / pi)."""
    return max(1, math.ceil(a * math.sqrt(V0) / math.pi))


@dataclass
class EmbeddedReport:
    spec_hash: str
    sigma: float
    criterion: dict
    energies: list
    lambdas: list
    residuals: list
    stability: list  # relative change under grid doubling
    multiplicity: int
    dr: float
    box: float
    embedded: list
    z0: float | None = None
    below_onset: bool | None = None
    findings: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.findings

    def to_dict(self):
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def _solve(spec, dr, box):
    n = int(round(2 * box / dr))
    grid = -box + (2 * box / n) * np.arange(1, n)
    return find_bound_states(build_VJ(spec, grid), grid)


def certify_embedded(spec: HourglassSpec, dr=0.005, box=None, z0=None, digits=4, max_escalations=3):
    """Certify E = lambda + sigma_J^2 for every bound state of -d^2 + V_J.

    The box [-box, box] grows until every state found has decayed below
    1e-6 at the ends; each E is recomputed on the grid with dr/2 and must
    agree to ``digits`` significant digits.
    """
    crit = embedded_criterion(spec)
    box = spec.R + 8.0 if box is None else box
    states = []
    for _ in range(max_escalations + 1):
        states = _solve(spec, dr, box)
        if states or not crit.passed:
            break
        box *= 2
        dr /= 2
    findings = []
    if crit.passed and not states:
        findings.append("criterion passed but no bound state found: refine the grid")
    fine = _solve(spec, dr / 2, box)
    s2 = spec.sigma**2
    energies = [st.lam + s2 for st in states]
    stab = []
    for st in states:
        match = min((abs(f.lam - st.lam) for f in fine), default=float("inf"))
        stab.append(match / abs(st.lam + s2) if st.lam + s2 != 0 else float("inf"))
    limit = 0.5 * 10.0 ** (1 - digits)
    for E, rel, st in zip(energies, stab, states):
        if rel > limit:
            findings.append(f"E = {E:.6g} changes by {rel:.2g} (relative) under grid doubling")
        if st.residual > 1e-8:
            findings.append(f"residual {st.residual:.2g} at E = {E:.6g}")
    embedded = [E > 0 for E in energies]
    rep = EmbeddedReport(spec.hash(), spec.sigma, crit.to_dict(), energies, [s.lam for s in states],
                         [s.residual for s in states], stab, spec.multiplicity, dr, box, embedded, z0,
                         None if z0 is None else all(E < z0 for E in energies), findings)
    return rep


def j_threshold(make_spec, Js):
    """Smallest J in Js for which make_spec(J) passes the criterion (None if none)."""
    for J in Js:
        if embedded_criterion(make_spec(J)).passed:
            return J
    return None
