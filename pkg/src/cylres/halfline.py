"""Finite-difference Schrödinger operators on the half line and the line.

The operator is ``-h^2 d^2/dr^2 + V`` discretized by the three-point stencil on
a uniform grid. Weighted resolvent norms are largest singular values of
``diag(w1) (A - z)^{-1} diag(w2)``; because both weights are diagonal the
sqrt(dr) quadrature factors cancel and the Euclidean matrix norm equals the
discrete L^2 operator norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import lapack
from scipy.sparse.linalg import LinearOperator, svds, ArpackNoConvergence

DENSE_MAX = 4000
RESIDUAL_TOL = 1e-10


class PoleSignal(ArithmeticError):
    """The shifted matrix is singular: z sits on a discrete eigenvalue."""

    def __init__(self, z):
        super().__init__(f"singular resolvent at z = {z}")
        self.z = z


class PreconditionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModeOperator:
    """Discretized -h^2 d^2 + V - iW on [r_min, r_max] with n nodes.

    The left end is a Dirichlet node. ``right`` is "dirichlet", "outgoing"
    (exact discrete transparent closure for the potential frozen at
    ``v_tail - i w_tail`` beyond r_max) or "absorbing" (Dirichlet wall behind
    a quadratic absorbing ramp folded into W). ``domain`` is a tag only:
    full-line problems are posed on [r_min, r_max] with r_min < 0.
    """

    h: float
    r_max: float
    n: int
    V: np.ndarray  # on the unknown nodes
    right: str = "dirichlet"
    v_tail: float = 0.0
    r_min: float = 0.0
    domain: str = "half-line"
    potential_fn: Callable | None = field(default=None, compare=False)
    W: np.ndarray | None = field(default=None, compare=False)
    w_tail: float = 0.0
    absorb_fn: Callable | None = field(default=None, compare=False)

    @property
    def dr(self):
        return (self.r_max - self.r_min) / (self.n - 1)

    @property
    def nodes(self):
        return self.r_min + self.dr * np.arange(self.n)

    @property
    def r(self):
        """Coordinates of the unknown nodes."""
        stop = self.n if self.right == "outgoing" else self.n - 1
        return self.nodes[1:stop]

    @property
    def size(self):
        return self.V.size

    def tail_root(self, z, side=1, rho=None):
        """Root lam of lam + 1/lam = 2 + (v_tail - i w_tail - z) dr^2/h^2.

        Without ``rho`` the decaying root is taken (the outgoing one on the
        circle, chosen by ``side``). With ``rho`` the root nearest
        exp(i rho dr/h) is taken, which continues the closure to the sheet
        on which the tail wavenumber is rho.
        """
        t = 2.0 + (self.v_tail - 1j * self.w_tail - z) * self.dr**2 / self.h**2
        disc = np.sqrt(complex(t * t - 4.0))
        lam = (t - disc) / 2.0
        if rho is not None:
            target = np.exp(1j * complex(rho) * self.dr / self.h)
            other = 1.0 / lam
            return lam if abs(lam - target) <= abs(other - target) else other
        if abs(lam) > 1:
            lam = 1.0 / lam
        if abs(abs(lam) - 1.0) < 1e-14 and np.sign(lam.imag) != np.sign(side):
            lam = lam.conjugate()
        return lam

    def bands(self, z, side=1, rho=None):
        """(sub, diag, super) diagonals of the shifted matrix A - iW - z."""
        c = self.h**2 / self.dr**2
        d = (2 * c + self.V - z).astype(complex)
        if self.W is not None:
            d = d - 1j * self.W
        if self.right == "outgoing":
            d[-1] -= c * self.tail_root(z, side, rho)
        off = np.full(self.size - 1, -c, dtype=complex)
        return off, d, off.copy()

    def matvec(self, u, z=0.0, side=1, rho=None):
        lo, d, up = self.bands(z, side, rho)
        out = d * u
        out[:-1] += up * u[1:]
        out[1:] += lo * u[:-1]
        return out

    def dense(self, z=0.0, side=1, rho=None):
        lo, d, up = self.bands(z, side, rho)
        return np.diag(d) + np.diag(up, 1) + np.diag(lo, -1)

    def regrid(self, r_max=None, n=None):
        """Same operator on a new grid; needs ``potential_fn``."""
        if self.potential_fn is None:
            raise PreconditionError("operator was built from an array; cannot regrid")
        return discretize(self.potential_fn, self.h, r_max or self.r_max, n or self.n,
                          right=self.right, r_min=self.r_min, domain=self.domain,
                          absorb=self.absorb_fn)


def discretize(potential, h, r_max, n, right="dirichlet", r_min=0.0, domain="half-line",
               v_tail=None, absorb=None, absorb_width=0.0, absorb_strength=0.0) -> ModeOperator:
    """Build a ModeOperator.

    ``potential`` is a callable of r or an array over all n nodes (boundary
    nodes included). ``absorb`` is an optional nonnegative callable W(r);
    the operator is then -h^2 d^2 + V - iW.
    """
    if n < 3:
        raise ValueError("need n >= 3 nodes")
    dr = (r_max - r_min) / (n - 1)
    if not dr > 0:
        raise ValueError("grid spacing must be positive")
    if right not in ("dirichlet", "outgoing", "absorbing"):
        raise ValueError(f"unknown boundary condition {right!r}")
    nodes = r_min + dr * np.arange(n)
    fn = potential if callable(potential) else None
    vals = np.asarray(potential(nodes) if fn else potential, dtype=float)
    if vals.shape != (n,):
        raise ValueError("potential array must have one value per node")
    if not np.all(np.isfinite(vals)):
        raise ValueError("potential must be finite on the grid")
    stop = n if right == "outgoing" else n - 1
    tail = float(vals[-1]) if v_tail is None else float(v_tail)
    W = None
    w_tail = 0.0
    if absorb is not None:
        wv = np.asarray(absorb(nodes), dtype=float)
        if np.any(wv < 0) or not np.all(np.isfinite(wv)):
            raise ValueError("absorbing potential must be finite and nonnegative")
        W, w_tail = wv[1:stop].copy(), float(wv[-1])
    if right == "absorbing" and absorb_width > 0:
        ramp = absorb_strength * np.clip((nodes - (r_max - absorb_width)) / absorb_width, 0, 1) ** 2
        W = ramp[1:stop] if W is None else W + ramp[1:stop]
    return ModeOperator(h=float(h), r_max=float(r_max), n=int(n), V=vals[1:stop].copy(),
                        right=right, v_tail=tail, r_min=float(r_min), domain=domain,
                        potential_fn=fn, W=W, w_tail=w_tail, absorb_fn=absorb)


# ---------------------------------------------------------------------------
# solves
# ---------------------------------------------------------------------------

class Factorization:
    """LU factors of A - z (LAPACK gttrf) with forward and adjoint solves."""

    def __init__(self, op: ModeOperator, z, side=1, rho=None):
        self.op, self.z, self.side = op, complex(z), side
        lo, d, up = op.bands(z, side, rho)
        self._lo, self._d, self._up = lo, d, up
        dl, dd, du, du2, ipiv, info = lapack.zgttrf(lo, d, up)
        if info != 0:
            raise PoleSignal(z)
        self._f = (dl, dd, du, du2, ipiv)
        if not np.all(np.isfinite(dd)) or np.min(np.abs(dd)) == 0:
            raise PoleSignal(z)

    def solve(self, b, trans="N"):
        b = np.asarray(b, dtype=complex)
        x, info = lapack.zgttrs(*self._f, b, trans=trans)
        if info != 0 or not np.all(np.isfinite(x)):
            raise PoleSignal(self.z)
        return x

    def solve_adjoint(self, b):
        return self.solve(b, trans="C")

    def residual(self, u, rhs):
        au = self._d * u
        au[:-1] += self._up * u[1:]
        au[1:] += self._lo * u[:-1]
        return np.linalg.norm(au - rhs) / max(np.linalg.norm(rhs), 1e-300)


def apply_resolvent(op: ModeOperator, z, rhs, side=1, check=True, rho=None):
    """Solve (A - z) u = rhs. Raises PoleSignal at a discrete eigenvalue."""
    rhs = np.asarray(rhs, dtype=complex)
    if not np.any(rhs):
        return np.zeros_like(rhs)
    fac = Factorization(op, z, side, rho)
    u = fac.solve(rhs)
    if check:
        res = fac.residual(u, rhs)
        if res > RESIDUAL_TOL:
            # one step of iterative refinement before giving up on accuracy
            au = op.matvec(u, z, side, rho)
            u = u + fac.solve(rhs - au)
            if fac.residual(u, rhs) > RESIDUAL_TOL:
                raise PoleSignal(z)
    return u


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Weight:
    """A nonnegative multiplication weight w(r) with a printable label."""

    fn: Callable
    label: str = "w"

    def __call__(self, r):
        return np.asarray(self.fn(np.asarray(r, dtype=float)), dtype=float)


def power_weight(s):
    """(1+r)^-s."""
    return Weight(lambda r: (1 + r) ** (-s), f"(1+r)^-{s:g}")


def potential_weight(V, a, s):
    """V(r)^a (1+r)^-s for a nonnegative potential V."""
    return Weight(lambda r: np.maximum(V(r), 0.0) ** a * (1 + r) ** (-s), f"V^{a:g}(1+r)^-{s:g}")


def indicator_weight(r0, r1):
    return Weight(lambda r: ((r >= r0) & (r <= r1)).astype(float), f"1[{r0:g},{r1:g}]")


def cutoff_weight(r0, r1, ramp=1.0):
    """Smooth cutoff equal to 1 on [r0, r1] and 0 outside [r0-ramp, r1+ramp]."""
    from .geometry import smooth_ramp

    def fn(r):
        up = smooth_ramp((r - (r0 - ramp)) / ramp) if ramp > 0 else (r >= r0)
        down = smooth_ramp(((r1 + ramp) - r) / ramp) if ramp > 0 else (r <= r1)
        return up * down

    return Weight(fn, f"chi[{r0:g},{r1:g}]")


def absolute_x_weight(w: Weight):
    """w(|r|) for full-line grids."""
    return Weight(lambda r: w(np.abs(r)), w.label)


@dataclass(frozen=True)
class WeightQuery:
    left: Weight
    right: Weight
    z: complex
    side: int = 1  # which boundary value when z is real

    def adjoint(self):
        return WeightQuery(self.right, self.left, complex(self.z).conjugate(), -self.side)


@dataclass
class NormResult:
    value: float
    truncation: float = float("nan")
    method: str = "dense"
    n: int = 0

    def __float__(self):
        return float(self.value)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def operator_norm(matvec, rmatvec, shape, dense=None, tol=1e-10, seed=0):
    """Largest singular value of a linear map given by its action.

    ARPACK Lanczos on the normal operator; ``dense`` (a callable returning
    the matrix) is the fallback when Lanczos does not converge or the map
    is too small for ARPACK.
    """
    m, n = shape
    if min(m, n) < 3:
        if dense is None:
            eye = np.eye(n, dtype=complex)
            mat = np.column_stack([matvec(eye[:, k]) for k in range(n)])
        else:
            mat = dense()
        return float(np.linalg.norm(mat, 2))
    lin = LinearOperator(shape, matvec=lambda x: matvec(np.asarray(x).ravel()),
                         rmatvec=lambda y: rmatvec(np.asarray(y).ravel()), dtype=complex)
    v0 = np.random.default_rng(seed).standard_normal(min(m, n)) + 0j
    try:
        s = svds(lin, k=1, which="LM", tol=tol, v0=v0, return_singular_vectors=False)
        return float(s[0])
    except ArpackNoConvergence:
        if dense is None:
            raise
        return float(np.linalg.norm(dense(), 2))


def _norm_on(op, query, method, dense_max, tol, rho=None):
    r = op.r
    w1 = query.left(r)
    w2 = query.right(r)
    rows = np.nonzero(w1)[0]
    cols = np.nonzero(w2)[0]
    if rows.size == 0 or cols.size == 0:
        return 0.0, "trivial"
    fac = Factorization(op, query.z, query.side, rho)
    if method == "auto":
        method = "dense" if max(rows.size, cols.size) <= dense_max else "lanczos"

    def dense():
        B = np.zeros((op.size, cols.size), dtype=complex)
        B[cols, np.arange(cols.size)] = w2[cols]
        X = fac.solve(B)
        return w1[rows, None] * X[rows]

    if method == "dense":
        return float(np.linalg.norm(dense(), 2)), "dense"
    w1r, w2c = w1[rows], w2[cols]

    def mv(x):
        b = np.zeros(op.size, dtype=complex)
        b[cols] = w2c * x
        return w1r * fac.solve(b)[rows]

    def rmv(y):
        b = np.zeros(op.size, dtype=complex)
        b[rows] = w1r * y
        return w2c * fac.solve_adjoint(b)[cols]

    return operator_norm(mv, rmv, (rows.size, cols.size), dense=dense, tol=tol), "lanczos"


def weighted_norm(op: ModeOperator, query: WeightQuery, method="auto", dense_max=DENSE_MAX,
                  truncation=True, tol=1e-10, rho=None) -> NormResult:
    """Largest singular value of W1 (A - z)^{-1} W2 on the grid.

    With ``truncation`` the computation is repeated with r_max doubled (same
    spacing) and the difference is reported as the truncation estimate; the
    value returned is the one on the longer grid.
    """
    val, used = _norm_on(op, query, method, dense_max, tol, rho)
    res = NormResult(val, method=used, n=op.size)
    if truncation and op.potential_fn is not None:
        big = op.regrid(r_max=op.r_min + 2 * (op.r_max - op.r_min), n=2 * (op.n - 1) + 1)
        val2, used2 = _norm_on(big, query, method, dense_max, tol, rho)
        res = NormResult(val2, truncation=abs(val2 - val), method=used2, n=big.size)
    return res


def grid_size(h, z, r_max, vmax=0.0, dr_max=0.02, ppw=0.25):
    """Node count resolving the local wavenumber sqrt(max(|z|, ...))/h.

    The potential only enters through ``vmax`` capped at 4 max(|z|, 1):
    deep inside a tall barrier the solution is exponentially small and
    coarser sampling does not change the norm at the reported tolerances.
    """
    k = math.sqrt(max(abs(z), min(vmax, 4 * max(abs(z), 1.0)), 1e-12)) / h
    dr = min(dr_max, ppw / k)
    return int(math.ceil(r_max / dr)) + 1


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class BoundReport:
    """Computed norms against a bound: one record per evaluation."""

    name: str
    records: list = field(default_factory=list)
    tol: float = 0.02
    fits: dict = field(default_factory=dict)
    findings: list = field(default_factory=list)

    @property
    def worst(self):
        rated = [r for r in self.records if "ratio" in r]
        return max(rated, key=lambda r: r["ratio"]) if rated else None

    @property
    def worst_ratio(self):
        w = self.worst
        return w["ratio"] if w else float("nan")

    @property
    def passed(self):
        return not self.findings

    def to_dict(self):
        return {"name": self.name, "tol": self.tol, "worst_ratio": self.worst_ratio,
                "passed": self.passed, "fits": self.fits, "findings": list(self.findings),
                "records": [_jsonable(r) for r in self.records]}

    def csv_rows(self):
        keys = sorted({k for r in self.records for k in r})
        rows = [keys]
        for r in self.records:
            rows.append([_fmt(r.get(k, "")) for k in keys])
        return rows


def _jsonable(rec):
    out = {}
    for k, v in rec.items():
        if isinstance(v, complex):
            out[k] = [v.real, v.imag]
        elif isinstance(v, np.generic):
            out[k] = v.item()
        else:
            out[k] = v
    return out


def _fmt(v):
    if isinstance(v, complex):
        return f"{v.real:.12g}{v.imag:+.12g}j"
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def loglog_fit(x, y):
    """Slope, intercept and R^2 of log y against log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return float(slope), float(icpt), float(r2)


# ---------------------------------------------------------------------------
# explicit-constant bounds on -d^2 + V_D
# ---------------------------------------------------------------------------

SQ2 = math.sqrt(2.0)


def pdbig_rhs(z, delta, deltaV):
    return (1 + SQ2) / math.sqrt(abs(z)) * (1 / delta + 1 / deltaV)


def pdsmall_rhs(delta, deltaV):
    return (1 + SQ2) * (1 / delta + 1 / deltaV)


def pdvbound_rhs(delta, deltaV):
    return 2 * SQ2 / deltaV * math.sqrt(1 + deltaV / delta)


def pdsmall_weights(delta, theta):
    s0 = (1 + delta) / 2
    return power_weight(s0 + theta), power_weight(s0 + 1 - theta)


def pdvbound_weights(V, delta, theta):
    left = potential_weight(V, theta / 2, (1 + (1 - theta) * delta) / 2)
    right = potential_weight(V, (1 - theta) / 2, (1 + theta * delta) / 2)
    return left, right


def explicit_zset(count=200, zmin=1e-2, zmax=1e2, eps=1e-6):
    """Spectral parameters with |z| log-spaced in [zmin, zmax].

    Each magnitude is used at five positions: just above and just below the
    positive axis (distance eps), on the rays at angles pi/2 and 3pi/4, and
    on the negative axis.
    """
    per = 5
    mags = np.geomspace(zmin, zmax, int(math.ceil(count / per)))
    out = []
    for a in mags:
        out += [a + 1j * eps, a - 1j * eps, 1j * a, a * np.exp(0.75j * np.pi), -a + 0j]
    return [complex(z) for z in out]


def check_explicit_bounds(potential, delta, zs, thetas=(0.0, 0.5, 1.0), kinds=("pdbig", "pdsmall", "pdvbound"),
                    r_max=30.0, tol=0.02, method="lanczos", truncation=True):
    """Weighted resolvent norms of -d^2 + V_D against the explicit constants.

    Returns one BoundReport per kind. A record violates the bound when its
    ratio exceeds 1 + tol even after subtracting the truncation estimate;
    a ratio above 1 + tol that the truncation estimate can explain is kept
    as a finding of its own kind.
    """
    dV = float(potential.deltaV)
    vmax = float(potential(np.array([0.0]))[0])
    reports = {k: BoundReport(k, tol=tol) for k in kinds}
    for z in zs:
        z = complex(z)
        n = grid_size(1.0, z, r_max, vmax)
        op = discretize(potential, 1.0, r_max, n, right="outgoing")
        jobs = []
        if "pdbig" in kinds:
            w = power_weight((1 + delta) / 2)
            jobs.append(("pdbig", None, w, w, pdbig_rhs(z, delta, dV)))
        if "pdsmall" in kinds:
            for th in thetas:
                a, b = pdsmall_weights(delta, th)
                jobs.append(("pdsmall", th, a, b, pdsmall_rhs(delta, dV)))
        if "pdvbound" in kinds:
            for th in thetas:
                a, b = pdvbound_weights(potential, delta, th)
                jobs.append(("pdvbound", th, a, b, pdvbound_rhs(delta, dV)))
        for kind, th, a, b, rhs in jobs:
            res = weighted_norm(op, WeightQuery(a, b, z), method=method, truncation=truncation)
            ratio = res.value / rhs
            rec = {"potential": potential.label, "z": z, "theta": th, "delta": delta,
                   "norm": res.value, "rhs": rhs, "ratio": ratio, "margin": 1 - ratio,
                   "truncation": res.truncation, "n": res.n}
            rep = reports[kind]
            rep.records.append(rec)
            if ratio > 1 + tol:
                corrected = (res.value - (res.truncation if np.isfinite(res.truncation) else 0)) / rhs
                tag = "violation" if corrected > 1 + tol else "truncation-limited"
                rep.findings.append(f"{tag}: {kind} theta={th} z={z:.3g} ratio={ratio:.4f}")
    return reports


def check_pdbig(potential, delta, zs, **kw):
    return check_explicit_bounds(potential, delta, zs, kinds=("pdbig",), **kw)["pdbig"]


def check_pdsmall(potential, delta, zs, thetas=(0.0, 0.5, 1.0), **kw):
    return check_explicit_bounds(potential, delta, zs, thetas=thetas, kinds=("pdsmall",), **kw)["pdsmall"]


def check_pdvbound(potential, delta, zs, thetas=(0.0, 0.5, 1.0), **kw):
    return check_explicit_bounds(potential, delta, zs, thetas=thetas, kinds=("pdvbound",), **kw)["pdvbound"]


# ---------------------------------------------------------------------------
# semiclassical scaling
# ---------------------------------------------------------------------------

def semiclassical_norm(potential, h, zeta, left: Weight, right: Weight, r_max=60.0, rescaled=False,
                       method="lanczos"):
    """‖left (-h^2 d^2 + V - zeta)^{-1} right‖.

    With ``rescaled`` the norm is computed as h^-2 times the norm for
    -d^2 + V/h^2 - zeta/h^2; both routes share one grid.
    """
    vmax = float(potential(np.array([0.0]))[0])
    n = grid_size(h, zeta, r_max, vmax)
    if rescaled:
        op = discretize(lambda r: potential(r) / h**2, 1.0, r_max, n, right="outgoing")
        return weighted_norm(op, WeightQuery(left, right, zeta / h**2), method=method,
                             truncation=False).value / h**2
    op = discretize(potential, h, r_max, n, right="outgoing")
    return weighted_norm(op, WeightQuery(left, right, zeta), method=method, truncation=False).value


def semiclassical_zetas(count=19, zmin=1e-5, zmax=10.0, eps=1e-6):
    mags = np.geomspace(zmin, zmax, count)
    out = []
    for a in mags:
        out += [a + 1j * eps, 1j * a, -a + 0j]
    return [complex(z) for z in out]


SEMICLASSICAL_EXPONENTS = {"pdbigh": -1.0, "pdsmallh": -2.0, "pdvboundh": -1.0}


def check_semiclassical(potential, hs, zetas, kinds=("pdbigh", "pdsmallh", "pdvboundh"), s=1.0,
                        s1=1.5, s2=1.5, r_max=60.0, exp_tol=0.15, stability=2.0):
    """Fit the h-exponents of the three semiclassical bounds.

    For each h the ζ-uniform constant is the sup over ``zetas`` of the norm
    times the ζ-dependence of the bound (sqrt|ζ| for pdbigh, 1 otherwise).
    Findings are raised when a fitted exponent leaves ±exp_tol around the
    bound's exponent or when C(h) = sup * h^(-p) varies by more than
    ``stability`` across the sweep.
    """
    rep = BoundReport("semiclassical", tol=exp_tol)
    for kind in kinds:
        if kind == "pdbigh":
            left = right = power_weight(s)
        elif kind == "pdsmallh":
            left, right = power_weight(s1), power_weight(s2)
        elif kind == "pdvboundh":
            left, right = potential_weight(potential, 0.5, 0.5), power_weight(s)
        else:
            raise ValueError(f"unknown bound {kind!r}")
        sups = []
        for h in hs:
            best, at = 0.0, None
            for zeta in zetas:
                v = semiclassical_norm(potential, h, zeta, left, right, r_max)
                if kind == "pdbigh":
                    v *= math.sqrt(abs(zeta))
                if v > best:
                    best, at = v, zeta
            sups.append(best)
            p = SEMICLASSICAL_EXPONENTS[kind]
            rep.records.append({"kind": kind, "h": h, "sup": best, "argmax_zeta": at,
                                "C": best * h ** (-p)})
        p = SEMICLASSICAL_EXPONENTS[kind]
        slope, _, r2 = loglog_fit(hs, sups)
        cs = np.array(sups) * np.asarray(hs, float) ** (-p)
        variation = float(cs.max() / cs.min())
        rep.fits[kind] = {"exponent": slope, "expected": p, "r2": r2, "C_variation": variation,
                          "C_max": float(cs.max())}
        if abs(slope - p) > exp_tol:
            rep.findings.append(f"scaling: {kind} exponent {slope:.3f} vs {p}")
        if variation > stability:
            rep.findings.append(f"scaling: {kind} constant varies by {variation:.2f}x")
    return rep


# ---------------------------------------------------------------------------
# mode-level probes (Agmon decay, propagation, mode estimates)
# ---------------------------------------------------------------------------

def smooth_step(x0, width):
    """Entire step 0 -> 1 centred at x0: (1 + erf((r - x0)/width)) / 2.

    Its Fourier transform decays like a Gaussian, so multiplying by it moves
    semiclassical frequencies by at most O(h/width) up to O(h^inf).
    """
    from scipy.special import erf
    return lambda r: 0.5 * (1 + erf((np.asarray(r, float) - x0) / width))


def cinf_step(x):
    """C-infinity step: 0 for x <= 0, 1 for x >= 1."""
    x = np.asarray(x, float)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def window_weight(a, b, width, label=None):
    up, down = smooth_step(a, width), smooth_step(b, width)
    return Weight(lambda r: up(r) * (1 - down(r)), label or f"win[{a:g},{b:g}]")


def band_mask(k, lo, hi):
    """1 on [lo, hi], a C^2 quintic transition of width 10% of the band
    outside it, 0 beyond."""
    from .geometry import smooth_ramp
    w = 0.1 * (hi - lo)
    return smooth_ramp((k - (lo - w)) / w) * smooth_ramp(((hi + w) - k) / w)


def mode_potential(config, h, j):
    from .geometry import effective_potential
    return lambda r: effective_potential(config, h, j, np.asarray(r, float))


@dataclass
class DecayFit:
    hs: list
    disjoint: list
    overlap: list
    slope: float
    intercept: float
    r2: float
    overlap_variation: float
    modes: list

    def to_dict(self):
        return {k: getattr(self, k) for k in ("hs", "disjoint", "overlap", "slope", "intercept",
                                               "r2", "overlap_variation", "modes")}


def _mode_for_energy(config, h, target):
    """Index of the distinct transverse value whose E_j is closest to target."""
    sig = config.spectrum.values
    E = config.E0 - h * h * sig**2
    return int(np.argmin(np.abs(E - target)))


def agmon_probe(config, hs, minus=(1.0, 1.8), plus=(2.2, 3.0), s=1.0, eps=1e-6, energy=0.0,
                r_max=20.0, ppw=0.2):
    """Exponential smallness between forbidden-region cutoffs.

    For each h the mode whose E_j is nearest ``energy`` is used (E_j <= E_*
    is required). Returns log-norms of chi_- R chi_+ against 1/h and the
    overlap norms of chi_- R (1+r)^-s.
    """
    from .geometry import estar_threshold
    # compact cutoffs: their supports are disjoint, so the only coupling is
    # through the resolvent
    ramp = 0.25 * min(minus[1] - minus[0], plus[1] - plus[0])
    chim = cutoff_weight(minus[0] + ramp, minus[1] - ramp, ramp)
    chip = cutoff_weight(plus[0] + ramp, plus[1] - ramp, ramp)
    dis, ovl, modes = [], [], []
    for h in hs:
        j = _mode_for_energy(config, h, energy)
        Ej = config.E0 - h * h * config.spectrum.values[j] ** 2
        es = estar_threshold(config, h)
        if Ej > es:
            raise PreconditionError(f"E_j = {Ej:.4g} exceeds E_* = {es:.4g} at h = {h}")
        n = int(math.ceil(r_max / min(0.02, ppw * h))) + 1
        op = discretize(mode_potential(config, h, j), h, r_max, n, right="outgoing")
        z = Ej + 1j * eps
        dis.append(weighted_norm(op, WeightQuery(chim, chip, z), method="lanczos", truncation=False).value)
        ovl.append(weighted_norm(op, WeightQuery(chim, power_weight(s), z), method="lanczos",
                                 truncation=False).value)
        modes.append(j)
    inv = 1.0 / np.asarray(hs, float)
    ld = np.log(dis)
    slope, icpt = np.polyfit(inv, ld, 1)
    resid = ld - (slope * inv + icpt)
    r2 = 1 - np.sum(resid**2) / np.sum((ld - ld.mean()) ** 2)
    return DecayFit(list(map(float, hs)), dis, ovl, float(slope), float(icpt), float(r2),
                    float(max(ovl) / min(ovl)), modes)


def microlocal_probe(config, h, j=None, minus=(0.5, 2.0), plus=(5.5, 9.5), band=(0.5, 1.5),
                     incoming=False, eps=1e-6, left=3.0, r_max=15.0, ppw=0.1, width=0.5):
    """‖chi_- (P_j - E_j - i eps)^{-1} chi_+ psi(hD)‖ on the line.

    P_j = h^2 D^2 + chi_0 V_j - i W_e with W_e = 1 on r <= 1 falling to 0
    at r = 2 and chi_0 switching V_j on over [0, 1]. ``band`` is in units
    of sqrt(E_j); the mask is applied by FFT on a grid zero-padded to twice
    its length. ``incoming`` negates the band.

    chi_- is a compact quintic window on ``minus`` (ramps of 0.5). chi_+ has
    erf edges of ``width`` at the ends of ``plus`` (Gaussian frequency
    spread) times a C-infinity ramp on [3, 4], so it vanishes on (0, 3].
    """
    from .geometry import smooth_ramp
    if band[0] <= 0 or band[1] <= band[0]:
        raise PreconditionError("band must be a positive interval away from 0")
    sig = config.spectrum.values
    if j is None:
        j = _mode_for_energy(config, h, config.E0)
    Ej = config.E0 - h * h * sig[j] ** 2
    if Ej <= 0:
        raise PreconditionError("propagation probe needs E_j > 0")
    Vj = mode_potential(config, h, j)

    def pot(r):
        r = np.asarray(r, float)
        return smooth_ramp(r) * Vj(np.maximum(r, 0.0))

    def We(r):
        return smooth_ramp(2.0 - np.asarray(r, float))

    dr = ppw * h / math.sqrt(max(Ej, 1e-12))
    n = int(math.ceil((r_max + left) / dr)) + 1
    op = discretize(pot, h, r_max, n, right="outgoing", r_min=-left, domain="full-line", absorb=We)
    r = op.r
    wm = cutoff_weight(minus[0], minus[1], 0.5)(r) * (r > 0)
    wp = (cinf_step(r - 3.0) * smooth_step(plus[0], width)(r)
          * (1 - smooth_step(plus[1], width)(r)))
    N = r.size
    M = 2 * N
    k = 2 * np.pi * np.fft.fftfreq(M, d=op.dr) * h / math.sqrt(Ej)
    mask = band_mask(-k if incoming else k, *band)
    fac = Factorization(op, Ej + 1j * eps)

    def psi(x):
        buf = np.zeros(M, dtype=complex)
        buf[:N] = x
        return np.fft.ifft(mask * np.fft.fft(buf))[:N]

    def mv(x):
        return wm * fac.solve(wp * psi(x))

    def rmv(y):
        return psi(wp * fac.solve_adjoint(wm * y))

    return operator_norm(mv, rmv, (N, N), tol=1e-8)


def microlocal_sweep(config, hs, **kw):
    """Outgoing and incoming band norms over an h sweep with log-log fits."""
    out = {"hs": list(map(float, hs)), "outgoing": [], "incoming": []}
    for h in hs:
        out["outgoing"].append(microlocal_probe(config, h, **kw))
        out["incoming"].append(microlocal_probe(config, h, incoming=True, **kw))
    out["outgoing_exponent"] = loglog_fit(hs, out["outgoing"])[0]
    out["incoming_exponent"] = loglog_fit(hs, out["incoming"])[0]
    return out


def check_mode_estimates(config, hs, s=1.0, eps=1e-6, per_class=10, r_max=20.0, ppw=0.2, exp_tol=0.3):
    """Worst-mode h-exponents of the three mode estimates.

    Below E_*: ‖(1+r)^-s R_j (1+r)^-s‖ (expected h^-2) and
    ‖chi R_j (1+r)^-s‖ with chi = sqrt(V_L + f^{-a} - 1) (expected h^-1),
    on the half line. Above E_*: the full-line operator of
    ``microlocal_probe`` with weights (1+r_+)^-s (expected h^-1).

    Each class is sampled through its ``per_class`` modes nearest E = 0.
    The worst mode of the lower class sits either at threshold or at the
    class boundary E_j = E_*, and a fixed h rarely has a mode at the
    boundary, so the lower class is also sampled at a companion
    h~ = sqrt(E_0 - E_*)/sigma placing one mode exactly at E_*
    (h~/h - 1 = O(E_*/E_0)). The class sup at h is the max over both.
    """
    from .geometry import estar_threshold
    prof = config.profile
    alpha = config.warp_exponent
    VL = config.V_L or (lambda r: np.zeros_like(np.asarray(r, float)))

    def chi(r):
        return np.sqrt(np.maximum(VL(r) + prof(r) ** (-alpha) - 1.0, 0.0))

    chiw = Weight(chi, "sqrt(V_L+f^-a-1)")
    pw = power_weight(s)
    pw_plus = Weight(lambda r: (1 + np.maximum(r, 0.0)) ** (-s), f"(1+r_+)^-{s:g}")
    rep = BoundReport("mode-estimates", tol=exp_tol)
    sig = np.array([v for v, _ in config.spectrum.distinct()])
    worst = {"below_weighted": [], "below_cutoff": [], "above_line": []}
    for h in hs:
        es = estar_threshold(config, h)
        best = {k: 0.0 for k in worst}
        k_edge = sig[np.argmin(np.abs(sig - math.sqrt(config.E0 - es) / h))]
        companions = [h]
        if k_edge > 0:
            companions.append(math.sqrt(config.E0 - es) / k_edge)
        for hh in companions:
            E = config.E0 - hh * hh * sig**2
            below = np.nonzero(E <= es * (1 + 1e-12))[0]
            below = below[np.argsort(np.abs(E[below]))][:per_class]
            n = int(math.ceil(r_max / min(0.02, ppw * hh))) + 1
            for idx in below:
                op = discretize(_distinct_mode_potential(config, hh, sig[idx]), hh, r_max, n, right="outgoing")
                z = E[idx] + 1j * eps
                a = weighted_norm(op, WeightQuery(pw, pw, z), method="lanczos", truncation=False).value
                b = weighted_norm(op, WeightQuery(chiw, pw, z), method="lanczos", truncation=False).value
                best["below_weighted"] = max(best["below_weighted"], a)
                best["below_cutoff"] = max(best["below_cutoff"], b)
                rep.records.append({"h": h, "h_eval": hh, "sigma": float(sig[idx]), "E_j": float(E[idx]),
                                    "class": "below", "below_weighted": a, "below_cutoff": b})
        E = config.E0 - h * h * sig**2
        above = np.nonzero(E > es)[0]
        above = above[np.argsort(np.abs(E[above]))][:per_class]
        for idx in above:
            Ej = float(E[idx])
            op = _absorbed_line_operator(_distinct_mode_potential(config, h, sig[idx]), h, Ej, r_max, ppw)
            c = weighted_norm(op, WeightQuery(pw_plus, pw_plus, Ej + 1j * eps), method="lanczos",
                              truncation=False).value
            best["above_line"] = max(best["above_line"], c)
            rep.records.append({"h": h, "h_eval": h, "sigma": float(sig[idx]), "E_j": Ej, "class": "above",
                                "above_line": c})
        for k in worst:
            worst[k].append(best[k])
    expected = {"below_weighted": -2.0, "below_cutoff": -1.0, "above_line": -1.0}
    for k, vals in worst.items():
        if min(vals) <= 0:
            rep.findings.append(f"empty class for {k}")
            continue
        slope, _, r2 = loglog_fit(hs, vals)
        rep.fits[k] = {"exponent": slope, "expected": expected[k], "r2": r2, "worst": vals}
        if abs(slope - expected[k]) > exp_tol:
            rep.findings.append(f"scaling: {k} exponent {slope:.3f} vs {expected[k]}")
    return rep


def _absorbed_line_operator(Vj, h, Ej, r_max=20.0, ppw=0.2, left=3.0):
    """h^2 D^2 + chi_0 V_j - i W_e on [-left, r_max], outgoing on the right."""
    from .geometry import smooth_ramp

    def pot(r):
        r = np.asarray(r, float)
        return smooth_ramp(r) * Vj(np.maximum(r, 0.0))

    dr = min(0.02, ppw * h / math.sqrt(max(Ej, 1e-3)))
    m = int(math.ceil((r_max + left) / dr)) + 1
    return discretize(pot, h, r_max, m, right="outgoing", r_min=-left, domain="full-line",
                      absorb=lambda r: smooth_ramp(2.0 - np.asarray(r, float)))


def _distinct_mode_potential(config, h, sigma):
    """V_j for a transverse value sigma (no index lookup)."""
    prof = config.profile
    alpha = config.warp_exponent

    def V(r):
        r = np.asarray(r, float)
        f = prof(r)
        return config.potential(r, h) + h**2 * prof.derivative(r, 2) / f + h**2 * sigma**2 * (f ** (-alpha) - 1)

    return V
