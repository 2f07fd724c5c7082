"""Continuation of the resolvent across thresholds.

The spectral parameter lives on a surface on which every mode wavenumber
rho_j(z) = sqrt(z - h^2 sigma_j^2) is single valued. A point is stored as its
base value z plus the finite set of modes whose branch is the non-physical
one. Resonances of a half-cylinder whose end is exactly cylindrical beyond
r = 6 are found mode by mode as zeros of an outgoing matching function.
"""
from __future__ import annotations

import bisect
import math
import pickle
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp

from .geometry import InputError, ManifoldConfig
from .halfline import (BoundReport, Factorization, PreconditionError, Weight, WeightQuery, apply_resolvent, cinf_step,
                       discretize, loglog_fit, operator_norm, weighted_norm)

R_CUT = 6.0
MAX_LOSS = 20.0


class ThresholdWarning(UserWarning):
    """A kernel was evaluated at a ramification point (xi = 0)."""


class IntegrationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# points of the continuation surface
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RiemannPoint:
    """base value z, flip set S, semiclassical h; ``side`` tags E +- i0 when z is real."""

    base: complex
    h: float
    flipped: frozenset = frozenset()
    side: int = 0

    def __post_init__(self):
        object.__setattr__(self, "base", complex(self.base))
        object.__setattr__(self, "flipped", frozenset(int(j) for j in self.flipped))
        if not self.h > 0:
            raise InputError("h must be positive")
        if self.side not in (-1, 0, 1):
            raise InputError("side must be -1, 0 or +1")

    def to_dict(self):
        return {"base": [self.base.real, self.base.imag], "h": self.h,
                "flipped": sorted(self.flipped), "side": self.side}


def boundary_point(E, h, side=1):
    """E + i0 (side=+1) or E - i0 (side=-1) on the physical sheet."""
    return RiemannPoint(complex(E), h, frozenset(), side)


def physical_rho(w, side=0):
    """Branch of sqrt(w) with Im > 0 off [0, inf); on the cut, +-sqrt(w) by side."""
    w = complex(w)
    if w.imag == 0.0:
        if w.real > 0:
            return complex(-math.sqrt(w.real) if side < 0 else math.sqrt(w.real))
        return 1j * math.sqrt(-w.real)
    return 1j * np.sqrt(-w)


def rho(point: RiemannPoint, j, sigmas):
    """rho_j at ``point``; sigmas lists the distinct transverse values."""
    t = point.h**2 * float(sigmas[j]) ** 2
    w = point.base - t
    if w == 0:
        return 0j
    val = physical_rho(w, point.side)
    return -val if j in point.flipped else val


def base_value(point: RiemannPoint):
    """The projection p(point) to the complex plane."""
    return point.base


def transport(point: RiemannPoint, z_new, sigmas):
    """Move ``point`` along the straight segment to z_new.

    Each mode whose cut [h^2 sigma_j^2, inf) is crossed changes branch. A
    start on the real axis counts as lying on the side given by its tag.
    """
    z0, z1 = point.base, complex(z_new)
    s0 = np.sign(z0.imag) if z0.imag != 0 else (point.side or 1)
    s1 = np.sign(z1.imag)
    flipped = set(point.flipped)
    side = 0
    if s1 == 0:
        side = int(s0)  # approached from that half-plane
    elif s0 != s1:
        if z0.imag == 0:
            x = z0.real
        else:
            x = z0.real + (z1.real - z0.real) * z0.imag / (z0.imag - z1.imag)
        ts = point.h**2 * np.asarray(sigmas, float) ** 2
        for j in np.nonzero(ts < x)[0]:
            flipped ^= {int(j)}
    return RiemannPoint(z1, point.h, frozenset(flipped), side)


@dataclass(frozen=True)
class Distance:
    value: float  # sup over the enumerated modes
    tail: float  # bound on every mode beyond the list

    @property
    def bound(self):
        return max(self.value, self.tail)


def dh_metric(p: RiemannPoint, q: RiemannPoint, sigmas) -> Distance:
    """sup_j |rho_j(p) - rho_j(q)| over the listed modes, with a tail bound."""
    if p.h != q.h:
        raise InputError("points live on surfaces with different h")
    sig = np.asarray(sigmas, float)
    vals = [abs(rho(p, j, sig) - rho(q, j, sig)) for j in range(sig.size)]
    value = max(vals) if vals else 0.0
    dz = abs(p.base - q.base)
    t = p.h**2 * sig[-1] ** 2 if sig.size else -np.inf
    beyond = [j for j in p.flipped | q.flipped if j >= sig.size]
    if not beyond and t > max(p.base.real, q.base.real):
        tail = dz / (math.sqrt(t - p.base.real) + math.sqrt(t - q.base.real))
    else:
        tail = math.sqrt(dz)
    return Distance(float(value), float(tail))


# ---------------------------------------------------------------------------
# |p(z) - E| against d_h(z, E +- i0)
# ---------------------------------------------------------------------------

def circle_sigmas(E, h, L=2 * math.pi, extra=10):
    """Distinct circle values 2 pi k / L covering energies well past E."""
    kmax = int(math.ceil(2 * math.sqrt(E) / h * L / (2 * math.pi))) + extra
    return 2 * math.pi * np.arange(kmax + 1) / L


@dataclass
class ProjdiffReport:
    h: float
    E: float
    inequality_ok: bool
    worst_excess: float
    K: float
    weyl_ok: bool
    j0: int
    rho_j0_sq: float
    weyl_bound: float
    samples: int

    def to_dict(self):
        return dict(self.__dict__)


def boundary_samples(E, h, sigmas, side=1, radii=None, angles=8):
    """Points near E +- i0: physical ones and their continuations across the axis."""
    radii = np.logspace(-10, -2, 9) if radii is None else radii
    start = boundary_point(E, h, side)
    pts = []
    for a in radii:
        for th in 2 * math.pi * (np.arange(angles) + 0.5) / angles:
            pts.append(transport(start, E + a * np.exp(1j * th), sigmas))
    return pts


def projdiff_check(points, E, h, sigmas, delta=0.05, side=1) -> ProjdiffReport:
    """|p(z) - E| <= d (d + K h^{1/2 - delta}) with d = d_h(z, E +- i0).

    Per point, |p - E| = |rho_j(z) - rho_j(E)| |rho_j(z) + rho_j(E)| for
    every j, so the inequality holds with K h^{1/2-delta} = 2 min_j
    |rho_j(E)|; K reported is the sup of (|p-E|/d - d)/h^{1/2-delta}.
    The Weyl condition asks for some sigma_j^2 within h^{-1-2 delta} of
    E/h^2, which forces |rho_j0(E)|^2 <= h^{1-2 delta}.
    """
    sig = np.asarray(sigmas, float)
    ref = boundary_point(E, h, side)
    rhoE = np.array([rho(ref, j, sig) for j in range(sig.size)])
    m = float(np.min(np.abs(rhoE)))
    ok, worst, K = True, 0.0, 0.0
    for p in points:
        d = dh_metric(p, ref, sig).value
        lhs = abs(p.base - E)
        rhs = d * (d + 2 * m)
        excess = lhs - rhs
        worst = max(worst, excess / max(lhs, 1e-300))
        if excess > 1e-9 * max(lhs, 1e-300) + 1e-15:
            ok = False
        if d > 0:
            K = max(K, (lhs / d - d) / h ** (0.5 - delta))
    win = h ** (-1 - 2 * delta)
    gaps = np.abs(sig**2 - E / h**2)
    j0 = int(np.argmin(gaps))
    weyl_ok = bool(gaps[j0] <= win)
    return ProjdiffReport(h, E, ok, float(worst), float(K), weyl_ok, j0, float(abs(rhoE[j0]) ** 2),
                          h ** (1 - 2 * delta), len(points))


def growth_ratio(hs, values):
    """max_h C(h) over the calibration value max{C(h) : h in the larger-h half}."""
    order = np.argsort(hs)[::-1]
    vals = np.asarray(values, float)[order]
    cal = float(np.max(vals[: max(1, len(vals) // 2)]))
    return float(np.max(vals) / cal) if cal > 0 else float("inf")


def projdiff_sweep(E=1.0, hs=None, delta=0.05, L=2 * math.pi, stability=2.0) -> BoundReport:
    hs = list(np.logspace(math.log10(0.02), math.log10(0.1), 6)) if hs is None else list(hs)
    rep = BoundReport("projdiff", tol=stability)
    Ks = []
    for h in hs:
        sig = circle_sigmas(E, h, L)
        for side in (1, -1):
            pr = projdiff_check(boundary_samples(E, h, sig, side), E, h, sig, delta, side)
            rec = pr.to_dict()
            rec["side"] = side
            rep.records.append(rec)
            if not pr.inequality_ok:
                rep.findings.append(f"violation at h={h:.4g}, side={side}")
            if not pr.weyl_ok:
                rep.findings.append(f"precondition unmet (spectral gap) at h={h:.4g}")
            elif pr.rho_j0_sq > pr.weyl_bound * (1 + 1e-12):
                rep.findings.append(f"|rho_j0|^2 above h^(1-2delta) at h={h:.4g}")
        Ks.append(max(r["K"] for r in rep.records[-2:]))
    g = growth_ratio(hs, Ks)
    positive = [k for k in Ks if k > 0]
    rep.fits = {"hs": hs, "K": Ks, "growth": g,
                "variation": max(positive) / min(positive) if positive else float("nan")}
    if g > stability:
        rep.findings.append(f"fitted constant grows by {g:.3g} as h decreases")
    return rep


# ---------------------------------------------------------------------------
# model kernel on the half line
# ---------------------------------------------------------------------------

def model_kernel(xi, r, rp, h, alpha=(0, 0)):
    """Schwartz kernel of (-h^2 d^2 - xi^2)^{-1} on [0, inf) with Dirichlet at 0.

    (i/2h xi)(exp(i xi|r-r'|/h) - exp(i xi(r+r')/h)). ``alpha`` gives kernels
    of (hD)^a1 R (hD)^a2 with the identity parts dropped; the second-order
    ones use (hD)^2 R = R (hD)^2 = 1 + xi^2 R on the Dirichlet domain.
    """
    xi = complex(xi)
    r, rp = np.broadcast_arrays(np.asarray(r, float), np.asarray(rp, float))
    a1, a2 = alpha
    if a1 + a2 > 2 or min(a1, a2) < 0:
        raise InputError("derivative orders must satisfy a1 + a2 <= 2")
    if a1 == 2 or a2 == 2:
        return xi**2 * model_kernel(xi, r, rp, h)
    a, b = np.abs(r - rp), r + rp
    e1, e2 = np.exp(1j * xi * a / h), np.exp(1j * xi * b / h)
    sg = np.sign(r - rp)
    if (a1, a2) == (1, 0):
        return 0.5j / h * (sg * e1 - e2)
    if (a1, a2) == (0, 1):
        return 0.5j / h * (sg * e1 + e2)
    if (a1, a2) == (1, 1):
        return 0.5j * xi / h * (e1 + e2)
    if xi == 0:
        warnings.warn("model kernel evaluated at the threshold xi = 0", ThresholdWarning, stacklevel=2)
    small = abs(xi) * np.max(b, initial=0.0) / h < 0.5
    if small:
        return _kernel_series(xi, a, b, h)
    return 0.5j / (h * xi) * (e1 - e2)


def _kernel_series(xi, a, b, h, terms=30):
    # -(1/2h^2) sum_{n>=1} (i xi/h)^{n-1} (a^n - b^n)/n!
    out = np.zeros(np.broadcast(a, b).shape, dtype=complex)
    q = 1j * xi / h
    an, bn, qn, fact = np.ones_like(a), np.ones_like(b), 1.0 + 0j, 1.0
    for n in range(1, terms + 1):
        an, bn, fact = an * a, bn * b, fact * n
        out += qn * (an - bn) / fact
        qn *= q
    return -out / (2 * h * h)


def free_kernel_oracle(h=1.0, xi=2.0 + 0.5j, r_max=10.0, ns=(625, 1250, 2500, 5000, 10000),
                       cols=(1.0, 2.5, 5.0)):
    """Columns of the finite-difference free resolvent against the kernel.

    The grid closes with the exact discrete outgoing condition, so the only
    error is the O(dr^2) of the three-point stencil. Returns the relative
    sup errors per n and the fitted order in dr.
    """
    errs = []
    for n in ns:
        op = discretize(lambda r: np.zeros_like(r), h, r_max, n + 1, right="outgoing")
        r = op.r
        worst = 0.0
        for c in cols:
            k = int(np.argmin(np.abs(r - c)))
            e = np.zeros(op.size, complex)
            e[k] = 1.0
            u = apply_resolvent(op, complex(xi) ** 2, e) / op.dr
            K = model_kernel(xi, r, r[k], h)
            worst = max(worst, float(np.max(np.abs(u - K)) / np.max(np.abs(K))))
        errs.append(worst)
    drs = [r_max / n for n in ns]
    order, _, r2 = loglog_fit(drs, errs)
    return {"n": list(ns), "dr": drs, "error": errs, "order": order, "r2": r2}


# ---------------------------------------------------------------------------
# Lipschitz bounds for the model kernel
# ---------------------------------------------------------------------------

def smooth_cutoff(a, b, ramp):
    """C-infinity cutoff, 1 on [a + ramp, b - ramp], 0 off (a, b)."""
    return lambda r: cinf_step((np.asarray(r, float) - a) / ramp) * cinf_step((b - np.asarray(r, float)) / ramp)


def _nystrom_grid(support, xi, xip, h, ppw, n_min):
    a, b = support
    k = max(abs(xi), abs(xip), 1e-12) / h
    n = max(n_min, int(math.ceil((b - a) * k * ppw / (2 * math.pi))))
    dr = (b - a) / n
    return a + dr * (np.arange(n) + 0.5), dr


def kernel_difference_norms(support, xi, xip, h, alphas=((0, 0),), ramp=0.5, N=1.0, ppw=12, n_min=300):
    """|| chi (hD)^a1 (R(xi) - R(xi')) (hD)^a2 chi || for each alpha, by midpoint Nystrom.

    ``support`` = (a, b) with 0 < a: chi is a C-infinity cutoff on it, which
    keeps the second-order kernels free of boundary terms.
    """
    a, b = support
    if not 0 < a < b:
        raise InputError("cutoff support must lie inside (0, inf)")
    for x in (xi, xip):
        if complex(x).imag <= -N * h:
            raise InputError(f"xi = {x} outside the strip Im xi > -{N:g} h")
    if xi == xip:
        return [0.0 for _ in alphas]
    r, dr = _nystrom_grid(support, xi, xip, h, ppw, n_min)
    chi = smooth_cutoff(a, b, ramp)(r)
    w = np.sqrt(dr) * chi
    R1, R2 = r[:, None], r[None, :]
    out = []
    cache = {}
    for alpha in alphas:
        key = (1, 0) if alpha == (1, 0) else (0, 1) if alpha == (0, 1) else (1, 1) if alpha == (1, 1) else (0, 0)
        if key not in cache:
            cache[key] = (model_kernel(xi, R1, R2, h, key), model_kernel(xip, R1, R2, h, key))
        K1, K2 = cache[key]
        if 2 in alpha:
            D = complex(xi) ** 2 * K1 - complex(xip) ** 2 * K2
        else:
            D = K1 - K2
        M = w[:, None] * D * w[None, :]
        out.append(operator_norm(lambda x: M @ x, lambda y: M.conj().T @ y, M.shape, dense=lambda: M))
    return out


def kernel_difference_norm(support, xi, xip, h, alpha=(0, 0), **kw):
    return kernel_difference_norms(support, xi, xip, h, (tuple(alpha),), **kw)[0]


ALPHAS = ((0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (0, 2))
SCALED_PAIRS = ((0.5 + 0.2j, 0.6 + 0.1j), (1.0 - 0.5j, 1.2 - 0.4j), (2.0 + 0.1j, 1.5 + 0.3j),
                (-1.0 - 0.3j, -0.8 - 0.2j), (0.3j, 0.5j), (1.0, 1.05))
FIXED_PAIRS = ((1 + 0.5j, 1.1 + 0.5j), (0.5 + 0.7j, 0.9 + 0.6j), (2 + 1j, 2.2 + 0.9j), (0.2 + 0.3j, 0.3 + 0.3j),
               (1.0, 1.05), (0.5, 0.7))
SECTOR_PAIRS = tuple((r1 * np.exp(1j * t1), r2 * np.exp(1j * t2)) for r1, t1, r2, t2 in
                     ((1.0, math.pi / 4, 1.2, math.pi / 3), (2.0, math.pi / 2, 2.3, 0.6 * math.pi),
                      (1.5, 0.8 * math.pi, 1.5, 0.7 * math.pi)))


def kernel_bound_shape(case, xi, xip, h, alpha):
    dxi = abs(xi - xip)
    if case == "sector":
        return dxi / h**2
    s = sum(alpha)
    if s == 0:
        return dxi / h**3
    return dxi / h**2 * (abs(xi) + abs(xip) + 1) ** (s - 1)


def check_kernel_bounds(hs=None, support=(0.5, 3.0), stability=2.0, N=1.0) -> BoundReport:
    """Fitted constants C(h) = max norm / bound shape, per (case, family, alpha).

    Families: "scaled" pairs xi = h eta (eta fixed, Im eta > -N), "fixed"
    pairs in the upper half plane and "sector" pairs with |xi| >= 1 and
    pi/8 < arg xi < 7 pi/8. A constant counts as h-stable when it never
    exceeds twice its value calibrated on the larger-h half of the sweep.
    """
    hs = list(np.logspace(math.log10(0.02), math.log10(0.2), 6)) if hs is None else list(hs)
    rep = BoundReport("kernel-lipschitz", tol=stability)
    groups = {}
    for h in hs:
        for fam, pairs in (("scaled", SCALED_PAIRS), ("fixed", FIXED_PAIRS), ("sector", SECTOR_PAIRS)):
            case = "sector" if fam == "sector" else "strip"
            for x, y in pairs:
                xi, xip = (h * x, h * y) if fam == "scaled" else (complex(x), complex(y))
                norms = kernel_difference_norms(support, xi, xip, h, ALPHAS, N=N)
                for alpha, nrm in zip(ALPHAS, norms):
                    shape = kernel_bound_shape(case, xi, xip, h, alpha)
                    rep.records.append({"h": h, "family": fam, "alpha": f"{alpha[0]}{alpha[1]}", "xi": complex(xi),
                                        "xip": complex(xip), "norm": nrm, "shape": shape, "C": nrm / shape})
                    key = (fam, alpha)
                    groups.setdefault(key, {}).setdefault(h, 0.0)
                    groups[key][h] = max(groups[key][h], nrm / shape)
    fits = {}
    for (fam, alpha), per_h in groups.items():
        Cs = [per_h[h] for h in hs]
        g = growth_ratio(hs, Cs)
        fits[f"{fam}:{alpha[0]}{alpha[1]}"] = {"C": Cs, "growth": g, "variation": max(Cs) / min(Cs),
                                               "slope": loglog_fit(hs, Cs)[0]}
        if g > stability:
            rep.findings.append(f"{fam} alpha={alpha}: constant grows by {g:.3g}")
    rep.fits = fits
    return rep


# ---------------------------------------------------------------------------
# resonances of one mode
# ---------------------------------------------------------------------------

class _SegmentPotential:
    """Chebyshev interpolant of V on each integration segment.

    The ODE right-hand side is called for one r at a time; a Clenshaw sum
    on stored coefficients is far cheaper than a vectorized callable on a
    length-one array. The degree doubles until the interpolant matches V to
    1e-13 (relative to max |V|) at off-node samples; segments that do not
    converge by degree 256 are split.
    """

    def __init__(self, V, edges, tol=1e-13):
        self.pieces = []
        scale = None
        stack = list(zip(edges[:-1], edges[1:]))[::-1]
        while stack:
            a, b = stack.pop()
            x = np.linspace(a, b, 97)[1:-1:3]
            vx = np.asarray(V(x), float)
            if scale is None:
                scale = max(float(np.max(np.abs(V(np.linspace(edges[0], edges[-1], 2001))))), 1e-300)
            deg, ok = 16, False
            while deg <= 256:
                c = self._fit(V, a, b, deg)
                if np.max(np.abs(self._eval_many(c, a, b, x) - vx)) <= tol * scale:
                    ok = True
                    break
                deg *= 2
            if ok or b - a < 1e-6:
                self.pieces.append((a, b, [float(v) for v in c]))
            else:
                m = 0.5 * (a + b)
                stack.extend([(m, b), (a, m)])
        self.pieces.sort()

    @staticmethod
    def _fit(V, a, b, deg):
        k = np.arange(deg + 1)
        t = np.cos(np.pi * (k + 0.5) / (deg + 1))
        vals = np.asarray(V(0.5 * (a + b) + 0.5 * (b - a) * t), float)
        return np.polynomial.chebyshev.chebfit(t, vals, deg)

    @staticmethod
    def _eval_many(c, a, b, r):
        return np.polynomial.chebyshev.chebval((2 * r - a - b) / (b - a), c)

    def segment(self, a, b):
        """Scalar evaluator on [a, b]; [a, b] must not straddle a breakpoint."""
        inner = [p for p in self.pieces if p[1] > a + 1e-12 and p[0] < b - 1e-12]
        ends = [p[1] for p in inner]

        def f(r):
            lo, hi, c = inner[min(bisect.bisect_left(ends, r), len(inner) - 1)]
            t = (2 * r - lo - hi) / (hi - lo)
            t = -1.0 if t < -1 else 1.0 if t > 1 else t
            b1 = b2 = 0.0
            for ck in reversed(c[1:]):
                b1, b2 = 2 * t * b1 - b2 + ck, b1
            return t * b1 - b2 + c[0]

        return f


_TABLES: dict = {}


def _potential_table(V, r_cut, breakpoints):
    key = (id(V), r_cut, breakpoints)
    hit = _TABLES.get(key)
    if hit is None or hit[0] is not V:
        if len(_TABLES) > 64:
            _TABLES.clear()
        edges = set(np.linspace(0.0, r_cut, int(math.ceil(r_cut / 0.5)) + 1).tolist())
        edges.update(b for b in breakpoints if 0 < b < r_cut)
        hit = (V, _SegmentPotential(V, sorted(edges)))
        _TABLES[key] = hit
    return hit[1]


def matching_values(V, h, rhos, r_cut=R_CUT, breakpoints=(), rtol=1e-10, atol=1e-12, common=False):
    """h W(rho) = h u'(r_cut) - i rho u(r_cut), up to a positive factor.

    u solves -h^2 u'' + (V - rho^2) u = 0, u(0) = 0, u'(0) = 1, integrated
    by DOP853 on all rho at once. The state is rescaled after every segment
    to avoid overflow, each rho by its own norm (the phase is unchanged) or,
    with ``common``, all by one shared factor (differences stay holomorphic).
    """
    rhos = np.atleast_1d(np.asarray(rhos, complex))
    M = rhos.size
    k2 = rhos**2
    breakpoints = tuple(sorted(float(b) for b in breakpoints))
    table = _potential_table(V, float(r_cut), breakpoints)
    vmax = max(abs(c[0]) + sum(abs(x) for x in c[1:]) for _, _, c in table.pieces)
    rate = math.sqrt(vmax + float(np.max(np.abs(k2)))) / h
    nseg = max(1, int(math.ceil(r_cut * rate / 20.0)))
    edges = set(np.linspace(0.0, r_cut, nseg + 1).tolist())
    edges.update(b for b in breakpoints if 0 < b < r_cut)
    edges = sorted(edges)
    y = np.concatenate([np.zeros(M, complex), np.full(M, h, complex)])
    for a, b in zip(edges[:-1], edges[1:]):
        Vs = table.segment(a, b)

        def fun(r, y, Vs=Vs):
            return np.concatenate([y[M:] / h, (Vs(r) - k2) * y[:M] / h])

        sol = solve_ivp(fun, (a, b), y, method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise IntegrationError(sol.message)
        y = sol.y[:, -1]
        nrm = np.sqrt(np.abs(y[:M]) ** 2 + np.abs(y[M:]) ** 2)
        if common:
            nrm = np.full(M, np.max(nrm))
        y = y / np.concatenate([nrm, nrm])
    return y[M:] - 1j * rhos * y[:M]


def _path(rect, t):
    x0, x1, y0, y1 = rect
    c = [complex(x0, y0), complex(x1, y0), complex(x1, y1), complex(x0, y1), complex(x0, y0)]
    k = np.minimum(np.floor(t).astype(int), 3)
    s = t - k
    c = np.asarray(c)
    return c[k] + s * (c[k + 1] - c[k])


def winding_number(fn, rect, n0=24, max_points=6000, jump=0.5):
    """Zero count of fn inside rect by phase tracking along the boundary.

    Intervals whose phase change exceeds ``jump`` are bisected until none
    remains; the count is then checked once more after a uniform doubling.
    Returns (count, raw winding, stable flag).
    """
    t = np.linspace(0.0, 4.0, 4 * n0 + 1)
    v = fn(_path(rect, t[:-1]))
    v = np.append(v, v[0])
    if not np.all(np.isfinite(v)) or np.any(v == 0):
        return 0, float("nan"), False

    def refine(t, v, force=False):
        while True:
            dphi = np.angle(v[1:] / v[:-1])
            bad = np.nonzero(np.abs(dphi) > jump)[0] if not force else np.arange(t.size - 1)
            force = False
            if bad.size == 0:
                return t, v, True
            if t.size + bad.size > max_points:
                return t, v, False
            tm = 0.5 * (t[bad] + t[bad + 1])
            vm = fn(_path(rect, tm))
            t = np.insert(t, bad + 1, tm)
            v = np.insert(v, bad + 1, vm)

    t, v, ok1 = refine(t, v)
    w1 = float(np.sum(np.angle(v[1:] / v[:-1])) / (2 * math.pi))
    t2, v2, ok2 = refine(t, v, force=True)
    if not np.all(np.isfinite(v2)) or np.any(v2 == 0):
        return 0, float("nan"), False
    w2 = float(np.sum(np.angle(v2[1:] / v2[:-1])) / (2 * math.pi))
    n = int(round(w2))
    stable = ok1 and ok2 and abs(w2 - n) <= 0.1 and int(round(w1)) == n
    tiny = float(np.min(np.abs(v2)) / np.median(np.abs(v2)))
    if tiny < 1e-8:
        stable = False
    return n, w2, stable


@dataclass
class Zero:
    rho: complex
    w_abs: float
    residual: float
    count: int
    rect: tuple


def _newton(V, h, rho0, r_cut, breakpoints, maxit=40):
    r = complex(rho0)
    step = float("inf")
    val = np.nan
    for _ in range(maxit):
        d = 1e-6 * max(abs(r), h)
        vals = matching_values(V, h, [r, r + d, r - d], r_cut, breakpoints, rtol=1e-13, atol=1e-16,
                               common=True)
        val = vals[0]
        der = (vals[1] - vals[2]) / (2 * d)
        if der == 0:
            break
        s = val / der
        r -= s
        step = abs(s)
        if step < 1e-13 * max(abs(r), h):
            break
    val = matching_values(V, h, [r], r_cut, breakpoints, rtol=1e-13, atol=1e-16)[0]
    return r, float(abs(val)), float(step)


def matching_zeros(V, h, rect, r_cut=R_CUT, breakpoints=(), max_depth=8, rtol_count=1e-7):
    """All zeros of the matching function in rect = (re0, re1, im0, im1) of the rho-plane.

    Below the real axis the outgoing part of u grows like exp(|Im rho| r/h)
    and W is what remains after cancelling it, so the integration tolerance
    is tightened by exp(-2 |Im rho| r_cut / h); deeper rectangles are refused.
    """
    loss = 2 * max(0.0, -float(rect[2])) * r_cut / h
    if loss > MAX_LOSS:
        raise InputError(f"rectangle reaches Im rho = {rect[2]:g}: cancellation exp({loss:.0f}) exceeds "
                         "double precision; match closer to the potential support")
    rtol = max(1e-13, rtol_count * math.exp(-loss))
    count_fn = lambda z: matching_values(V, h, z, r_cut, breakpoints, rtol=rtol, atol=1e-3 * rtol)
    out = []

    def split(rect, depth):
        x0, x1, y0, y1 = rect
        f = 0.5 + 0.037 * ((depth % 3) - 1)
        xm, ym = x0 + f * (x1 - x0), y0 + (1 - f) * (y1 - y0)
        return [(x0, xm, y0, ym), (xm, x1, y0, ym), (x0, xm, ym, y1), (xm, x1, ym, y1)]

    def solve(rect, depth, known=None):
        n, w, stable = winding_number(count_fn, rect) if known is None else known
        if not stable:
            if depth >= max_depth:
                raise IntegrationError(f"unstable zero count on {rect} (winding {w:.3f})")
            for sub in split(rect, depth):
                solve(sub, depth + 1)
            return
        if n < 0:
            raise IntegrationError(f"negative winding {n} on {rect}: the matching function has poles")
        if n == 0:
            return
        if n == 1:
            x0, x1, y0, y1 = rect
            r, wabs, step = _newton(V, h, complex(0.5 * (x0 + x1), 0.5 * (y0 + y1)), r_cut, breakpoints)
            if x0 <= r.real <= x1 and y0 <= r.imag <= y1 and step <= 1e-8 * max(abs(r), h):
                out.append(Zero(r, wabs, step, 1, rect))
                return
        if depth >= max_depth:
            raise IntegrationError(f"could not isolate {n} zeros in {rect}")
        subs = split(rect, depth)
        counts = [winding_number(count_fn, s) for s in subs]
        if all(c[2] for c in counts) and sum(c[0] for c in counts) != n:
            raise IntegrationError(f"zero counts of sub-rectangles do not add up on {rect}")
        for s, c in zip(subs, counts):
            solve(s, depth + 1, known=c)

    solve(tuple(float(x) for x in rect), 0)
    return out


def square_barrier_resonances(V0, a, h, guesses):
    """Roots of kappa coth(kappa a) = i rho / h with kappa = sqrt(V0 - rho^2)/h (mpmath)."""
    import mpmath as mp

    def F(r):
        kap = mp.sqrt(V0 - r * r) / h
        return kap * mp.cosh(kap * a) - 1j * r / h * mp.sinh(kap * a)

    return [complex(mp.findroot(F, mp.mpc(g))) for g in guesses]


@dataclass
class ResonanceRecord:
    location: RiemannPoint
    j: int
    sigma: float
    rho: complex
    w_abs: float
    residual: float
    dh: float
    count: int = 1
    physical: bool = False

    def to_dict(self):
        return {"location": self.location.to_dict(), "j": self.j, "sigma": self.sigma,
                "rho": [self.rho.real, self.rho.imag], "w_abs": self.w_abs, "residual": self.residual,
                "dh": self.dh, "count": self.count, "physical": self.physical}


def _check_continuation_setup(config: ManifoldConfig, r_cut):
    if config.geometry != "half-cylinder":
        raise PreconditionError("resonance search needs a half-cylinder")
    if not config.tail_is_free(r_cut):
        raise PreconditionError(f"the end must be exactly cylindrical with V = 0 beyond r = {r_cut:g}")


def resonance_point(z, j, rho_j, h, sigmas, E0, side=1):
    """Surface point over z reached from E0 + side i0, with mode j on the branch of rho_j."""
    pt = transport(boundary_point(E0, h, side), z, sigmas)
    phys = physical_rho(z - h * h * sigmas[j] ** 2)
    want = abs(rho_j + phys) < abs(rho_j - phys)
    flipped = set(pt.flipped)
    flipped.discard(j)
    if want:
        flipped.add(j)
    return replace(pt, flipped=frozenset(flipped))


def mode_resonances(config: ManifoldConfig, h, j, rect, side=1, r_cut=R_CUT, E0=None) -> list:
    """Resonances of mode j (distinct-value index) with rho_j in ``rect``.

    The rectangle lives in the rho_j-plane, where the continued mode
    resolvent is single valued; z = h^2 sigma_j^2 + rho^2. Surface points
    for the other modes are reached from E0 + side i0.
    """
    from .modes import mode_potential
    _check_continuation_setup(config, r_cut)
    sig = np.array([s for s, _ in config.spectrum.distinct()])
    if not 0 <= j < sig.size:
        raise InputError(f"mode index {j} outside the spectrum list")
    E0 = config.E0 if E0 is None else E0
    V = mode_potential(config, h, sig[j])
    zeros = matching_zeros(V, h, rect, r_cut)
    ref = boundary_point(E0, h, side)
    out = []
    for zr in zeros:
        z = h * h * sig[j] ** 2 + zr.rho**2
        pt = resonance_point(z, j, zr.rho, h, sig, E0, side)
        out.append(ResonanceRecord(pt, j, float(sig[j]), zr.rho, zr.w_abs, zr.residual,
                                   dh_metric(pt, ref, sig).bound, zr.count, physical=zr.rho.imag > 0))
    return out


def _search_job(args):
    config, h, j, rect, side, E0 = args
    return mode_resonances(config, h, j, rect, side, E0=E0)


def search_modes(config: ManifoldConfig, h, jobs, side=1, E0=None, workers=1) -> list:
    """Run mode_resonances over (j, rect) jobs, in worker processes when
    ``workers`` > 1 and the config pickles; records come back sorted by
    (j, Re z, Im z) whatever the completion order."""
    args = [(config, h, j, rect, side, E0) for j, rect in jobs]
    parallel = workers > 1 and len(args) > 1
    if parallel:
        try:
            pickle.dumps(config)
        except Exception:
            parallel = False  # closures in the config: fall back to one process
    if parallel:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_search_job, args))
    else:
        chunks = [_search_job(a) for a in args]
    recs = [r for c in chunks for r in c]
    recs.sort(key=lambda r: (r.j, r.location.base.real, r.location.base.imag))
    return recs


# ---------------------------------------------------------------------------
# the two-term resolvent identity
# ---------------------------------------------------------------------------

@dataclass
class VodevReport:
    discrepancy: float
    per_mode: list
    dr: float
    n: int
    reference: str

    def to_dict(self):
        return dict(self.__dict__)


def _second_difference(n, dr):
    return sparse.diags([np.ones(n - 1), np.full(n, -2.0), np.ones(n - 1)], [-1, 0, 1], format="csr") / dr**2


def _inverse(op, z):
    return Factorization(op, z).solve(np.eye(op.size, dtype=complex))


def check_cutoffs(chi, chi1, r_end, r_inner=R_CUT, samples=20001):
    r = np.linspace(0.0, r_end, samples)
    c, c1 = chi(r), chi1(r)
    if np.max(np.abs(c * c1 - c1)) > 1e-12:
        raise InputError("cutoffs must satisfy chi chi_1 = chi_1")
    if np.any((np.abs(1 - c1) > 1e-14) & (r < r_inner)):
        raise InputError(f"1 - chi_1 must vanish for r < {r_inner:g}")
    if abs(c[-1]) > 0 or abs(c1[-1]) > 0:
        raise InputError("cutoffs must vanish at the end of the grid")


def verify_vodev_identity(config: ManifoldConfig, h, z, z0, chi, chi1, r_end=11.0, dr=0.01, n_modes=4,
                          reference="kernel") -> VodevReport:
    """Relative discrepancy of the two-term identity, as matrices per mode.

    R is the finite-difference resolvent of the mode operator; R_0 is the
    model kernel sampled on the grid ("kernel") or the finite-difference
    free resolvent ("fd", for which the identity is exact algebra).
    """
    from .modes import mode_potential
    for w in (z, z0):
        w = complex(w)
        if w.imag == 0 and w.real >= 0:
            raise InputError("z and z0 must lie off [0, inf)")
    _check_continuation_setup(config, R_CUT)
    check_cutoffs(chi, chi1, r_end)
    n = int(round(r_end / dr))
    dr = r_end / n
    sig = [s for s, _ in config.spectrum.distinct()][:n_modes]
    X = X1 = None
    per = []
    for s in sig:
        Vj = mode_potential(config, h, s)
        op = discretize(Vj, h, r_end, n + 1, right="outgoing")
        zero = discretize(lambda r: np.zeros_like(r), h, r_end, n + 1, right="outgoing")
        r = op.r
        if X is None:
            X, X1 = chi(r), chi1(r)
            L2 = _second_difference(r.size, dr)
            Dg = sparse.diags(X1)
            C = (h * h * (L2 @ Dg - Dg @ L2)).tocsr()
            I = np.eye(r.size)
        t = h * h * s * s
        G = {w: _inverse(op, complex(w) - t) for w in (z, z0)}
        if reference == "kernel":
            G0 = {w: model_kernel(physical_rho(complex(w) - t), r[:, None], r[None, :], h) * dr for w in (z, z0)}
        else:
            G0 = {w: _inverse(zero, complex(w) - t) for w in (z, z0)}
        XG = {w: X[:, None] * G[w] * X[None, :] for w in (z, z0)}
        lhs = XG[z] - XG[z0]
        D0 = X[:, None] * (G0[z] - G0[z0]) * X[None, :]
        m1 = (XG[z] * (X1 * (2 - X1))[None, :]) @ XG[z0]
        left = I - np.diag(X1) - (C.T @ XG[z].T).T
        right = I - np.diag(X1) + C @ XG[z0]
        rhs = (complex(z) - complex(z0)) * m1 + left @ (D0 @ right)
        den = np.linalg.norm(lhs, 2)
        per.append(float(np.linalg.norm(lhs - rhs, 2) / den) if den > 0 else 0.0)
    return VodevReport(max(per), per, dr, n, reference)


def vodev_convergence(config, h, z, z0, chi, chi1, dr=0.01, **kw):
    """Discrepancy at dr and dr/2 and the observed order."""
    a = verify_vodev_identity(config, h, z, z0, chi, chi1, dr=dr, **kw)
    b = verify_vodev_identity(config, h, z, z0, chi, chi1, dr=dr / 2, **kw)
    return {"coarse": a.discrepancy, "fine": b.discrepancy, "dr": a.dr,
            "order": math.log2(a.discrepancy / b.discrepancy) if b.discrepancy > 0 else float("inf")}


# ---------------------------------------------------------------------------
# resonance-free region near E0 +- i0
# ---------------------------------------------------------------------------

@dataclass
class RegionReport:
    table: list
    C: float
    cprime: float
    chat_variation: float
    findings: list = field(default_factory=list)
    resonances: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.findings

    def to_dict(self):
        return {"C": self.C, "cprime": self.cprime, "chat_variation": self.chat_variation,
                "passed": self.passed, "findings": list(self.findings), "table": self.table,
                "resonances": [r.to_dict() for r in self.resonances]}


def continued_norm(family, chi: Weight, point: RiemannPoint, sigmas):
    """sup over modes of ||chi R_j chi|| at a surface point, tail bound included."""
    vals = []
    for m in family.modes:
        zj = point.base - family.h**2 * m.sigma**2
        r = rho(point, m.index, sigmas)
        op = family.operator(m, point.base)
        vals.append(weighted_norm(op, WeightQuery(chi, chi, zj, point.side or 1), method="lanczos",
                                  truncation=False, rho=r).value)
    rr = np.linspace(family.r_min, family.r_max, 4001)
    tail = family.tail_bound(point.base, float(np.max(chi(rr))), float(np.max(chi(rr))))
    return max(max(vals), tail)


def _boundary_norm(family, chi, E0, eps, side):
    from .modes import full_weighted_norm

    def at(e):
        return full_weighted_norm(family, WeightQuery(chi, chi, E0 + side * 1j * e, side)).value

    return 2 * at(eps) - at(2 * eps)


def region_points(E0, h, sigmas, radius, side=1, angles=8, fracs=(0.5, 0.9)):
    """Surface points q with d_h(q, E0 +- i0) = frac * radius, in several directions."""
    ref = boundary_point(E0, h, side)
    pts = []
    for th in 2 * math.pi * (np.arange(angles) + 0.25) / angles:
        u = np.exp(1j * th)
        dist = lambda t: dh_metric(transport(ref, E0 + t * u, sigmas), ref, sigmas).bound
        for f in fracs:
            target = f * radius
            lo, hi = 1e-16, 1.0
            if dist(hi) < target:
                continue
            for _ in range(100):
                mid = math.sqrt(lo * hi)
                if dist(mid) < target:
                    lo = mid
                else:
                    hi = mid
            pts.append(transport(ref, E0 + lo * u, sigmas))
    return pts


def resonance_free_region(config: ManifoldConfig, hs, chi: Weight | None = None, C=None, box=0.5,
                          eps=1e-8, side=1, r_max=12.0, ppw=0.2, stability=2.0, cprime_floor=1e-3,
                          angles=8, workers=1) -> RegionReport:
    """Largest C' with no computed resonance in {d_h(z, E0 +- i0) < C' mu(h)}.

    mu(h) = min(h^2, C/N(h)) with N(h) = ||chi R(E0 +- i0) chi|| and, unless
    given, C = min_h h^2 N(h), the largest constant keeping mu = C/N. Each
    retained mode is searched on the rho_j-square of half-width ``box`` h
    around rho_j(E0 +- i0); modes with no zero there contribute the
    certified lower bound box h / mu. Norms sampled inside the region give
    C_hat(h) = max N mu. ``workers`` is passed to search_modes.
    """
    from .modes import assemble_modes
    _check_continuation_setup(config, R_CUT)
    chi = chi or Weight(smooth_cutoff(-2.0, 10.0, 1.0), "chi[0,10]")
    E0 = config.E0
    sig = np.array([s for s, _ in config.spectrum.distinct()])
    rows, allres = [], []
    for h in hs:
        fam = assemble_modes(config, h, z_window=(E0,), r_max=r_max, ppw=ppw)
        N0 = _boundary_norm(fam, chi, E0, eps, side)
        ref = boundary_point(E0, h, side)
        jobs = []
        for m in fam.modes:
            rc = rho(ref, m.index, sig)
            jobs.append((m.index, (rc.real - box * h, rc.real + box * h, rc.imag - box * h, rc.imag + box * h)))
        recs = search_modes(config, h, jobs, side, E0, workers)
        allres.extend(recs)
        found = len(recs)
        nearest = min((rec.dh for rec in recs), default=float("inf"))
        rows.append({"h": h, "N0": N0, "resonances": found, "nearest": nearest, "modes": len(fam.modes),
                     "family": fam})
    Cval = min(r["h"] ** 2 * r["N0"] for r in rows) if C is None else C
    for r in rows:
        r["mu"] = min(r["h"] ** 2, Cval / r["N0"])
        certified = box * r["h"]
        r["cprime_max"] = min(r["nearest"], certified) / r["mu"]
        r["cprime_kind"] = "nearest" if r["nearest"] <= certified else "lower-bound"
    cmax = min(r["cprime_max"] for r in rows)
    cprime = 0.5 * cmax
    findings = []
    if cmax < cprime_floor:
        findings.append(f"resonance within {cprime_floor:g} mu(h) of E0")
    for r in rows:
        radius = cprime * r["mu"]
        inside = [res for res in allres if res.location.h == r["h"] and res.dh < radius]
        if inside:
            findings.append(f"{len(inside)} resonances inside the region at h={r['h']:.4g}")
        pts = region_points(E0, r["h"], sig, radius, side, angles)
        norms = [continued_norm(r["family"], chi, p, sig) for p in pts]
        r["samples"] = len(pts)
        r["max_norm"] = max(norms) if norms else float("nan")
        r["chat"] = r["max_norm"] * r["mu"]
        del r["family"]
    chats = [r["chat"] for r in rows]
    var = max(chats) / min(chats)
    if var > stability:
        findings.append(f"C_hat varies by {var:.3g} across h")
    return RegionReport(rows, float(Cval), float(cprime), float(var), findings, allres)
