"""Warped-product geometries with cylindrical ends.

Holds the end profile ``f``, repulsive half-line potentials, transverse spectra
and the manifold configuration, together with grid-level certification of the
structural hypotheses on ``f``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

TOL_VALIDATE = 1e-10


class InputError(ValueError):
    """Malformed or out-of-range input."""


class GeometryError(ValueError):
    """The geometric hypotheses cannot be met."""


class ResolutionError(ValueError):
    """The grid is too coarse for the requested quantity."""


# ---------------------------------------------------------------------------
# smooth one-sided step used by the compactly supported families
# ---------------------------------------------------------------------------

def _flat_decay(t, order=0):
    """g(t) = exp(1 - 1/(1-t)) on [0,1), 0 for t >= 1, and its t-derivatives.

    g(0) = 1, g'(0) = -1 and g is flat at t = 1, so ``1 - c g(r/b)`` has
    positive slope on [0, b) and joins the constant 1 smoothly.
    """
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = t < 1.0
    tt = np.clip(t[m], None, 1.0)
    u = 1.0 / (1.0 - tt)
    g = np.exp(1.0 - u)
    if order == 0:
        val = g
    elif order == 1:
        val = -u**2 * g
    elif order == 2:
        val = (u**4 - 2 * u**3) * g
    elif order == 3:
        val = (-(u**6) + 6 * u**5 - 6 * u**4) * g
    else:
        raise ValueError("order must be 0..3")
    out[m] = val
    return out


def smooth_ramp(x):
    """C^2 ramp: 0 for x <= 0, 1 for x >= 1, quintic smoothstep in between."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return x**3 * (10 - 15 * x + 6 * x**2)


def smooth_ramp_d1(x):
    x = np.asarray(x, dtype=float)
    inside = (x > 0) & (x < 1)
    out = np.zeros_like(x)
    xi = x[inside]
    out[inside] = 30 * xi**2 * (1 - xi) ** 2
    return out


def _fd4(values, dx, order):
    """Fourth-order finite-difference derivatives on a uniform table.

    Centered stencils in the interior and one-sided ones at the two ends.
    """
    y = np.asarray(values, dtype=float)
    n = y.size
    if n < 7:
        raise ResolutionError("tabulated profile needs at least 7 samples")
    if order == 1:
        c = np.array([1, -8, 0, 8, -1]) / (12 * dx)
    elif order == 2:
        c = np.array([-1, 16, -30, 16, -1]) / (12 * dx**2)
    elif order == 3:
        c = np.array([1, -8, 13, 0, -13, 8, -1]) / (8 * dx**3)
    else:
        raise ValueError("order must be 1..3")
    half = len(c) // 2
    out = np.empty(n)
    out[half:n - half] = np.convolve(y, c[::-1], mode="valid")
    # ends: polynomial fit over a 7-point window (exact for degree <= 6)
    for idx in list(range(half)) + list(range(n - half, n)):
        lo = min(max(idx - 3, 0), n - 7)
        xs = (np.arange(lo, lo + 7) - idx) * dx
        coef = np.polyfit(xs, y[lo:lo + 7], 6)
        out[idx] = np.polyder(np.poly1d(coef), order)(0.0)
    return out


# ---------------------------------------------------------------------------
# end profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EndProfile:
    """Warping function f of the end metric dr^2 + f^{4/(d-1)} g_Y.

    kind is "power" (f = 1 - c(1+r)^-m), "bump" (f = 1 - c g(r/b) with f'
    supported in [0, b]), "constant" (f = 1, kept for negative tests) or
    "tabulated" (samples r, f on a uniform grid).
    """

    kind: str
    c: float = 0.5
    m: float = 1.0
    b: float = 6.0
    delta0: float | None = None
    table_r: tuple = ()
    table_f: tuple = ()

    def __post_init__(self):
        if self.kind == "power":
            if not (self.m > 0):
                raise InputError(f"power profile needs m > 0, got {self.m}")
            if not (0 < self.c <= 1):
                raise InputError(f"power profile needs c in (0, 1], got {self.c}")
        elif self.kind == "bump":
            if not (0 < self.c < 1) or not (self.b > 0):
                raise InputError("bump profile needs 0 < c < 1 and b > 0")
        elif self.kind == "tabulated":
            r = np.asarray(self.table_r, dtype=float)
            f = np.asarray(self.table_f, dtype=float)
            if r.size != f.size or r.size < 7:
                raise InputError("tabulated profile needs matching r, f columns (>= 7 rows)")
            if not (np.all(np.isfinite(r)) and np.all(np.isfinite(f))):
                raise InputError("tabulated profile has non-finite values")
            dr = np.diff(r)
            if np.any(dr <= 0) or np.ptp(dr) > 1e-8 * max(1.0, abs(dr[0])):
                raise InputError("tabulated profile must be on a uniform increasing grid")
        elif self.kind != "constant":
            raise InputError(f"unknown profile kind {self.kind!r}")
        if self.delta0 is None:
            object.__setattr__(self, "delta0", self._default_delta0())

    # -- constructors -----------------------------------------------------
    @classmethod
    def power(cls, c=0.5, m=1.0, delta0=None):
        return cls("power", c=c, m=m, delta0=delta0)

    @classmethod
    def bump(cls, c=0.5, b=6.0, delta0=None):
        return cls("bump", c=c, b=b, delta0=delta0)

    @classmethod
    def constant(cls):
        return cls("constant", delta0=1.0)

    @classmethod
    def from_table(cls, r, f, delta0=None):
        return cls("tabulated", table_r=tuple(np.asarray(r, float)),
                   table_f=tuple(np.asarray(f, float)), delta0=delta0)

    @classmethod
    def load(cls, path, delta0=None):
        data = np.loadtxt(path)
        if data.ndim != 2 or data.shape[1] != 2:
            raise InputError(f"{path}: expected two columns (r, f)")
        return cls.from_table(data[:, 0], data[:, 1], delta0=delta0)

    def _default_delta0(self):
        if self.kind == "power":
            return float(self.m)
        if self.kind == "bump":
            # -g'/g = (1-t)^-2 >= 1, so (1+r)/(b(1-t)^2) >= 1/b
            return 1.0 / self.b
        if self.kind == "constant":
            return 1.0
        return None  # tabulated: found by line search during validation

    # -- evaluation -------------------------------------------------------
    def derivative(self, r, k=0):
        """k-th derivative of f at r (k = 0..3)."""
        r = np.asarray(r, dtype=float)
        if self.kind == "power":
            if k == 0:
                return 1.0 - self.c * (1 + r) ** (-self.m)
            coef = self.c * math.prod(self.m + i for i in range(k))
            return -((-1) ** k) * coef * (1 + r) ** (-self.m - k)
        if self.kind == "bump":
            val = _flat_decay(r / self.b, k) / self.b**k
            return (1.0 - self.c * val) if k == 0 else -self.c * val
        if self.kind == "constant":
            return np.ones_like(r) if k == 0 else np.zeros_like(r)
        return self._spline(k)(r)

    def __call__(self, r):
        return self.derivative(r, 0)

    def gap(self, r):
        """1 - f without the cancellation of forming f first."""
        r = np.asarray(r, dtype=float)
        if self.kind == "power":
            return self.c * (1 + r) ** (-self.m)
        if self.kind == "bump":
            return self.c * _flat_decay(r / self.b, 0)
        if self.kind == "constant":
            return np.zeros_like(r)
        return 1.0 - self._spline(0)(r)

    def gap_positive(self, r):
        """Where f < 1 holds exactly (the bump gap underflows before r reaches b)."""
        r = np.asarray(r, dtype=float)
        if self.kind == "power":
            return np.full(r.shape, self.c > 0)
        if self.kind == "bump":
            return r < self.b
        return self.gap(r) > 0

    def _spline(self, k):
        cache = self.__dict__.setdefault("_splines", {})
        if k not in cache:
            rt = np.asarray(self.table_r)
            ft = np.asarray(self.table_f)
            vals = ft if k == 0 else _fd4(ft, rt[1] - rt[0], k)
            cache[k] = CubicSpline(rt, vals, extrapolate=True)
        return cache[k]

    def decay_constants(self, r=None, delta0=None):
        """Constants C_k (k = 0..3) in |(f-1)^(k)| <= C_k (1+r)^(-k-delta0)."""
        if self.kind == "power":
            return tuple(self.c * math.prod(self.m + i for i in range(k)) for k in range(4))
        if self.kind == "constant":
            return (0.0, 0.0, 0.0, 0.0)
        if r is None:
            hi = self.b if self.kind == "bump" else float(self.table_r[-1])
            r = np.linspace(0.0, hi, 4001)
        d0 = delta0 if delta0 is not None else (self.delta0 if self.delta0 is not None else 0.0)
        out = []
        for k in range(4):
            g = self.derivative(r, k) - (1.0 if k == 0 else 0.0)
            out.append(float(np.max(np.abs(g) * (1 + r) ** (k + d0))) * (1 + 1e-9))
        return tuple(out)

    def to_dict(self):
        d = {"kind": self.kind, "delta0": self.delta0}
        if self.kind == "power":
            d.update(c=self.c, m=self.m)
        elif self.kind == "bump":
            d.update(c=self.c, b=self.b)
        elif self.kind == "tabulated":
            d.update(n=len(self.table_r))
        return d


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)  # (name, passed, worst margin)
    delta0: float | None = None

    @property
    def passed(self):
        return all(ok for _, ok, _ in self.checks)

    def to_dict(self):
        return {
            "passed": self.passed,
            "delta0": self.delta0,
            "checks": [{"name": n, "passed": bool(ok), "margin": float(m)} for n, ok, m in self.checks],
        }


def _find_delta0(profile, r):
    """Largest delta0 with f' >= delta0 (1+r)^-1 (1-f) on the grid."""
    f = profile(r)
    fp = profile.derivative(r, 1)
    gap = profile.gap(r)
    mask = gap > 1e-14
    if not np.any(mask):
        return None
    ratios = fp[mask] * (1 + r[mask]) / gap[mask]
    best = float(np.min(ratios))
    return best if best > 0 else None


def validate_profile(profile: EndProfile, grid, tol=TOL_VALIDATE) -> ValidationReport:
    """Grid certification of 0 < f <= 1, f < 1 on [0,6), the decay and the
    monotonicity hypothesis (with stored constants)."""
    r = np.asarray(grid, dtype=float)
    if r.size < 2 or np.any(np.diff(r) <= 0):
        raise InputError("grid must be increasing with positive spacing")
    if r[-1] < 10:
        raise InputError("grid must reach at least r = 10")
    f = profile(r)
    if not np.all(np.isfinite(f)):
        raise InputError("profile has non-finite values on the grid")

    rep = ValidationReport()
    d0 = profile.delta0
    if d0 is None:
        d0 = _find_delta0(profile, r)
    rep.delta0 = d0

    gap = profile.gap(r)
    inner = r > 0  # f(0) = 0 is allowed: the end may close up at the tip
    pos = float(np.min(f[inner])) if np.any(inner) else float(f[0])
    upper = float(np.min(gap))
    near = r < 6
    below6 = float(np.min(gap[near])) if np.any(near) else 1.0
    strict = bool(np.all(profile.gap_positive(r[near])))
    rep.checks.append(("0 < f <= 1", pos > 0 and upper >= -tol, min(pos, upper)))
    rep.checks.append(("f < 1 on [0,6)", strict, below6))

    if d0 is None or d0 <= 0:
        rep.checks.append(("decay", False, -1.0))
        rep.checks.append(("monotone gap", False, -1.0))
        return rep

    consts = profile.decay_constants(r, d0)
    worst = math.inf
    for k in range(4):
        g = profile.derivative(r, k) - (1.0 if k == 0 else 0.0)
        bound = consts[k] * (1 + r) ** (-k - d0)
        scale = max(consts[k], 1.0)
        worst = min(worst, float(np.min(bound - np.abs(g))) / scale)
    rep.checks.append(("decay", worst >= -tol, worst))

    fp = profile.derivative(r, 1)
    lower = d0 * (1 + r) ** -1 * gap
    margin = float(min(np.min(fp - lower), np.min(lower)))
    rep.checks.append(("monotone gap", margin >= -tol, margin))
    return rep


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RepulsivePotential:
    """Nonnegative nonincreasing V_D with V_D' <= -deltaV (1+r)^-1 V_D.

    kind "power": A(1+r)^-m (deltaV defaults to m); "bump": A g(r/b), which is
    compactly supported with deltaV = 1/b; "zero": V = 0 (any deltaV);
    "sum": nonnegative combination of parts (deltaV = min over parts).
    """

    kind: str
    A: float = 1.0
    m: float = 1.0
    b: float = 4.0
    deltaV: float | None = None
    parts: tuple = ()

    def __post_init__(self):
        if self.kind not in ("power", "bump", "zero", "sum"):
            raise InputError(f"unknown potential kind {self.kind!r}")
        if self.kind in ("power", "bump") and self.A < 0:
            raise InputError("potential amplitude must be nonnegative")
        if self.kind == "power" and self.m <= 0:
            raise InputError("power potential needs m > 0")
        if self.kind == "bump" and self.b <= 0:
            raise InputError("bump potential needs b > 0")
        if self.deltaV is None:
            object.__setattr__(self, "deltaV", self._default_deltaV())
        if not (self.deltaV > 0):
            raise InputError("deltaV must be positive")

    @classmethod
    def power(cls, A=1.0, m=1.0, deltaV=None):
        return cls("power", A=A, m=m, deltaV=deltaV)

    @classmethod
    def bump(cls, A=1.0, b=4.0, deltaV=None):
        return cls("bump", A=A, b=b, deltaV=deltaV)

    @classmethod
    def zero(cls, deltaV=1.0):
        return cls("zero", A=0.0, deltaV=deltaV)

    @classmethod
    def combine(cls, *parts):
        return cls("sum", parts=tuple(parts))

    def _default_deltaV(self):
        if self.kind == "power":
            return float(self.m)
        if self.kind == "bump":
            return 1.0 / self.b
        if self.kind == "zero":
            return 1.0
        return min(p.deltaV for p in self.parts)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "power":
            return self.A * (1 + r) ** (-self.m)
        if self.kind == "bump":
            return self.A * _flat_decay(r / self.b, 0)
        if self.kind == "zero":
            return np.zeros_like(r)
        return sum(p(r) for p in self.parts)

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "power":
            return -self.m * self.A * (1 + r) ** (-self.m - 1)
        if self.kind == "bump":
            return self.A * _flat_decay(r / self.b, 1) / self.b
        if self.kind == "zero":
            return np.zeros_like(r)
        return sum(p.derivative(r) for p in self.parts)

    def certify(self, grid, tol=TOL_VALIDATE):
        """Worst margins of V >= 0, V' <= 0 and the repulsivity inequality."""
        r = np.asarray(grid, dtype=float)
        v = self(r)
        dv = self.derivative(r)
        scale = max(1.0, float(np.max(np.abs(v))))
        m_pos = float(np.min(v)) / scale
        m_rep = float(np.min(-self.deltaV * v / (1 + r) - dv)) / scale
        return {"nonnegative": m_pos, "repulsive": m_rep,
                "passed": m_pos >= -tol and m_rep >= -tol}

    @property
    def label(self):
        if self.kind == "power":
            return f"power(A={self.A:g},m={self.m:g})"
        if self.kind == "bump":
            return f"bump(A={self.A:g},b={self.b:g})"
        if self.kind == "zero":
            return "zero"
        return "+".join(p.label for p in self.parts)

    def to_dict(self):
        d = {"kind": self.kind, "deltaV": self.deltaV, "label": self.label}
        if self.kind in ("power", "bump"):
            d["A"] = self.A
        return d


def compact_bump(amplitude, r0, r1):
    """Smooth compactly supported function: amplitude * ramp bump on [r0, r1]."""
    if not r1 > r0:
        raise InputError("bump support must have r1 > r0")

    def fn(r):
        x = (np.asarray(r, dtype=float) - r0) / (r1 - r0)
        out = np.zeros_like(x)
        m = (x > 0) & (x < 1)
        out[m] = np.exp(1.0 - 1.0 / (1.0 - (2 * x[m] - 1) ** 2))
        return amplitude * out

    fn.support = (r0, r1)
    return fn


# ---------------------------------------------------------------------------
# transverse spectra
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransverseSpectrum:
    """Square roots sigma_j of the cross-section eigenvalues, listed with
    multiplicity in nondecreasing order."""

    kind: str
    sigma: tuple
    dim: int  # dimension of the cross-section Y
    L: float | None = None

    @property
    def values(self):
        return np.asarray(self.sigma, dtype=float)

    @property
    def d(self):
        """Dimension of the manifold."""
        return self.dim + 1

    def __len__(self):
        return len(self.sigma)

    def distinct(self):
        """(sigma, multiplicity) pairs."""
        _, first, counts = np.unique(np.round(self.values, 12), return_index=True, return_counts=True)
        return list(zip(self.values[first].tolist(), counts.tolist()))

    def to_dict(self):
        return {"kind": self.kind, "count": len(self.sigma), "dim": self.dim, "L": self.L}


def transverse_spectrum(kind, count, *, L=2 * math.pi, dim=2, values=None) -> TransverseSpectrum:
    """First ``count`` transverse values (with multiplicity).

    kind "circle": sigma = 2 pi k / L (k >= 1 twice); "sphere": sigma^2 = l(l + dim - 1)
    on S^dim; "explicit": the given list, sorted.
    """
    if count < 1:
        raise InputError("count must be >= 1")
    if kind == "circle":
        out = [0.0]
        k = 1
        while len(out) < count:
            out += [2 * math.pi * k / L] * 2
            k += 1
        return TransverseSpectrum("circle", tuple(out[:count]), 1, L=L)
    if kind == "sphere":
        out = []
        l = 0
        while len(out) < count:
            mult = math.comb(l + dim, dim) - (math.comb(l + dim - 2, dim) if l >= 2 else 0)
            out += [math.sqrt(l * (l + dim - 1))] * mult
            l += 1
        return TransverseSpectrum("sphere", tuple(out[:count]), dim)
    if kind == "explicit":
        if values is None:
            raise InputError("explicit spectrum needs values")
        vals = sorted(float(v) for v in values)
        if any(v < 0 for v in vals):
            raise InputError("sigma values must be nonnegative")
        return TransverseSpectrum("explicit", tuple(vals[:count]), dim)
    raise InputError(f"unknown spectrum kind {kind!r}")


# ---------------------------------------------------------------------------
# manifold configuration and derived quantities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifoldConfig:
    """Half-cylinder [0, inf) x Y (Dirichlet at r = 0) or full cylinder R x Y.

    The potential on the end is V_L + h V_S; ``V_W`` is the interior potential
    used by full-cylinder examples. ``V_S`` is a function of r alone, held
    fixed as h varies.
    """

    profile: EndProfile
    spectrum: TransverseSpectrum
    E0: float = 1.0
    cJ: float = 0.5
    V_L: Callable | None = None
    V_S: Callable | None = None
    V_W: Callable | None = None
    geometry: str = "half-cylinder"

    def __post_init__(self):
        if self.geometry not in ("half-cylinder", "full-cylinder"):
            raise InputError(f"unknown geometry {self.geometry!r}")
        if not self.E0 > 0 or not self.cJ > 0:
            raise InputError("E0 and cJ must be positive")
        supp = getattr(self.V_S, "support", None)
        if supp is not None and (supp[0] < 0 or supp[1] > 5):
            raise InputError("V_S must be supported in [0, 5]")

    @property
    def d(self):
        return self.spectrum.d

    @property
    def warp_exponent(self):
        return 4.0 / (self.d - 1)

    def potential(self, r, h):
        r = np.asarray(r, dtype=float)
        v = np.zeros_like(r)
        if self.V_L is not None:
            v = v + self.V_L(r)
        if self.V_S is not None:
            v = v + h * self.V_S(r)
        if self.V_W is not None:
            v = v + self.V_W(r)
        return v

    def tail_is_free(self, r0=6.0, r1=60.0):
        """Whether V_L = f - 1 = 0 beyond r0 (checked on samples)."""
        r = np.linspace(r0, r1, 2001)
        ok = np.allclose(self.profile(r), 1.0, atol=1e-14)
        if self.V_L is not None:
            ok = ok and np.allclose(self.V_L(r), 0.0, atol=1e-14)
        return bool(ok)


def effective_potential(config: ManifoldConfig, h, j, grid):
    """V_j = V + h^2 f''/f + h^2 sigma_j^2 (f^{-4/(d-1)} - 1) on the grid."""
    if not h > 0:
        raise InputError("h must be positive")
    sig = config.spectrum.values
    if not 0 <= j < sig.size:
        raise InputError(f"mode index {j} outside spectrum of length {sig.size}")
    r = np.asarray(grid, dtype=float)
    prof = config.profile
    if prof.kind == "bump" and r.size > 1:
        if np.max(np.diff(r)) > 0.1 * prof.b:
            raise ResolutionError("grid spacing exceeds a tenth of the profile support")
    f = prof(r)
    if np.any(f <= 0):
        raise GeometryError("profile must be positive")
    fpp = prof.derivative(r, 2)
    s2 = sig[j] ** 2
    return config.potential(r, h) + h**2 * fpp / f + h**2 * s2 * (f ** (-config.warp_exponent) - 1.0)


def energy_level(E0, h, sigma):
    """E_j = E_0 - h^2 sigma_j^2."""
    return E0 - h * h * sigma * sigma


def estar_threshold(config: ManifoldConfig, h, tol=1e-12):
    """Largest E_* in (0, c_J] such that every mode with E_j <= E_* has
    h^2 sigma_j^2 f(5)^{-4/(d-1)} >= E_0.

    With q = f(5)^{4/(d-1)}, E_j <= E_* means h^2 sigma_j^2 >= E_0 - E_*, so the
    implication holds for all modes exactly when E_0 - E_* >= q E_0, i.e.
    E_* <= E_0 (1 - q). The value is located by bisection on that predicate.
    """
    f5 = float(config.profile(5.0))
    if f5 >= 1.0:
        raise GeometryError("f(5) = 1: no admissible E_*")
    q = f5 ** config.warp_exponent
    E0 = config.E0

    def admissible(es):
        # worst mode is the one with h^2 sigma^2 = E0 - es exactly
        return (E0 - es) / q >= E0 * (1 - 1e-15)

    if admissible(config.cJ):
        return float(config.cJ)
    lo, hi = 0.0, float(config.cJ)
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if admissible(mid):
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise GeometryError("E_* collapsed to zero")
    return lo
