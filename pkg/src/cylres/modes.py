"""Mode decomposition of warped-product operators and full-manifold norms.

On [0, inf) x Y (or R x Y) with metric dr^2 + f^{4/(d-1)} g_Y the operator
-h^2 Delta + V, conjugated by f, is the direct sum over transverse modes of
P_j = -h^2 d^2 + V_j + h^2 sigma_j^2 with
V_j = V + h^2 f''/f + h^2 sigma_j^2 (f^{-4/(d-1)} - 1). Weights that are
functions of r act mode by mode, so a weighted norm of the resolvent is the
sup over modes of the one-dimensional norms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import InputError, ManifoldConfig, estar_threshold, smooth_ramp
from .halfline import (BoundReport, PoleSignal, PreconditionError, Weight, WeightQuery, discretize,
                       loglog_fit, power_weight, weighted_norm)


@dataclass(frozen=True)
class ModeEntry:
    index: int  # position in the list of distinct transverse values
    sigma: float
    multiplicity: int
    E: float  # E_0 - h^2 sigma^2
    tag: str  # "below-E*" or "above-E*"
    potential: Callable


@dataclass
class ModeFamily:
    """Retained modes of one (config, h) pair plus the tail certificate.

    Every discarded mode has h^2 sigma^2 >= gap_floor + Re z + sup|V + h^2 f''/f|
    for all z in the window, so its resolvent is bounded by 1/(h^2 sigma^2 -
    Re z - sup), with the largest such bound attained at ``tail_sigma``.
    """

    config: ManifoldConfig
    h: float
    modes: list
    estar: float
    z_window: tuple
    sup_base: float
    tail_sigma: float
    r_max: float = 20.0
    r_min: float = 0.0
    ppw: float = 0.2
    absorb: Callable | None = None

    @property
    def J_max(self):
        """Index (with multiplicity) of the last retained mode."""
        return sum(m.multiplicity for m in self.modes) - 1

    def tail_bound(self, z, sup_w1=1.0, sup_w2=1.0):
        gap = self.h**2 * self.tail_sigma**2 - complex(z).real - self.sup_base
        if gap <= 0:
            raise PreconditionError("tail certificate does not cover this z")
        return sup_w1 * sup_w2 / gap

    def operator(self, entry: ModeEntry, z=None):
        """ModeOperator for one mode; the grid resolves the mode's energy at z."""
        zz = self.config.E0 if z is None else complex(z)
        k = math.sqrt(max(abs(zz - self.h**2 * entry.sigma**2), 1.0)) / self.h
        dr = min(0.02, self.ppw / k)
        n = int(math.ceil((self.r_max - self.r_min) / dr)) + 1
        if self.config.geometry == "full-cylinder":
            return discretize(entry.potential, self.h, self.r_max, n, right="outgoing", r_min=self.r_min,
                              domain="full-line", absorb=self.absorb)
        return discretize(entry.potential, self.h, self.r_max, n, right="outgoing", absorb=self.absorb)


def mode_potential(config: ManifoldConfig, h, sigma):
    """V_j as a callable of r for transverse value sigma."""
    prof = config.profile
    alpha = config.warp_exponent

    def V(r):
        r = np.asarray(r, float)
        f = prof(np.abs(r)) if config.geometry == "full-cylinder" else prof(r)
        fpp = prof.derivative(np.abs(r), 2) if config.geometry == "full-cylinder" else prof.derivative(r, 2)
        return config.potential(r, h) + h * h * fpp / f + h * h * sigma * sigma * (f ** (-alpha) - 1.0)

    return V


def _sup_base(config, h, r_min, r_max):
    r = np.linspace(r_min, r_max, 20001)
    prof = config.profile
    rr = np.abs(r) if config.geometry == "full-cylinder" else r
    return float(np.max(np.abs(config.potential(r, h) + h * h * prof.derivative(rr, 2) / prof(rr))))


def _required_count(spectrum, sigma_needed):
    if spectrum.kind == "circle":
        k = math.floor(sigma_needed * spectrum.L / (2 * math.pi)) + 1
        return 2 * k + 1
    if spectrum.kind == "sphere":
        l = 0
        while math.sqrt(l * (l + spectrum.dim - 1)) <= sigma_needed:
            l += 1
        return math.comb(l + spectrum.dim, spectrum.dim) + math.comb(l + spectrum.dim - 1, spectrum.dim)
    return None


def assemble_modes(config: ManifoldConfig, h, z_window=None, r_max=20.0, r_min=None, ppw=0.2,
                   absorb=None, gap_floor=1.0) -> ModeFamily:
    """Retain every distinct transverse value with
    h^2 sigma^2 <= max Re z + sup|V + h^2 f''/f| + gap_floor."""
    if not h > 0:
        raise InputError("h must be positive")
    if z_window is None:
        z_window = (config.E0, config.E0)
    zmax = max(complex(z).real for z in z_window)
    if r_min is None:
        r_min = -r_max if config.geometry == "full-cylinder" else 0.0
    sup = _sup_base(config, h, r_min, r_max)
    cut = zmax + sup + gap_floor
    es = estar_threshold(config, h)
    modes, tail = [], None
    for idx, (s, mult) in enumerate(config.spectrum.distinct()):
        if h * h * s * s > cut:
            tail = s
            break
        E = config.E0 - h * h * s * s
        modes.append(ModeEntry(idx, s, mult, E, "below-E*" if E <= es else "above-E*",
                               mode_potential(config, h, s)))
    if tail is None:
        need = _required_count(config.spectrum, math.sqrt(cut) / h)
        msg = f"spectrum list too short: needs a value with sigma > {math.sqrt(cut) / h:.4g}"
        if need:
            msg += f" (at least {need} values)"
        raise InputError(msg)
    return ModeFamily(config, float(h), modes, es, tuple(complex(z) for z in z_window), sup, float(tail),
                      r_max=r_max, r_min=r_min, ppw=ppw, absorb=absorb)


def projector_J(family: ModeFamily, cJ=None):
    """Indicator of J = {j : E_j not in [-c_J h, c_J]} on the retained modes."""
    c = family.config.cJ if cJ is None else cJ
    return np.array([not (-c * family.h <= m.E <= c) for m in family.modes])


@dataclass
class FullNorm:
    value: float
    argmax: int  # retained-mode position, or -1 for the tail bound
    per_mode: list
    tail: float
    poles: list = field(default_factory=list)


def full_weighted_norm(family: ModeFamily, query: WeightQuery, restrict=None, left_for_mode=None,
                       truncation=False) -> FullNorm:
    """sup over modes of the mode-wise weighted norms, tail bound included.

    ``restrict`` is a boolean mask over retained modes (None keeps all); the
    tail is kept whenever the restriction is None. ``left_for_mode`` maps a
    ModeEntry to a Weight and overrides the left weight per mode (mode-set
    dependent cutoffs). A singular solve is recorded in ``poles`` and the
    mode is skipped.
    """
    z = complex(query.z)
    vals, poles = [], []
    for pos, m in enumerate(family.modes):
        if restrict is not None and not restrict[pos]:
            vals.append(0.0)
            continue
        left = left_for_mode(m) if left_for_mode else query.left
        op = family.operator(m, z)
        zj = z - family.h**2 * m.sigma**2
        try:
            v = weighted_norm(op, WeightQuery(left, query.right, zj, query.side), method="lanczos",
                              truncation=truncation).value
        except PoleSignal:
            poles.append(pos)
            v = float("nan")
        vals.append(v)
    r = np.linspace(family.r_min, family.r_max, 4001)
    tail_left = left_for_mode(ModeEntry(-1, family.tail_sigma, 1, -np.inf, "below-E*", None)) \
        if left_for_mode else query.left
    tail = family.tail_bound(z, float(np.max(tail_left(r))), float(np.max(query.right(r))))
    finite = [v if np.isfinite(v) else -1.0 for v in vals]
    best = int(np.argmax(finite)) if finite else -1
    value = max(finite) if finite else 0.0
    if tail > value:
        value, best = tail, -1
    return FullNorm(float(value), best, vals, float(tail), poles)


# ---------------------------------------------------------------------------
# high-energy scan
# ---------------------------------------------------------------------------

@dataclass
class ScanReport:
    zs: list
    norms: list
    argmax_sigma: list
    slope: float
    min_upper: float
    median: float
    poles: list = field(default_factory=list)
    findings: list = field(default_factory=list)

    @property
    def sharpness_ok(self):
        return self.min_upper >= 0.5 * self.median

    def to_dict(self):
        return {"zs": self.zs, "norms": self.norms, "argmax_sigma": self.argmax_sigma, "slope": self.slope,
                "min_upper": self.min_upper, "median": self.median, "poles": self.poles,
                "findings": self.findings}

    def columns(self):
        return list(zip(self.zs, self.norms))


def scan_uniform_bound(config: ManifoldConfig, zs, eps=1e-6, chi: Weight | None = None, h=1.0, r_max=14.0,
                       ppw=0.2, slope_tol=0.1) -> ScanReport:
    """‖chi R(z + i eps) chi‖ over real z for a monotone (cigar-type) end."""
    zs = [float(z) for z in zs]
    if chi is None:
        from .halfline import cutoff_weight
        chi = cutoff_weight(0.0, 8.0, 1.0)
    fam = assemble_modes(config, h, z_window=(max(zs),), r_max=r_max, ppw=ppw)
    norms, arg, poles = [], [], []
    for z in zs:
        res = full_weighted_norm(fam, WeightQuery(chi, chi, z + 1j * eps))
        norms.append(res.value)
        arg.append(fam.modes[res.argmax].sigma if res.argmax >= 0 else fam.tail_sigma)
        if res.poles:
            poles.append(z)
    slope = loglog_fit(zs, norms)[0]
    upper = norms[len(norms) // 2:]
    rep = ScanReport(zs, norms, arg, slope, float(min(upper)), float(np.median(norms)), poles)
    if abs(slope) > slope_tol:
        rep.findings.append(f"scan slope {slope:.3f} exceeds {slope_tol}")
    if not rep.sharpness_ok:
        rep.findings.append("norm decays over the upper half of the range")
    if poles:
        rep.findings.append(f"poles detected at {len(poles)} scan points")
    return rep


# ---------------------------------------------------------------------------
# a(h) and the threshold scaling laws
# ---------------------------------------------------------------------------

def default_barrier(r0=5.0, r1=6.0, full_line=False):
    """W_K: 0 for r <= r0, smooth ramp to 1 at r1 (|r| on the line)."""
    def W(r):
        r = np.asarray(r, float)
        x = np.abs(r) if full_line else r
        return smooth_ramp((x - r0) / (r1 - r0))
    return W


def _check_barrier(W, full_line):
    r = np.linspace(-12 if full_line else 0, 12, 4801)
    w = W(r)
    x = np.abs(r) if full_line else r
    if np.any(w < -1e-14) or np.any(w > 1 + 1e-14):
        raise PreconditionError("W_K must take values in [0, 1]")
    if np.any(w[x <= 4.9] > 1e-14) or np.any(w[x >= 6.1] < 1 - 1e-14):
        raise PreconditionError("W_K must vanish near r <= 5 and equal 1 near r >= 6")


def measure_a_of_h(config: ManifoldConfig, hs, W=None, r_max=12.0, ppw=0.2):
    """a(h) = h * ‖(P - i W_K - E_0)^{-1}‖, the sup over modes of unweighted norms."""
    full = config.geometry == "full-cylinder"
    W = W or default_barrier(full_line=full)
    _check_barrier(W, full)
    one = Weight(lambda r: np.ones_like(np.asarray(r, float)), "1")
    table = []
    for h in hs:
        fam = assemble_modes(config, h, r_max=r_max, ppw=ppw, absorb=W)
        res = full_weighted_norm(fam, WeightQuery(one, one, config.E0 + 0j))
        table.append({"h": float(h), "norm": res.value, "a": res.value * h,
                      "argmax_sigma": fam.modes[res.argmax].sigma if res.argmax >= 0 else fam.tail_sigma})
    return table


def fit_a_of_h(table):
    """Constant-vs-logarithmic description of an a(h) table."""
    hs = np.array([t["h"] for t in table])
    a = np.array([t["a"] for t in table])
    L = np.log(1 / hs)
    beta, alpha = np.polyfit(L, a, 1)
    pred = alpha + beta * L
    ss = np.sum((a - a.mean()) ** 2)
    r2 = 1 - np.sum((a - pred) ** 2) / ss if ss > 0 else 1.0
    return {"variation": float(a.max() / a.min()), "log_slope": float(beta), "log_intercept": float(alpha),
            "log_r2": float(r2)}


def check_tcont_scaling(config: ManifoldConfig, hs, s1=1.25, s2=1.25, eps=1e-6, a_table=None, r_max=20.0,
                        ppw=0.2, stability=2.0, exponent=-2.0, exp_tol=0.3):
    """Full weighted norm at E_0 + i eps against (a(h) + 1/h)/h."""
    if not (s1 > 0.5 and s2 > 0.5 and s1 + s2 > 2):
        raise PreconditionError("weights need s1, s2 > 1/2 and s1 + s2 > 2")
    a_table = a_table or measure_a_of_h(config, hs)
    rep = BoundReport("tcont", tol=exp_tol)
    norms = []
    for h, arow in zip(hs, a_table):
        fam = assemble_modes(config, h, r_max=r_max, ppw=ppw)
        res = full_weighted_norm(fam, WeightQuery(power_weight(s1), power_weight(s2), config.E0 + 1j * eps))
        scale = (arow["a"] + 1 / h) / h
        norms.append(res.value)
        rep.records.append({"h": h, "norm": res.value, "a": arow["a"], "C": res.value / scale,
                            "argmax_sigma": fam.modes[res.argmax].sigma if res.argmax >= 0 else fam.tail_sigma})
    cs = np.array([r["C"] for r in rep.records])
    slope, _, r2 = loglog_fit(hs, norms)
    rep.fits = {"exponent": slope, "r2": r2, "C_variation": float(cs.max() / cs.min())}
    if cs.max() / cs.min() > stability:
        rep.findings.append(f"constant varies by {cs.max() / cs.min():.2f}x")
    if exponent is not None and abs(slope - exponent) > exp_tol:
        rep.findings.append(f"exponent {slope:.3f} vs {exponent}")
    return rep


def chi_J_weight(family: ModeFamily, s=1.25, cJ=None, chi_pi=None):
    """Left weight for mode m: (1+r)^-s (1_J(m) chi_Pi(r) + sqrt(V_L + f^{-a} - 1))."""
    c = family.config.cJ if cJ is None else cJ
    cfg = family.config
    chi_pi = chi_pi or smooth_ramp
    alpha = cfg.warp_exponent
    VL = cfg.V_L or (lambda r: np.zeros_like(np.asarray(r, float)))

    def root(r):
        rr = np.abs(r) if cfg.geometry == "full-cylinder" else r
        return np.sqrt(np.maximum(VL(r) + cfg.profile(rr) ** (-alpha) - 1.0, 0.0))

    def for_mode(m):
        inJ = not (-c * family.h <= m.E <= c)
        if inJ:
            return Weight(lambda r: (1 + np.abs(r)) ** (-s) * (chi_pi(r) + root(r)), "chiJ[in]")
        return Weight(lambda r: (1 + np.abs(r)) ** (-s) * root(r), "chiJ[out]")

    return for_mode


def check_taway_scaling(config: ManifoldConfig, hs, s=1.25, cJ=None, eps=1e-6, a_table=None, r_max=20.0,
                        ppw=0.2, exp_tol=0.3):
    """Cut norm ‖(1+r)^-s chi_J R (1+r)^-s‖ (expected (1 + a)/h) next to the
    uncut norm (expected (a + 1/h)/h)."""
    if not s > 0.5:
        raise PreconditionError("s must exceed 1/2")
    a_table = a_table or measure_a_of_h(config, hs)
    rep = BoundReport("taway", tol=exp_tol)
    cut, uncut = [], []
    w = power_weight(s)
    for h, arow in zip(hs, a_table):
        fam = assemble_modes(config, h, r_max=r_max, ppw=ppw)
        z = config.E0 + 1j * eps
        res_c = full_weighted_norm(fam, WeightQuery(w, w, z), left_for_mode=chi_J_weight(fam, s, cJ))
        res_u = full_weighted_norm(fam, WeightQuery(w, w, z))
        cut.append(res_c.value)
        uncut.append(res_u.value)
        rep.records.append({"h": h, "cut": res_c.value, "uncut": res_u.value, "a": arow["a"],
                            "C_cut": res_c.value * h / (1 + arow["a"]),
                            "C_uncut": res_u.value * h / (arow["a"] + 1 / h),
                            "J_excluded": int((~projector_J(fam, cJ)).sum())})
    ec = loglog_fit(hs, cut)
    eu = loglog_fit(hs, uncut)
    rep.fits = {"cut_exponent": ec[0], "cut_r2": ec[2], "uncut_exponent": eu[0], "uncut_r2": eu[2],
                "gap": ec[0] - eu[0]}
    if abs(ec[0] + 1) > exp_tol:
        rep.findings.append(f"cut exponent {ec[0]:.3f} vs -1")
    if abs(eu[0] + 2) > exp_tol:
        rep.findings.append(f"uncut exponent {eu[0]:.3f} vs -2")
    return rep


def threshold_aligned_hs(E0=1.0, ks=(5, 8, 13, 20, 32, 50), L=2 * math.pi):
    """h values at which E_0 = h^2 sigma^2 for the circle value sigma = 2 pi k/L."""
    return [math.sqrt(E0) * L / (2 * math.pi * k) for k in ks]


# ---------------------------------------------------------------------------
# tensor-grid cross-check
# ---------------------------------------------------------------------------

def tensor_grid_check(config: ManifoldConfig, h, z, left: Weight, right: Weight, ny=5, r_max=8.0, n=161):
    """Compare the mode-wise norm with a 2D discretization on r x (circle, ny points).

    Both use Dirichlet truncation at r_max on the same r-grid. The circle is
    discretized by the periodic second difference, whose eigenvalues give the
    explicit transverse spectrum for the mode computation. Returns
    (mode norm, tensor norm).
    """
    from .geometry import transverse_spectrum
    L = config.spectrum.L or 2 * math.pi
    dy = L / ny
    lam = np.array([(2 - 2 * math.cos(2 * math.pi * k / ny)) / dy**2 for k in range(ny)])
    prof = config.profile
    alpha = config.warp_exponent
    dr = r_max / (n - 1)
    r = dr * np.arange(1, n - 1)
    m = r.size
    base = config.potential(r, h) + h * h * prof.derivative(r, 2) / prof(r)
    D2 = (np.diag(-2 * np.ones(m)) + np.diag(np.ones(m - 1), 1) + np.diag(np.ones(m - 1), -1)) / dr**2
    Hr = -h * h * D2 + np.diag(base)
    Dy = (np.diag(-2 * np.ones(ny)) + np.diag(np.ones(ny - 1), 1) + np.diag(np.ones(ny - 1), -1))
    Dy[0, -1] = Dy[-1, 0] = 1
    Dy /= dy**2
    H = np.kron(np.eye(ny), Hr) + h * h * np.kron(-Dy, np.diag(prof(r) ** (-alpha)))
    w1 = np.tile(left(r), ny)
    w2 = np.tile(right(r), ny)
    A = H - z * np.eye(ny * m)
    full = np.linalg.norm(w1[:, None] * np.linalg.solve(A, np.diag(w2)), 2)
    spec = transverse_spectrum("explicit", ny, values=np.sqrt(np.maximum(lam, 0)), dim=1)
    cfg = ManifoldConfig(prof, spec, E0=config.E0, cJ=config.cJ, V_L=config.V_L, V_S=config.V_S,
                         V_W=config.V_W)
    best = 0.0
    for s, _ in cfg.spectrum.distinct():
        Vj = mode_potential(cfg, h, s)
        op = discretize(Vj, h, r_max, n, right="dirichlet")
        best = max(best, weighted_norm(op, WeightQuery(left, right, z - h * h * s * s), method="dense",
                                       truncation=False).value)
    return best, float(full)
