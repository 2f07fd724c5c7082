"""End-to-end acceptance checks, one per criterion.

Each test prints a PASS/FAIL line (collected again in the terminal summary)
and then asserts on the same condition. Run alone with
``pytest tests/test_acceptance.py -v``.
"""
import math

import numpy as np
import pytest

from cylres.continuation import (boundary_point, check_kernel_bounds, dh_metric, free_kernel_oracle,
                                 projdiff_sweep, resonance_free_region, smooth_cutoff, transport,
                                 vodev_convergence)
from cylres.embedded import HourglassSpec, certify_embedded
from cylres.geometry import EndProfile, ManifoldConfig, RepulsivePotential, transverse_spectrum
from cylres.halfline import (agmon_probe, check_explicit_bounds, check_semiclassical, cutoff_weight, explicit_zset,
                             microlocal_sweep, power_weight, semiclassical_zetas)
from cylres.modes import (check_taway_scaling, measure_a_of_h, scan_uniform_bound, tensor_grid_check,
                          threshold_aligned_hs)

pytestmark = [pytest.mark.slow, pytest.mark.acceptance]

SEMI_HS = list(np.geomspace(0.02, 0.2, 6))


def cigar(count=401):
    return ManifoldConfig(EndProfile.bump(0.5, 6.0), transverse_spectrum("circle", count), E0=1.0, cJ=0.5)


def test_c01_explicit_constants(criterion):
    pots = [(RepulsivePotential.power(1e-2, 0.5), 1.0), (RepulsivePotential.power(1.0, 1.0), 0.5),
            (RepulsivePotential.power(1e2, 2.0), 1.0), (RepulsivePotential.power(1e4, 0.5), 0.5),
            (RepulsivePotential.power(1.0, 2.0), 1.0), (RepulsivePotential.bump(1.0, 4.0), 1.0)]
    zs = explicit_zset()
    dist = min(abs(z.imag) if z.real > 0 else abs(z) for z in zs)
    worst, count = 0.0, 0
    for V, delta in pots:
        for rep in check_explicit_bounds(V, delta, zs).values():
            worst = max(worst, rep.worst_ratio)
            count += len(rep.records)
    ok = worst <= 1.02 and len(zs) >= 200 and dist <= 1e-6
    criterion(1, "explicit-constant suite", ok,
              f"{len(pots)} potentials, {len(zs)} z, {count} norms, worst ratio {worst:.4f} (<= 1.02)")
    assert ok


def test_c02_semiclassical_exponents(criterion):
    zetas = semiclassical_zetas()
    free = check_semiclassical(RepulsivePotential.zero(), SEMI_HS, zetas, kinds=("pdbigh", "pdsmallh"))
    vb = check_semiclassical(RepulsivePotential.power(1.0, 1.0), SEMI_HS, zetas, kinds=("pdvboundh",))
    fits = {**free.fits, **vb.fits}
    ok = all(abs(f["exponent"] - f["expected"]) <= 0.15 for f in fits.values())
    detail = ", ".join(f"{k} {f['exponent']:.3f} (want {f['expected']:g})" for k, f in fits.items())
    criterion(2, "semiclassical h-exponents", ok, detail + ", tol 0.15")
    assert ok


def test_c03_free_kernel(criterion):
    res = free_kernel_oracle()
    err = res["error"][res["n"].index(10000)]
    ok = err <= 1e-3 and abs(res["order"] - 2) <= 0.2
    criterion(3, "free-kernel oracle", ok, f"rel. error {err:.2e} at n=1e4, order {res['order']:.3f}")
    assert ok


def test_c04_uniform_high_energy(criterion):
    cfg = cigar(41)
    zs = np.linspace(5.0, 100.0, 100)
    rep = scan_uniform_bound(cfg, zs, eps=1e-6, chi=cutoff_weight(0.0, 8.0, 1.0))
    ok = abs(rep.slope) <= 0.1 and rep.sharpness_ok
    criterion(4, "uniform high-energy bound", ok,
              f"slope {rep.slope:.3f} (|.| <= 0.1), min upper {rep.min_upper:.3g} vs median {rep.median:.3g}")
    assert ok


def test_c05_scaling_gap(criterion):
    cfg = cigar()
    hs = threshold_aligned_hs()
    rep = check_taway_scaling(cfg, hs, a_table=measure_a_of_h(cfg, hs))
    cut, uncut = rep.fits["cut_exponent"], rep.fits["uncut_exponent"]
    ok = abs(uncut + 2) <= 0.3 and abs(cut + 1) <= 0.3
    criterion(5, "uncut vs cutoff scaling", ok, f"uncut {uncut:.3f} (want -2), cut {cut:.3f} (want -1), tol 0.3")
    assert ok


def test_c06_agmon(criterion):
    fit = agmon_probe(cigar(301), [1 / k for k in (5, 8, 13, 20, 32, 50)])
    ok = fit.slope < 0 and fit.r2 >= 0.99 and fit.overlap_variation <= 3
    criterion(6, "Agmon decay", ok,
              f"slope {fit.slope:.3f}, R^2 {fit.r2:.4f}, overlap variation {fit.overlap_variation:.2f}")
    assert ok


def test_c07_propagation(criterion):
    out = microlocal_sweep(cigar(301), [0.1, 0.07, 0.05, 0.035, 0.025, 0.02])
    eo, ei = out["outgoing_exponent"], out["incoming_exponent"]
    ok = eo >= 4 and ei >= -1.5
    criterion(7, "propagation of singularities", ok, f"outgoing exponent {eo:.2f} (>= 4), incoming {ei:.2f}")
    assert ok


def test_c08_embedded(criterion):
    one = certify_embedded(HourglassSpec.recipe(R=2.0, J=5))
    multi = certify_embedded(HourglassSpec.multiwell(3, R=4.0, J=5))
    n_multi = sum(multi.embedded)
    ok = (one.criterion["integral_ok"] and one.criterion["positivity_ok"] and one.passed
          and any(one.embedded) and max(one.residuals) <= 1e-8 and max(one.stability) < 5e-4
          and n_multi >= 2 and multi.passed)
    criterion(8, "embedded eigenvalues", ok,
              f"E {[round(e, 5) for e in one.energies]}, residual {max(one.residuals):.1e}, "
              f"doubling change {max(one.stability):.1e}, multi-well embedded {n_multi}")
    assert ok


def _dh_axioms(n=1000, seed=2024):
    rng = np.random.default_rng(seed)
    h = 0.1
    sig = 2 * math.pi * np.arange(40) / (2 * math.pi)
    start = boundary_point(1.0, h, 1)
    def point():
        z = 1.0 + rng.uniform(-0.5, 0.5) + 1j * rng.uniform(-0.3, 0.3)
        return transport(start, z, sig)
    worst = 0.0
    for _ in range(n):
        p, q, r = point(), point(), point()
        dpq, dqr, dpr = (dh_metric(a, b, sig).value for a, b in ((p, q), (q, r), (p, r)))
        worst = max(worst, dpr - dpq - dqr, abs(dpq - dh_metric(q, p, sig).value),
                    dh_metric(p, p, sig).value)
    return worst


def test_c09_riemann_layer(criterion):
    worst = _dh_axioms()
    pd = projdiff_sweep()
    kb = check_kernel_bounds()
    ok = worst <= 1e-12 and pd.passed and pd.fits["growth"] <= 2 and kb.passed
    growth = max(f["growth"] for f in kb.fits.values())
    criterion(9, "Riemann-surface layer", ok,
              f"d_h axioms worst {worst:.1e} on 1000 triples, projection constant growth {pd.fits['growth']:.2f}, "
              f"kernel-bound growth {growth:.2f} ({len(kb.fits)} families)")
    assert ok


def test_c10_vodev(criterion):
    cfg = ManifoldConfig(EndProfile.bump(0.3, 5.0), transverse_spectrum("circle", 40))
    conv = vodev_convergence(cfg, 1.0, -1.0, -2.0, smooth_cutoff(-2, 10, 1.0), smooth_cutoff(-2, 8, 1.0), dr=0.02)
    ok = conv["fine"] <= 1e-4 and abs(conv["order"] - 2) <= 0.3
    criterion(10, "two-resolvent identity", ok,
              f"discrepancy {conv['fine']:.2e} at dr=0.01, {conv['coarse']:.2e} at dr=0.02, order {conv['order']:.2f}")
    assert ok


def test_c11_resonance_free_region(criterion):
    rep = resonance_free_region(cigar(), threshold_aligned_hs())
    inside = sum(1 for r in rep.resonances
                 for row in rep.table if row["h"] == r.location.h and r.dh < rep.cprime * row["mu"])
    ok = rep.passed and inside == 0 and rep.chat_variation <= 2
    rows = "; ".join(f"h={r['h']:.3g} mu={r['mu']:.3g} C_hat={r['chat']:.3g}" for r in rep.table)
    criterion(11, "resonance-free region", ok,
              f"C'={rep.cprime:.3g}, C_hat variation {rep.chat_variation:.2f}, {len(rep.resonances)} resonances "
              f"found, {inside} inside; {rows}")
    assert ok


def test_c12_direct_sum(criterion):
    a, b = tensor_grid_check(cigar(), 0.5, 1.0 + 0.1j, cutoff_weight(0, 4, 1), power_weight(1))
    rel = abs(a - b) / abs(b)
    ok = rel <= 1e-6
    criterion(12, "direct-sum exactness", ok, f"mode norm {a:.10g}, tensor norm {b:.10g}, rel. diff {rel:.1e}")
    assert ok
