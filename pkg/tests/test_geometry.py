import math

import numpy as np
import pytest
import sympy as sp

from cylres.geometry import (EndProfile, GeometryError, InputError, ManifoldConfig, RepulsivePotential,
                             ResolutionError, compact_bump, effective_potential, energy_level, estar_threshold,
                             transverse_spectrum, validate_profile)

GRID = np.linspace(0.0, 60.0, 6001)


def circle_config(profile, count=21, **kw):
    return ManifoldConfig(profile, transverse_spectrum("circle", count), **kw)


class TestValidateProfile:
    def test_power_family_with_m_equal_delta0_passes(self):
        rep = validate_profile(EndProfile.power(c=1.0, m=1.0, delta0=1.0), GRID)
        assert rep.passed, rep.to_dict()

    def test_constant_profile_fails_below_six(self):
        rep = validate_profile(EndProfile.constant(), GRID)
        assert not rep.passed
        assert dict((n, ok) for n, ok, _ in rep.checks)["f < 1 on [0,6)"] is False

    def test_bump_passes_with_searched_delta0(self):
        prof = EndProfile("bump", c=0.5, b=6.0)
        object.__setattr__(prof, "delta0", None)  # force the grid line search
        rep = validate_profile(prof, GRID)
        assert rep.passed
        assert rep.delta0 > 0

    def test_bump_gap_does_not_underflow_check(self):
        # 1 - f rounds to 0 just below r = b; the strict check must not see that
        rep = validate_profile(EndProfile.bump(0.5, 6.0), np.linspace(0, 60, 600001))
        assert rep.passed

    def test_power_delta0_too_large_fails_monotone_gap(self):
        rep = validate_profile(EndProfile.power(c=0.5, m=1.0, delta0=3.0), GRID)
        assert not dict((n, ok) for n, ok, _ in rep.checks)["monotone gap"]

    def test_delta0_margin_nonnegative_on_grid(self):
        prof = EndProfile.power(0.5, 2.0)
        f, fp = prof(GRID), prof.derivative(GRID, 1)
        assert np.all(fp - prof.delta0 * (1 - f) / (1 + GRID) >= -1e-15)

    @pytest.mark.parametrize("kw", [{"c": 0.5, "m": 0.0}, {"c": 0.0, "m": 1.0}, {"c": 1.5, "m": 1.0}])
    def test_power_parameter_errors(self, kw):
        with pytest.raises(InputError):
            EndProfile.power(**kw)

    def test_short_grid_rejected(self):
        with pytest.raises(InputError):
            validate_profile(EndProfile.power(), np.linspace(0, 5, 50))

    def test_tabulated_matches_closed_form(self, tmp_path):
        r = np.linspace(0, 30, 3001)
        path = tmp_path / "f.dat"
        np.savetxt(path, np.column_stack([r, 1 - 0.5 * (1 + r) ** -2]))
        tab = EndProfile.load(path)
        ref = EndProfile.power(0.5, 2.0)
        x = np.linspace(0.5, 25, 50)
        for k in range(3):
            assert np.allclose(tab.derivative(x, k), ref.derivative(x, k), rtol=1e-5, atol=1e-7)

    def test_tabulated_nonfinite_rejected(self):
        with pytest.raises(InputError):
            EndProfile.from_table(np.arange(10.0), [1.0] * 9 + [float("nan")])


class TestEffectivePotential:
    def test_symbolic_oracle_power_profile(self):
        r = sp.symbols("r")
        f = 1 - sp.Rational(1, 2) * (1 + r) ** -2
        h, s = sp.Rational(1, 10), 10
        expr = h**2 * sp.diff(f, r, 2) / f + h**2 * s**2 * (f ** -4 - 1)
        want = float(expr.subs(r, 0))
        cfg = ManifoldConfig(EndProfile.power(0.5, 2.0), transverse_spectrum("explicit", 2, values=[0, 10], dim=1))
        got = effective_potential(cfg, 0.1, 1, np.array([0.0]))[0]
        assert got == pytest.approx(want, rel=1e-13)

    def test_tail_vanishes_where_f_is_one(self):
        cfg = circle_config(EndProfile.bump(0.5, 6.0))
        r = np.linspace(6.0, 20.0, 200)
        for j in (0, 3, 10):
            assert np.all(effective_potential(cfg, 0.2, j, r) == 0.0)

    def test_zero_mode_is_curvature_term(self):
        prof = EndProfile.power(0.5, 1.0)
        cfg = circle_config(prof)
        r = np.linspace(0, 10, 101)
        assert np.allclose(effective_potential(cfg, 0.3, 0, r), 0.09 * prof.derivative(r, 2) / prof(r), rtol=1e-14)

    def test_affine_in_sigma_squared(self):
        prof = EndProfile.power(0.5, 1.0)
        cfg = ManifoldConfig(prof, transverse_spectrum("sphere", 10, dim=2), V_L=RepulsivePotential.power(2.0, 1.0))
        r = np.linspace(0, 10, 101)
        sig = cfg.spectrum.values
        h = 0.2
        diff = effective_potential(cfg, h, 9, r) - effective_potential(cfg, h, 1, r)
        want = h**2 * (sig[9] ** 2 - sig[1] ** 2) * (prof(r) ** (-cfg.warp_exponent) - 1)
        assert np.allclose(diff, want, rtol=1e-12, atol=1e-15)

    def test_coarse_grid_on_bump_is_resolution_error(self):
        cfg = circle_config(EndProfile.bump(0.5, 2.0))
        with pytest.raises(ResolutionError):
            effective_potential(cfg, 0.1, 0, np.linspace(0, 10, 5))

    def test_mode_index_out_of_range(self):
        with pytest.raises(InputError):
            effective_potential(circle_config(EndProfile.power()), 0.1, 99, GRID)


@pytest.mark.parametrize("args,want", [((1, 0.1, 0), 1.0), ((1, 0.1, 10), 0.0), ((1, 0.05, 10), 0.75)])
def test_energy_level(args, want):
    assert energy_level(*args) == pytest.approx(want, abs=1e-15)


def test_energy_level_decreasing_in_sigma():
    sig = transverse_spectrum("circle", 21).values
    E = [energy_level(1.0, 0.1, s) for s in np.unique(sig)]
    assert np.all(np.diff(E) < 0)


class TestEstar:
    def test_closed_form_power(self):
        cfg = circle_config(EndProfile.power(0.5, 2.0), E0=1.0, cJ=0.5)
        f5 = 1 - 0.5 / 36
        want = min(0.5, 1.0 * (1 - f5**4))
        assert estar_threshold(cfg, 0.1) == pytest.approx(want, rel=1e-10)

    def test_cj_when_wall_is_tall(self):
        cfg = circle_config(EndProfile.power(1.0, 0.5), E0=1.0, cJ=0.05)
        assert estar_threshold(cfg, 0.1) == 0.05

    def test_degrades_as_f5_tends_to_one(self):
        vals = [estar_threshold(circle_config(EndProfile.power(c, 2.0), E0=1.0), 0.1) for c in (0.5, 0.1, 0.01)]
        assert vals[0] > vals[1] > vals[2] > 0

    def test_f5_equal_one_rejected(self):
        with pytest.raises(GeometryError):
            estar_threshold(circle_config(EndProfile.bump(0.5, 4.0)), 0.1)


class TestSpectrum:
    def test_circle(self):
        assert transverse_spectrum("circle", 5).sigma == (0.0, 1.0, 1.0, 2.0, 2.0)

    def test_sphere(self):
        assert np.allclose(transverse_spectrum("sphere", 4, dim=2).values ** 2, [0, 2, 2, 2])

    def test_explicit_sorted(self):
        assert transverse_spectrum("explicit", 3, values=[3.7, 0, 1.5]).sigma == (0.0, 1.5, 3.7)

    def test_distinct_multiplicities(self):
        assert transverse_spectrum("sphere", 9, dim=2).distinct() == [(0.0, 1), (math.sqrt(2), 3), (math.sqrt(6), 5)]

    @pytest.mark.parametrize("kind,kw", [("torus", {}), ("explicit", {}), ("explicit", {"values": [-1.0]})])
    def test_errors(self, kind, kw):
        with pytest.raises(InputError):
            transverse_spectrum(kind, 3, **kw)


class TestPotentials:
    @pytest.mark.parametrize("V", [RepulsivePotential.power(10.0, 0.5), RepulsivePotential.bump(2.0, 3.0),
                                   RepulsivePotential.combine(RepulsivePotential.power(1, 1),
                                                              RepulsivePotential.bump(1, 4))])
    def test_certified_repulsive(self, V):
        r = np.linspace(0, 40, 4001)
        v, dv = V(r), V.derivative(r)
        assert np.all(v >= 0) and np.all(np.diff(v) <= 1e-15)
        assert np.all(dv <= -V.deltaV * v / (1 + r) + 1e-12)

    def test_negative_amplitude_rejected(self):
        with pytest.raises(InputError):
            RepulsivePotential.power(-1.0)

    def test_short_range_support_contract(self):
        with pytest.raises(InputError):
            ManifoldConfig(EndProfile.power(), transverse_spectrum("circle", 3), V_S=compact_bump(1.0, 2.0, 7.0))

    def test_tail_free_detection(self):
        assert circle_config(EndProfile.bump(0.5, 6.0)).tail_is_free(6.0)
        assert not circle_config(EndProfile.power(0.5, 1.0)).tail_is_free(6.0)
