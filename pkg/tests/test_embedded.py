import math

import numpy as np
import pytest
from scipy.optimize import brentq

from cylres.embedded import (HourglassSpec, build_VJ, certify_embedded, embedded_criterion, find_bound_states,
                             j_threshold, square_well_count)
from cylres.geometry import GeometryError, InputError


def grid(box=12.0, dr=0.004):
    n = int(round(2 * box / dr))
    return -box + (2 * box / n) * np.arange(1, n)


class TestPotential:
    def test_flat_neck_without_well_is_zero(self):
        spec = HourglassSpec(c=0.0, wells=())
        assert not np.any(build_VJ(spec, np.linspace(-3, 3, 101)))

    def test_trivial_case_fails_criterion(self):
        rep = embedded_criterion(HourglassSpec(c=0.0, wells=()))
        assert not rep.nontrivial and not rep.passed

    def test_recipe_hits_budget(self):
        spec = HourglassSpec.recipe(R=2.0, J=5, budget=0.2)
        assert 0 < spec.c < 0.5
        rep = embedded_criterion(spec)
        assert rep.passed
        assert rep.threshold == -25.0

    @pytest.mark.parametrize("kw,err", [({"c": 1.0}, GeometryError), ({"R": 0.0}, InputError),
                                        ({"wells": ((1.5, 0.5, 0.5),)}, InputError),
                                        ({"wells": ((0.0, 0.2, 0.9),)}, InputError)])
    def test_spec_errors(self, kw, err):
        with pytest.raises(err):
            HourglassSpec(**kw)


class TestBoundStates:
    def test_nonnegative_potential_has_none(self):
        r = grid()
        assert find_bound_states(np.zeros_like(r), r) == []
        assert find_bound_states(np.exp(-r * r), r) == []

    @pytest.mark.parametrize("V0,a,count", [(10.0, 1.5, 2), (30.0, 2.5, 5), (3.0, 1.0, 1)])
    def test_square_well_counts(self, V0, a, count):
        r = grid(box=20.0)
        states = find_bound_states(np.where(np.abs(r) < a / 2, -V0, 0.0), r)
        assert square_well_count(V0, a) == count
        assert len(states) == count

    def test_ground_state_even_and_nodeless(self):
        r = grid()
        st = find_bound_states(np.where(np.abs(r) < 1, -5.0, 0.0), r)[0]
        assert st.nodes == 0
        assert np.allclose(st.vector, st.vector[::-1], atol=1e-8)

    def test_ground_energy_matches_even_state_condition(self):
        # even states of the finite well solve k tan(k a/2) = kappa
        V0, a = 30.0, 2.5
        r = grid(box=20.0, dr=0.002)
        lam = find_bound_states(np.where(np.abs(r) < a / 2, -V0, 0.0), r)[0].lam

        def cond(mu):
            k = math.sqrt(V0 + mu)
            return k * math.tan(k * a / 2) - math.sqrt(-mu)

        exact = brentq(cond, -V0 + 1e-9, (math.pi / a) ** 2 - V0 - 1e-9)
        assert lam == pytest.approx(exact, rel=2e-4)

    def test_nonuniform_grid_rejected(self):
        with pytest.raises(InputError):
            find_bound_states(np.zeros(4), np.array([0.0, 1.0, 3.0, 4.0]))


@pytest.mark.slow
def test_recipe_certified_embedded():
    rep = certify_embedded(HourglassSpec.recipe(R=2.0, J=5))
    assert rep.passed and rep.embedded and all(rep.embedded)
    assert max(rep.residuals) <= 1e-8
    assert rep.multiplicity == 2


def test_j_threshold_monotone_family():
    assert j_threshold(lambda J: HourglassSpec.recipe(R=2.0, J=J), [0, 1, 2, 3]) == 1
