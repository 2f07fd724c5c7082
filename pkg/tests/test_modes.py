import math

import numpy as np
import pytest

from cylres.geometry import EndProfile, InputError, ManifoldConfig, effective_potential, transverse_spectrum
from cylres.halfline import PreconditionError, WeightQuery, cutoff_weight, power_weight, weighted_norm
from cylres.modes import (assemble_modes, full_weighted_norm, mode_potential, projector_J, tensor_grid_check,
                          threshold_aligned_hs)


def cigar(count=41, **kw):
    return ManifoldConfig(EndProfile.bump(0.5, 6.0), transverse_spectrum("circle", count), **kw)


class TestAssemble:
    def test_retention_rule(self):
        fam = assemble_modes(cigar(), 1.0)
        cut = fam.config.E0 + fam.sup_base + 1.0
        assert all(m.sigma**2 <= cut for m in fam.modes)
        assert fam.tail_sigma**2 > cut
        assert fam.modes[0].E == pytest.approx(1.0)
        assert fam.J_max + 1 == sum(m.multiplicity for m in fam.modes)

    def test_short_spectrum_names_required_count(self):
        with pytest.raises(InputError, match="at least"):
            assemble_modes(cigar(count=3), 0.1)

    def test_nonpositive_h(self):
        with pytest.raises(InputError):
            assemble_modes(cigar(), 0.0)

    def test_tags_follow_estar(self):
        fam = assemble_modes(cigar(count=401), 0.1)
        for m in fam.modes:
            assert (m.tag == "below-E*") == (m.E <= fam.estar)

    def test_mode_potential_matches_effective(self):
        cfg = cigar()
        r = np.linspace(0, 10, 501)
        sig = cfg.spectrum.values
        assert np.allclose(mode_potential(cfg, 0.3, sig[5])(r), effective_potential(cfg, 0.3, 5, r), rtol=1e-13)

    def test_projector_excludes_window(self):
        fam = assemble_modes(cigar(count=401), 0.1)
        mask = projector_J(fam)
        for keep, m in zip(mask, fam.modes):
            assert keep == (not (-0.05 <= m.E <= 0.5))


class TestFullNorm:
    def test_single_mode_restriction_equals_mode_norm(self):
        fam = assemble_modes(cigar(), 1.0)
        w = power_weight(1)
        z = 0.6 + 0.05j
        mask = [False] * len(fam.modes)
        mask[0] = True
        got = full_weighted_norm(fam, WeightQuery(w, w, z), restrict=mask)
        op = fam.operator(fam.modes[0], z)
        want = weighted_norm(op, WeightQuery(w, w, z), method="dense", truncation=False).value
        assert got.value == pytest.approx(want, rel=1e-8)

    def test_tail_bound_included(self):
        fam = assemble_modes(cigar(), 1.0)
        res = full_weighted_norm(fam, WeightQuery(power_weight(1), power_weight(1), -1.0))
        assert res.tail == pytest.approx(1.0 / (fam.tail_sigma**2 + 1.0 - fam.sup_base))
        assert res.value >= max(res.per_mode)

    def test_tail_certificate_refuses_large_z(self):
        fam = assemble_modes(cigar(), 1.0)
        with pytest.raises(PreconditionError):
            fam.tail_bound(1e6)


def test_threshold_aligned_hs_hit_thresholds():
    for h, k in zip(threshold_aligned_hs(), (5, 8, 13, 20, 32, 50)):
        assert h * h * k * k == pytest.approx(1.0, rel=1e-14)


def test_tensor_grid_agrees_with_modes():
    a, b = tensor_grid_check(cigar(), 0.5, 1.0 + 0.1j, cutoff_weight(0, 4, 1), power_weight(1), n=81)
    assert a == pytest.approx(b, rel=1e-9)
