import math

import numpy as np
import pytest

from cylres.geometry import RepulsivePotential
from cylres.halfline import (Factorization, PoleSignal, PreconditionError, WeightQuery, apply_resolvent,
                             check_explicit_bounds, cinf_step, cutoff_weight, discretize, explicit_zset,
                             indicator_weight, loglog_fit, operator_norm, pdbig_rhs, pdsmall_rhs, pdvbound_rhs,
                             power_weight, semiclassical_norm, weighted_norm)


def free(h=1.0, r_max=10.0, n=401, right="dirichlet"):
    return discretize(lambda r: np.zeros_like(r), h, r_max, n, right=right)


class TestDiscretization:
    def test_three_point_rows(self):
        V = lambda r: 1.0 + r
        op = discretize(V, 0.5, 4.0, 9, right="dirichlet")
        A = op.dense()
        c = 0.25 / op.dr**2
        assert np.allclose(np.diag(A), 2 * c + V(op.r))
        assert np.allclose(np.diag(A, 1), -c) and np.allclose(np.diag(A, -1), -c)
        assert op.size == 7

    def test_outgoing_keeps_last_node(self):
        assert free(n=11, right="outgoing").size == 10

    def test_dirichlet_eigenvalues_converge(self):
        L = math.pi
        op = discretize(lambda r: 0 * r, 1.0, L, 2001)
        ev = np.sort(np.linalg.eigvalsh(op.dense().real))[:4]
        assert np.allclose(ev, [1, 4, 9, 16], rtol=1e-5)

    @pytest.mark.parametrize("kw", [{"n": 2}, {"right": "periodic"}])
    def test_bad_arguments(self, kw):
        args = {"n": 11, "right": "dirichlet", **kw}
        with pytest.raises(ValueError):
            discretize(lambda r: 0 * r, 1.0, 1.0, args["n"], right=args["right"])

    def test_negative_absorber_rejected(self):
        with pytest.raises(ValueError):
            discretize(lambda r: 0 * r, 1.0, 1.0, 11, absorb=lambda r: -np.ones_like(r))

    def test_array_operator_cannot_regrid(self):
        op = discretize(np.zeros(11), 1.0, 1.0, 11)
        with pytest.raises(PreconditionError):
            op.regrid(n=21)


class TestResolvent:
    def test_contraction_below_spectrum(self):
        op = free()
        rhs = np.random.default_rng(0).standard_normal(op.size)
        u = apply_resolvent(op, -1.0, rhs)
        assert np.linalg.norm(u) <= np.linalg.norm(rhs)

    def test_zero_rhs(self):
        op = free()
        assert not np.any(apply_resolvent(op, 0.3 + 0.1j, np.zeros(op.size)))

    def test_residual_small(self):
        op = discretize(lambda r: np.exp(-r), 0.3, 10.0, 501, right="outgoing")
        rhs = np.ones(op.size)
        fac = Factorization(op, 0.5 + 1e-6j)
        assert fac.residual(fac.solve(rhs), rhs) < 1e-12

    def test_transparent_closure_is_exact(self):
        # with V = 0 beyond r=10 the short grid reproduces the long one node by node
        V = lambda r: np.where(r < 3, 1.0, 0.0)
        short = discretize(V, 0.5, 10.0, 501, right="outgoing")
        long = discretize(V, 0.5, 20.0, 1001, right="outgoing")
        z = 0.7 + 1e-3j
        rhs_s = np.where(short.r < 2, 1.0, 0.0)
        rhs_l = np.where(long.r < 2, 1.0, 0.0)
        us = apply_resolvent(short, z, rhs_s)
        ul = apply_resolvent(long, z, rhs_l)
        assert np.allclose(us, ul[: us.size], atol=1e-11)

    def test_free_green_function(self):
        # (-d^2 - k^2)^{-1} with Dirichlet at 0, outgoing: G(r, s) = sin(k r<) e^{i k r>} / k
        k, n = 1.3, 8001
        op = free(r_max=8.0, n=n, right="outgoing")
        s_idx = 2000
        rhs = np.zeros(op.size)
        rhs[s_idx] = 1.0 / op.dr
        u = apply_resolvent(op, k * k + 0j, rhs)
        r, s = op.r, op.r[s_idx]
        G = np.sin(k * np.minimum(r, s)) * np.exp(1j * k * np.maximum(r, s)) / k
        assert np.max(np.abs(u - G)) < 1e-5


class TestWeightedNorm:
    def test_free_norm_below_one_at_minus_one(self):
        res = weighted_norm(free(right="outgoing"), WeightQuery(power_weight(1), power_weight(1), -1.0))
        assert res.value <= 1.0
        assert res.truncation < 1e-6

    def test_adjoint_query_same_norm(self):
        op = discretize(lambda r: 2.0 / (1 + r) ** 2, 0.4, 15.0, 751, right="outgoing")
        q = WeightQuery(power_weight(0.7), indicator_weight(1.0, 5.0), 0.9 + 1e-6j)
        a = weighted_norm(op, q, truncation=False).value
        b = weighted_norm(op, q.adjoint(), truncation=False).value
        assert a == pytest.approx(b, rel=1e-8)

    def test_dense_and_lanczos_agree(self):
        op = discretize(lambda r: 1.0 / (1 + r), 0.5, 10.0, 301, right="outgoing")
        q = WeightQuery(power_weight(1), power_weight(1), 0.4 + 0.01j)
        d = weighted_norm(op, q, method="dense", truncation=False).value
        l = weighted_norm(op, q, method="lanczos", truncation=False).value
        assert d == pytest.approx(l, rel=1e-8)

    def test_disjoint_supports_trivial(self):
        q = WeightQuery(indicator_weight(100, 200), power_weight(1), -1.0)
        assert weighted_norm(free(), q).value == 0.0

    def test_operator_norm_matches_svd(self):
        M = np.random.default_rng(1).standard_normal((30, 20)) + 1j * np.random.default_rng(2).standard_normal((30, 20))
        got = operator_norm(lambda x: M @ x, lambda y: M.conj().T @ y, M.shape)
        assert got == pytest.approx(np.linalg.norm(M, 2), rel=1e-9)


class TestExplicitConstants:
    def test_rhs_arithmetic(self):
        assert pdbig_rhs(4.0, 1.0, 1.0) == pytest.approx(2.41421356, rel=1e-8)
        assert pdbig_rhs(1.0, 1.0, 1.0) == pytest.approx(4.82842712, rel=1e-8)
        assert pdsmall_rhs(1.0, 1.0) == pytest.approx(4.82842712, rel=1e-8)
        assert pdvbound_rhs(1.0, 1.0) == pytest.approx(4.0, rel=1e-12)

    def test_zset_shape(self):
        zs = explicit_zset()
        assert len(zs) == 200
        assert min(abs(z.imag) for z in zs if z.real > 0) <= 1e-6
        mags = sorted({round(abs(z), 9) for z in zs})
        assert mags[0] == pytest.approx(1e-2) and mags[-1] == pytest.approx(1e2)

    def test_bounds_hold_on_small_set(self):
        zs = explicit_zset(count=10, zmin=0.1, zmax=10.0)
        reps = check_explicit_bounds(RepulsivePotential.power(1.0, 1.0), 1.0, zs)
        assert set(reps) == {"pdbig", "pdsmall", "pdvbound"}
        for rep in reps.values():
            assert rep.records and rep.worst_ratio <= 1.0


class TestSemiclassical:
    @pytest.mark.parametrize("zeta", [0.5 + 1e-6j, 0.3j, -0.2 + 0j])
    def test_rescaling_identity(self, zeta):
        V = RepulsivePotential.power(1.0, 1.0)
        w = power_weight(1)
        a = semiclassical_norm(V, 0.2, zeta, w, w, r_max=30.0)
        b = semiclassical_norm(V, 0.2, zeta, w, w, r_max=30.0, rescaled=True)
        assert a == pytest.approx(b, rel=1e-9)


def test_loglog_fit_exact_power_law():
    x = np.geomspace(0.01, 1, 7)
    slope, icpt, r2 = loglog_fit(x, 3 * x**-1.5)
    assert slope == pytest.approx(-1.5) and icpt == pytest.approx(math.log(3)) and r2 == pytest.approx(1.0)


def test_cinf_step_and_cutoff():
    assert cinf_step(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])).tolist() == pytest.approx([0, 0, 0.5, 1, 1])
    chi = cutoff_weight(0.0, 4.0, 1.0)
    assert chi(np.array([-2.0, 0.0, 2.0, 4.0, 6.0])).tolist() == pytest.approx([0, 1, 1, 1, 0])


def test_pole_signal_is_arithmetic_error():
    assert issubclass(PoleSignal, ArithmeticError)
