"""Limit processes U and the composed error limit."""

import math

import numpy as np
import pytest

from artifact.errors import ContractError, DomainError
from artifact.fbm import sample_fbm, sample_fbm_batch
from artifact.flow import directional_derivative, reference_solution
from artifact.limits import (
    Integrator, Regime, brownian_increments, error_limit_process, limit_spec, limit_to_csv,
    simulate_limit_U, theoretical_rate,
)
from artifact.models import get_model
from artifact.perturbation import coefficient_functions
from artifact.variations import sigma_qH


class TestTheoreticalRate:
    @pytest.mark.parametrize("scheme,H,gamma", [
        ("euler", 0.75, 0.5), ("milstein", 0.4, 0.6), ("cn", 0.5, 1.0),
        ("cn", 0.45, 0.85), ("milstein", 0.5, 1.0), ("euler", 0.6, 0.2),
    ])
    def test_examples(self, scheme, H, gamma):
        got = theoretical_rate(scheme, H)
        print(scheme, H, got)
        assert got == pytest.approx(gamma, abs=1e-15)

    @pytest.mark.parametrize("scheme,H", [
        ("euler", 0.5), ("euler", 1.0), ("milstein", 1 / 3), ("milstein", 0.6),
        ("cn", 0.3), ("cn", 0.51),
    ])
    def test_out_of_range(self, scheme, H):
        with pytest.raises(DomainError, match="needs H in"):
            theoretical_rate(scheme, H)


class TestSpec:
    def test_euler(self):
        spec = limit_spec("euler", get_model("sinh"), 0.75)
        assert spec.regime is Regime.SMOOTH and not spec.weak
        assert [(t.integrator, t.name) for t in spec.terms] == [(Integrator.TIME, "f2")]

    def test_milstein_regimes(self):
        rough = limit_spec("milstein", get_model("trig"), 0.4)
        assert not rough.weak and [t.coefficient for t in rough.terms] == [3.0]
        half = limit_spec("milstein", get_model("trig"), 0.5)
        assert half.weak and half.regime is Regime.BROWNIAN and len(half.terms) == 5

    def test_cn_regimes(self):
        rough = limit_spec("cn", get_model("trig"), 0.45)
        assert rough.weak and rough.regime is Regime.ROUGH
        (term,) = rough.terms
        assert term.integrator is Integrator.ITO_W
        assert term.coefficient == sigma_qH(3, 0.45)
        half = limit_spec("cn", get_model("trig"), 0.5)
        assert {t.integrator for t in half.terms} == set(Integrator)
        assert [t.coefficient for t in half.terms] == [1.0, math.sqrt(6.0), 3.0, 1 / math.sqrt(12.0)]

    def test_needs_ellipticity(self):
        with pytest.raises(ContractError):
            limit_spec("cn", get_model("constant", {"c": 0.0}), 0.45)


def _reference(model, H, M=12, seed=0, index=0, xi=0.5):
    path = sample_fbm(M, H, seed=seed, index=index)
    return reference_solution(model, xi, path.values), path


class TestReductions:
    def test_cn_constant_sigma(self):
        model = get_model("linear-drift")
        ref, path = _reference(model, 0.45)
        U = simulate_limit_U(limit_spec("cn", model, 0.45), ref.x, path.values, seed=1)
        assert np.all(U == 0.0)

    def test_euler_linear_drift(self):
        model = get_model("linear-drift")
        ref, path = _reference(model, 0.75)
        U = simulate_limit_U(limit_spec("euler", model, 0.75), ref.x, seed=1)
        assert np.all(U == 0.0)

    def test_dropped_terms_bitwise(self):
        # b = 0 kills psi and g1, leaving exactly the two f3 terms
        model = get_model("trig", {"drift": "zero"})
        ref, path = _reference(model, 0.5, M=10)
        spec = limit_spec("cn", model, 0.5)
        n = ref.x.size - 1
        dW = brownian_increments(n, seed=2)
        U = simulate_limit_U(spec, ref.x, path.values, dW=dW, dW_tilde=np.full(n, np.nan))
        f3 = coefficient_functions("cn", model).f[3](ref.x)
        expect = np.zeros(n + 1)
        expect[1:] += math.sqrt(6.0) * np.cumsum(f3[:-1] * dW)
        expect[1:] += 3.0 * np.cumsum(0.5 * (f3[1:] + f3[:-1]) * np.diff(path.values))
        assert U.tobytes() == expect.tobytes()

    def test_euler_quadrature(self):
        model = get_model("sinh")
        ref, _ = _reference(model, 0.75, M=10)
        U = simulate_limit_U(limit_spec("euler", model, 0.75), ref.x)
        f2 = -0.5 * model.sigma(ref.x, 1)
        expect = np.concatenate([[0.0], np.cumsum(0.5 * (f2[1:] + f2[:-1]) / (ref.x.size - 1))])
        assert np.max(np.abs(U - expect)) <= 1e-15

    def test_cn_brownian_conditional_mean(self):
        # given B, E[U_1] = 3 int f3(X) o dB when b = 0
        model = get_model("trig", {"drift": "zero"})
        ref, path = _reference(model, 0.5, M=9, seed=3)
        spec = limit_spec("cn", model, 0.5)
        f3 = coefficient_functions("cn", model).f[3](ref.x)
        target = 3.0 * np.sum(0.5 * (f3[1:] + f3[:-1]) * np.diff(path.values))
        N = 2000
        ends = np.array([simulate_limit_U(spec, ref.x, path.values, seed=4, index=i)[-1]
                         for i in range(N)])
        se = ends.std(ddof=1) / math.sqrt(N)
        print(f"mean U_1 = {ends.mean():.5f}, target {target:.5f}, se {se:.5f}")
        assert abs(ends.mean() - target) <= 3 * se

    def test_needs_driver_for_symmetric_term(self):
        model = get_model("trig")
        ref, _ = _reference(model, 0.5, M=6)
        with pytest.raises(ContractError):
            simulate_limit_U(limit_spec("cn", model, 0.5), ref.x)

    def test_noise_size(self):
        model = get_model("trig")
        ref, path = _reference(model, 0.45, M=6)
        with pytest.raises(ContractError):
            simulate_limit_U(limit_spec("cn", model, 0.45), ref.x, dW=np.zeros(3))

    def test_seeded_streams(self):
        model = get_model("trig")
        ref, path = _reference(model, 0.45, M=8)
        spec = limit_spec("cn", model, 0.45)
        a = simulate_limit_U(spec, ref.x, seed=5, index=2)
        b = simulate_limit_U(spec, ref.x, seed=5, index=2)
        c = simulate_limit_U(spec, ref.x, seed=5, index=3)
        assert a.tobytes() == b.tobytes() and not np.array_equal(a, c)


class TestErrorLimit:
    def test_driftless(self):
        model = get_model("sinh", {"drift": "zero"})
        ref, _ = _reference(model, 0.45, M=8)
        U = np.sin(5 * ref.times)
        assert np.array_equal(error_limit_process(model, ref, U), model.sigma(ref.x) * U)

    def test_zero_U(self):
        model = get_model("sinh")
        ref, _ = _reference(model, 0.45, M=8)
        assert np.all(error_limit_process(model, ref, np.zeros_like(ref.x)) == 0.0)

    @pytest.mark.parametrize("H", [0.4, 0.75])
    def test_matches_directional_derivative(self, H):
        # the Lipschitz form of the derivative is an independent quadrature
        model = get_model("sinh")
        ref, path = _reference(model, H, M=14, seed=6)
        knots = np.linspace(0, 1, 9)
        U = np.interp(ref.times, knots, np.array([0, 0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6, -0.1]))
        ours = error_limit_process(model, ref, U)
        integral = directional_derivative(model, 0.5, path.values, U, reference=ref)
        lip = directional_derivative(model, 0.5, path.values, U, form="lipschitz", reference=ref)
        print(f"H={H}: |vs integral form| {np.max(np.abs(ours - integral)):.2e}  "
              f"|vs Lipschitz form| {np.max(np.abs(ours - lip)):.2e}")
        assert np.max(np.abs(ours - integral)) <= 1e-12
        assert np.max(np.abs(ours - lip)) <= 1e-7

    def test_grid_mismatch(self):
        model = get_model("sinh")
        ref, _ = _reference(model, 0.45, M=6)
        with pytest.raises(ContractError):
            error_limit_process(model, ref, np.zeros(10))

    def test_csv(self, tmp_path):
        model = get_model("sinh")
        ref, _ = _reference(model, 0.75, M=4)
        U = simulate_limit_U(limit_spec("euler", model, 0.75), ref.x)
        limit_to_csv(tmp_path / "u.csv", ref.times, U, error_limit_process(model, ref, U))
        lines = (tmp_path / "u.csv").read_text().splitlines()
        assert lines[0] == "t,U,error_limit" and len(lines) == 18


class TestIndependence:
    N = 10_000

    def _cov(self, x, y):
        prod = (x - x.mean()) * (y - y.mean())
        return prod.mean(), prod.std(ddof=1) / math.sqrt(x.size)

    def test_fbm_and_W(self):
        B = sample_fbm_batch(4, 0.45, seed=7, indices=range(self.N), stream=(1, 4))
        dW = np.array([brownian_increments(16, seed=7, index=i, stream=(1, 4)) for i in range(self.N)])
        for j in (0, 7):
            c, se = self._cov(np.diff(B, axis=1)[:, j], dW[:, j])
            print(f"cell {j}: cov {c:.2e} +- {se:.2e}")
            assert abs(c) <= 3 * se

    def test_W_and_W_tilde(self):
        w = np.array([brownian_increments(4, seed=8, index=i)[0] for i in range(self.N)])
        wt = np.array([brownian_increments(4, seed=8, index=i, tilde=True)[0] for i in range(self.N)])
        c, se = self._cov(w, wt)
        print(f"cov(W, W~) {c:.2e} +- {se:.2e}")
        assert abs(c) <= 3 * se
        assert w.var() == pytest.approx(0.25, rel=0.05)
