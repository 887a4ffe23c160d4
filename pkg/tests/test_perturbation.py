"""Perturbation paths, one-step errors, coefficient families and main terms."""

import numpy as np
import pytest
import sympy as sp

from artifact.errors import ContractError
from artifact.fbm import sample_fbm, sample_fbm_batch
from artifact.flow import reference_solution
from artifact.models import build_model, get_model
from artifact.perturbation import (
    coefficient_functions, global_residuals, main_term_kappa, one_step_error, phi_processes,
    solve_perturbation,
)
from artifact.schemes import run_scheme

KINDS = ["euler", "milstein", "cn"]
GRID = np.linspace(-3, 3, 200)
X = sp.Symbol("x", real=True)

# (registry name, params) -> symbolic (b, sigma)
SYMBOLIC = {
    ("sinh", "neg"): (-X, sp.sqrt(1 + X**2)),
    ("sinh", "cos"): (sp.cos(X), sp.sqrt(1 + X**2)),
    ("trig", "cos"): (sp.cos(X), 2 + sp.sin(X)),
    ("trig", "zero"): (sp.Integer(0), 2 + sp.sin(X)),
}


def lam(expr):
    f = sp.lambdify(X, expr, "numpy")
    return lambda x: np.broadcast_to(f(x), np.shape(x)).astype(float)


def symbolic_oracle(b, s):
    """Scheme-independent expressions built from the identities of the families."""
    d = lambda e, k=1: sp.diff(e, X, k)
    cn_f3 = (d(s) ** 2 + s * d(s, 2)) / 12
    mil_f3 = -(d(s) ** 2 + s * d(s, 2)) / 6
    mil_f4 = -(s**2 * d(s, 3) - 3 * d(s) ** 3) / 24
    return {
        "cn_f3": cn_f3,
        "cn_f4": s * d(cn_f3) / 2,
        "mil_f4_dagger": mil_f4 - s * d(mil_f3) / 2,
        "euler_f2": -d(s) / 2,
        "W": s * d(b) - d(s) * b,
    }


@pytest.mark.parametrize("name,drift", list(SYMBOLIC))
class TestCoefficientIdentities:
    def model(self, name, drift):
        return get_model(name, {"drift": drift})

    @pytest.mark.parametrize("kind", ["milstein", "cn"])
    def test_divided_by_sigma(self, name, drift, kind):
        model = self.model(name, drift)
        fam = coefficient_functions(kind, model)
        s, s1 = model.sigma(GRID), model.sigma(GRID, 1)
        pairs = [(fam.f[3], fam.f_hat[3]), (fam.g1, fam.g1_hat), (fam.phi, fam.phi_hat)]
        pairs += [(fam.phi_words[w], fam.phi_hat_words[w]) for w in ("011", "101", "110")]
        for plain, hat in pairs:
            assert np.max(np.abs(plain(GRID) - hat(GRID) / s)) <= 1e-10
        f4 = (fam.f_hat[4](GRID) - s1 * fam.f_hat[3](GRID)) / s
        assert np.max(np.abs(fam.f[4](GRID) - f4)) <= 1e-10

    def test_euler(self, name, drift):
        model = self.model(name, drift)
        fam = coefficient_functions("euler", model)
        oracle = symbolic_oracle(*SYMBOLIC[(name, drift)])
        assert np.max(np.abs(fam.f[2](GRID) - lam(oracle["euler_f2"])(GRID))) <= 1e-10
        assert np.max(np.abs(fam.f[2](GRID) - fam.f_hat[2](GRID) / model.sigma(GRID))) <= 1e-10

    def test_cn_against_symbolic(self, name, drift):
        fam = coefficient_functions("cn", self.model(name, drift))
        oracle = symbolic_oracle(*SYMBOLIC[(name, drift)])
        err3 = np.max(np.abs(fam.f[3](GRID) - lam(oracle["cn_f3"])(GRID)))
        err4 = np.max(np.abs(fam.f[4](GRID) - lam(oracle["cn_f4"])(GRID)))
        print(f"{name}/{drift}: f3 {err3:.1e}  f4 {err4:.1e}")
        assert err3 <= 1e-10 and err4 <= 1e-10

    def test_cn_psi(self, name, drift):
        fam = coefficient_functions("cn", self.model(name, drift))
        expect = fam.phi(GRID) + 0.25 * (fam.phi_words["011"](GRID) + fam.phi_words["110"](GRID))
        assert np.max(np.abs(fam.psi(GRID) - expect)) <= 1e-10

    def test_milstein_dagger(self, name, drift):
        fam = coefficient_functions("milstein", self.model(name, drift))
        oracle = symbolic_oracle(*SYMBOLIC[(name, drift)])
        assert np.max(np.abs(fam.f4_dagger(GRID) - lam(oracle["mil_f4_dagger"])(GRID))) <= 1e-10

    def test_g1_is_wronskian_ratio(self, name, drift):
        model = self.model(name, drift)
        oracle = symbolic_oracle(*SYMBOLIC[(name, drift)])
        g1 = coefficient_functions("cn", model).g1(GRID)
        assert np.max(np.abs(g1 - lam(oracle["W"])(GRID) / model.sigma(GRID))) <= 1e-10


class TestCoefficientExamples:
    def test_constant_sigma_f3_zero(self):
        fam = coefficient_functions("cn", get_model("linear-drift"))
        assert np.all(fam.f[3](GRID) == 0.0)

    def test_sinh_f3_at_zero(self):
        # sigma = 1, sigma' = 0, sigma'' = 1 at the origin
        got = float(coefficient_functions("cn", get_model("sinh")).f[3](0.0))
        print("f3(0) =", got)
        assert got == pytest.approx(1 / 12, abs=1e-15)

    @pytest.mark.parametrize("kind", ["milstein", "cn"])
    def test_driftless_g1(self, kind):
        fam = coefficient_functions(kind, get_model("trig", {"drift": "zero"}))
        assert np.all(fam.g1(GRID) == 0.0)

    def test_order_guard(self):
        from dataclasses import replace
        low = replace(get_model("trig"), max_order=3)
        with pytest.raises(ContractError):
            coefficient_functions("cn", low)
        coefficient_functions("euler", low)


def _trajectory(kind, model, H, m, seed, index=0, offset=5, xi=0.5):
    path = sample_fbm(m + offset, H, seed=seed, index=index, level=m)
    return run_scheme(kind, model, xi, path, force=True), path


class TestSolvePerturbation:
    @pytest.mark.parametrize("kind", KINDS)
    def test_constant_coefficients(self, kind):
        traj, _ = _trajectory(kind, get_model("constant"), 0.5, 6, seed=1)
        pert = solve_perturbation(traj, get_model("constant"))
        print(kind, np.max(np.abs(pert.kappa)))
        assert np.max(np.abs(pert.kappa)) <= 1e-12

    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("name", ["trig", "sinh"])
    def test_driftless_closed_form(self, kind, name):
        model = get_model(name, {"drift": "zero"})
        traj, path = _trajectory(kind, model, 0.45, 8, seed=2)
        pert = solve_perturbation(traj, model)
        F = model.F(traj.values)
        expect = np.diff(F) - np.diff(path.coarse())
        err = np.max(np.abs(pert.kappa - expect))
        print(f"{kind}/{name}: max |kappa - closed form| = {err:.2e}")
        assert err <= 1e-10

    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("index", range(3))
    def test_reconstruction(self, kind, index):
        model = get_model("sinh")
        traj, path = _trajectory(kind, model, 0.45, 8, seed=3, index=index)
        pert = solve_perturbation(traj, model)
        glob = global_residuals(pert, traj, model)
        print(kind, index, "cell", np.max(np.abs(pert.residuals)), "global", np.max(np.abs(glob)))
        assert np.max(np.abs(pert.residuals)) <= 1e-9
        assert np.max(np.abs(glob)) <= 1e-9
        assert pert.grid_values[0] == 0.0 and pert.kappa.size == 256

    def test_piecewise_linear(self):
        model = get_model("trig")
        traj, path = _trajectory("euler", model, 0.6, 4, seed=4)
        pert = solve_perturbation(traj, model)
        h = pert.on_grid(path.n_fine)
        r = path.ratio()
        assert np.allclose(h[::r], pert.grid_values, atol=0, rtol=0)
        # second differences vanish inside each cell
        inner = np.diff(h, 2).reshape(-1)
        mask = (np.arange(1, path.n_fine) % r) != 0
        assert np.max(np.abs(inner[mask])) <= 1e-15

    def test_one_step_errors(self):
        model = get_model("trig")
        traj, path = _trajectory("milstein", model, 0.45, 6, seed=5)
        pert = solve_perturbation(traj, model)
        r = path.ratio()
        for k in (1, 17, 64):
            cell = path.values[(k - 1) * r: k * r + 1]
            direct = one_step_error("milstein", model, traj.values[k - 1], cell, 1 / 64)
            assert pert.kappa_hat[k - 1] == pytest.approx(direct, abs=1e-12)

    def test_csv(self, tmp_path):
        model = get_model("trig")
        traj, _ = _trajectory("euler", model, 0.6, 3, seed=6)
        pert = solve_perturbation(traj, model)
        pert.to_csv(tmp_path / "k.csv", main_term_kappa("euler", model, traj.values, traj.values, 3))
        lines = (tmp_path / "k.csv").read_text().splitlines()
        assert lines[0] == "k,kappa,kappa_tilde,residual" and len(lines) == 9
        assert lines[1].startswith("1,")


class TestOneStepError:
    @pytest.mark.parametrize("kind", KINDS)
    def test_constant_coefficients(self, kind):
        cell = np.linspace(0.0, 0.3, 33)
        assert abs(one_step_error(kind, get_model("constant"), 0.7, cell, 0.1)) <= 1e-13

    @staticmethod
    def _defects(kind, model, lead):
        """Leading-term-corrected one-step defects on a linear driver of size dB."""
        out = []
        dBs = 2.0 ** -np.arange(4, 9)
        for dB in dBs:
            cell = np.linspace(0.0, dB, 65)
            out.append(abs(one_step_error(kind, model, 0.3, cell, dB**2) - lead(0.3, dB)))
        return dBs, np.asarray(out)

    def test_euler_leading_term(self):
        model = get_model("trig", {"drift": "zero"})
        lead = lambda x, dB: -0.5 * model.sigma(x) * model.sigma(x, 1) * dB**2
        dBs, res = self._defects("euler", model, lead)
        # the coarsest cell is pre-asymptotic; fit the three finest
        slope = np.polyfit(np.log2(dBs[-3:]), np.log2(res[-3:]), 1)[0]
        print("Euler remainder slope", slope, res)
        assert slope >= 2.8

    @pytest.mark.parametrize("kind", ["milstein", "cn"])
    def test_cubic_quartic_terms(self, kind):
        model = get_model("trig", {"drift": "zero"})
        fam = coefficient_functions(kind, model)
        lead = lambda x, dB: fam.f_hat[3](x) * dB**3 + fam.f_hat[4](x) * dB**4
        dBs, res = self._defects(kind, model, lead)
        slope = np.polyfit(np.log2(dBs[-3:]), np.log2(res[-3:]), 1)[0]
        print(kind, "remainder slope", slope, res)
        assert slope >= 4.8

    def test_short_cell(self):
        with pytest.raises(ContractError):
            one_step_error("euler", get_model("trig"), 0.0, np.array([0.0]), 0.1)


class TestMainTerms:
    def test_constant_sigma_driftless(self):
        model = get_model("constant", {"theta": 0.0, "c": 1.5})
        path = sample_fbm(11, 0.45, seed=7, level=6)
        X = reference_solution(model, 0.2, path.values).x
        for kind in KINDS:
            assert np.all(main_term_kappa(kind, model, X, path.values, 6) == 0.0)

    def test_euler_form(self):
        model = get_model("sinh")
        path = sample_fbm(11, 0.75, seed=8, level=6)
        X = reference_solution(model, 0.2, path.values).x
        got = main_term_kappa("euler", model, X, path.values, 6)
        Xc = X[:: path.ratio()][:-1]
        expect = -0.5 * model.sigma(Xc, 1) * np.diff(path.coarse()) ** 2
        assert np.max(np.abs(got - expect)) <= 1e-15
        assert main_term_kappa("euler", model, X, path.values, 6, k=5) == got[4]

    def test_grid_mismatch(self):
        with pytest.raises(ContractError):
            main_term_kappa("cn", get_model("trig"), np.zeros(100), np.zeros(100), 3)

    @pytest.mark.slow
    def test_cn_remainder_sums_decay(self):
        # median over paths of max_k |sum_{i<=k} R_i| 2^{m(3H - 1/2 + delta)}
        H, delta, model = 0.45, 0.05, get_model("trig")
        levels, meds = [7, 8, 9, 10], []
        for m in levels:
            vals = []
            for i in range(16):
                traj, path = _trajectory("cn", model, H, m, seed=9, index=i)
                pert = solve_perturbation(traj, model)
                X = reference_solution(model, 0.5, path.values).x
                R = pert.kappa - main_term_kappa("cn", model, X, path.values, m)
                vals.append(np.max(np.abs(np.cumsum(R))) * 2.0 ** (m * (3 * H - 0.5 + delta)))
            meds.append(float(np.median(vals)))
        print("scaled remainder medians", dict(zip(levels, meds)))
        assert all(a > b for a, b in zip(meds, meds[1:]))


class TestPhiProcesses:
    def _setup(self, model, H=0.45, m=6, seed=10, index=0):
        path = sample_fbm(m + 5, H, seed=seed, index=index, level=m)
        X = reference_solution(model, 0.5, path.values).x
        return X, path

    def test_driftless(self):
        model = get_model("trig", {"drift": "zero"})
        X, path = self._setup(model)
        phi = phi_processes("cn", model, X, path.values, 6)
        assert np.all(phi.values[1] == 0.0) and np.all(phi.values[3] == 0.0)
        assert np.any(phi.values[0] != 0.0)

    def test_constant_sigma(self):
        model = get_model("linear-drift")
        X, path = self._setup(model)
        phi = phi_processes("cn", model, X, path.values, 6)
        assert np.all(phi.values[0] == 0.0)

    def test_euler_only_first(self):
        model = get_model("sinh")
        X, path = self._setup(model, H=0.75)
        phi = phi_processes("euler", model, X, path.values, 6)
        assert np.all(phi.values[1:] == 0.0)

    def test_sum_matches_main_terms(self):
        model = get_model("trig")
        X, path = self._setup(model)
        phi = phi_processes("cn", model, X, path.values, 6)
        kt = main_term_kappa("cn", model, X, path.values, 6)
        grid = np.concatenate([[0.0], np.cumsum(kt)])
        partial = phi.values[:3].sum(axis=0)
        assert np.max(np.abs(partial - grid)) <= 1e-14
        # step process vs the linear interpolant on the fine grid
        t = path.times
        linear = np.interp(t, np.arange(65) / 64, grid)
        steps = phi.at(t)[:3].sum(axis=0)
        gap = np.max(np.abs(steps - linear))
        print("step-vs-linear gap", gap, "max |kappa~|", np.max(np.abs(kt)))
        assert gap <= np.max(np.abs(kt)) + 1e-15

    def test_right_continuous(self):
        model = get_model("trig")
        X, path = self._setup(model)
        phi = phi_processes("cn", model, X, path.values, 6)
        assert np.array_equal(phi.at(3 / 64), phi.values[:, 3])
        assert np.array_equal(phi.at(3.5 / 64), phi.values[:, 3])

    def test_trapezoid_sum_mean_zero_at_half(self):
        model = get_model("trig")
        m, n = 5, 400
        B = sample_fbm_batch(m + 5, 0.5, seed=11, indices=range(n))
        vals = []
        for row in B:
            X = reference_solution(model, 0.5, row).x
            vals.append(phi_processes("cn", model, X, row, m).values[1, -1])
        vals = np.asarray(vals)
        se = vals.std(ddof=1) / np.sqrt(n)
        print(f"mean Phi_2(1) = {vals.mean():.3e} +- {se:.3e}")
        assert abs(vals.mean()) <= 3 * se

    def test_csv(self, tmp_path):
        model = get_model("trig")
        X, path = self._setup(model, m=3)
        phi_processes("cn", model, X, path.values, 3).to_csv(tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "t,phi1,phi2,phi3,phi4" and len(lines) == 10


@pytest.mark.slow
@pytest.mark.parametrize("kind,H,rate", [("euler", 0.75, 0.5), ("cn", 0.45, 0.85)])
def test_perturbation_size_scaling(kind, H, rate):
    # ||h||_inf 2^{m rate} stays of order one across levels
    model = get_model("trig")
    meds = []
    for m in range(7, 11):
        norms = []
        for i in range(12):
            traj, _ = _trajectory(kind, model, H, m, seed=12, index=i)
            norms.append(solve_perturbation(traj, model).sup_norm() * 2.0 ** (m * rate))
        meds.append(float(np.median(norms)))
    print(kind, "scaled medians", meds)
    assert max(meds) / min(meds) <= 3.0


def test_euler_evaluation_point_gap():
    # b = 0: swapping X_{tau_{k-1}} for xi_{k-1} in the main term moves it by O(Delta^{4H-1})
    model = get_model("trig", {"drift": "zero"})
    H, levels, gaps = 0.75, range(6, 11), []
    fam = coefficient_functions("euler", model)
    for m in levels:
        vals = []
        for i in range(8):
            traj, path = _trajectory("euler", model, H, m, seed=13, index=i)
            X = reference_solution(model, 0.5, path.values).x
            at_ref = main_term_kappa("euler", model, X, path.values, m)
            at_scheme = fam.f[2](traj.values[:-1]) * np.diff(path.coarse()) ** 2
            vals.append(np.max(np.abs(at_ref - at_scheme)))
        gaps.append(float(np.median(vals)))
    slope = np.polyfit(list(levels), np.log2(gaps), 1)[0]
    print("gap medians", gaps, "slope", slope)
    assert slope <= -(4 * H - 1) + 0.3
