"""Euler, Milstein and Crank-Nicolson steppers and trajectories."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.errors import ContractError, InadmissibleStepError
from artifact.fbm import sample_fbm, sample_fbm_batch
from artifact.flow import reference_solution
from artifact.models import build_model, get_model
from artifact.schemes import (
    SchemeKind, admissible_level, cn_slope, cn_step_bisection, run_scheme, run_scheme_batch,
    scheme_step,
)

KINDS = ["euler", "milstein", "cn"]


def oracle_milstein(model, x, dt, dB):
    """Hand-written Milstein update, independent of the compiled kernel."""
    b, b1 = model.b(x), model.b(x, 1)
    s, s1 = model.sigma(x), model.sigma(x, 1)
    return (x + b * dt + s * dB + 0.5 * b * b1 * dt**2 + 0.5 * (s * b1 + s1 * b) * dt * dB
            + 0.5 * s * s1 * dB**2)


class TestAdmissibleLevel:
    def test_constant(self):
        assert admissible_level(get_model("constant"), 0.5) == 1

    def test_unit_bounds(self):
        assert admissible_level(get_model("trig"), 0.41, 0.01) == 3

    def test_larger_dispersion_slope(self):
        m = build_model("wide", 1, 1.0, 0.0, 2, 3.0, 2.0)
        print(m.sup_db, m.sup_dsigma)
        assert admissible_level(m, 0.46, 0.01) == 5

    def test_bad_epsilon(self):
        with pytest.raises(ContractError):
            admissible_level(get_model("trig"), 0.4, 0.5)


class TestStep:
    @pytest.mark.parametrize("kind", KINDS)
    def test_constant_coefficients(self, kind):
        got = scheme_step(kind, get_model("constant", {"theta": 0.5, "c": 2.0}), 1.0, 0.25, 0.1)
        print(kind, got)
        assert got == pytest.approx(1.325, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(x=st.floats(-3, 3), dB=st.floats(-0.3, 0.3), dt=st.floats(1e-4, 0.1))
    def test_milstein_oracle(self, x, dB, dt):
        for model in (get_model("trig", {"drift": "zero"}), get_model("sinh", {"drift": "cos"})):
            got = scheme_step("milstein", model, x, dt, dB)
            assert got == pytest.approx(oracle_milstein(model, x, dt, dB), rel=1e-13, abs=1e-13)

    def test_milstein_driftless_form(self):
        model = get_model("trig", {"drift": "zero"})
        x, dB = 0.3, 0.07
        s, s1 = model.sigma(x), model.sigma(x, 1)
        assert scheme_step("milstein", model, x, 0.01, dB) == pytest.approx(x + s * dB + 0.5 * s * s1 * dB**2,
                                                                            abs=1e-15)

    @settings(max_examples=80, deadline=None)
    @given(x=st.floats(-4, 4), dB=st.floats(-1.5, 1.5), dt=st.floats(1e-5, 0.2))
    def test_cn_newton_matches_bisection(self, x, dB, dt):
        model = get_model("sinh", {"drift": "neg"})
        q = 0.5 * dt + 0.5 * abs(dB)
        if q > 0.9:
            return
        newton = scheme_step("cn", model, x, dt, dB)
        bis = cn_step_bisection(model, x, dt, dB)
        assert abs(newton - bis) <= 1e-12 * max(1.0, abs(newton))
        # the implicit map has slope >= 1 - q, hence >= 1/2 whenever q <= 1/2
        slope = cn_slope(model, newton, dt, dB)
        assert slope >= 1 - q - 1e-15
        if q <= 0.5:
            assert slope >= 0.5

    def test_cn_residual(self):
        model = get_model("trig")
        x, dt, dB = 0.4, 1 / 64, 0.2
        eta = scheme_step("cn", model, x, dt, dB)
        res = eta - x - 0.5 * (model.b(x) + model.b(eta)) * dt - 0.5 * (model.sigma(x) + model.sigma(eta)) * dB
        assert abs(res) <= 1e-13

    def test_cn_margin(self):
        with pytest.raises(InadmissibleStepError) as exc:
            scheme_step("cn", get_model("trig"), 0.0, 0.01, 1.9)
        assert exc.value.margin > 0.9
        # unchecked steps still solve the monotone equation when it has a root
        assert np.isfinite(scheme_step("cn", get_model("trig"), 0.0, 0.01, 1.9, check=False))

    @pytest.mark.parametrize("alias,kind", [("Euler", SchemeKind.EULER), ("crank-nicolson", SchemeKind.CRANK_NICOLSON),
                                            (SchemeKind.MILSTEIN, SchemeKind.MILSTEIN)])
    def test_parse(self, alias, kind):
        assert SchemeKind.parse(alias) is kind

    def test_parse_unknown(self):
        with pytest.raises(ContractError):
            SchemeKind.parse("heun")


class TestTrajectory:
    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("H", [0.4, 0.5, 0.75])
    def test_constant_model_exact(self, kind, H):
        model = get_model("constant", {"theta": 0.5, "c": 2.0})
        path = sample_fbm(10, H, seed=1, level=6)
        traj = run_scheme(kind, model, 0.3, path)
        tau = traj.times
        exact = 0.3 + 0.5 * tau + 2.0 * path.coarse()
        ref = reference_solution(model, 0.3, path.values, path.times).x[:: path.ratio()]
        print(kind, H, np.max(np.abs(traj.values - exact)))
        assert np.max(np.abs(traj.values - exact)) <= 1e-13
        assert np.max(np.abs(traj.values - ref)) <= 1e-12

    def test_cn_residuals_and_stats(self):
        path = sample_fbm(13, 0.5, seed=2, level=8)
        traj = run_scheme("cn", get_model("sinh"), 0.5, path)
        print("admissible", traj.admissible, "holder", traj.holder_admissible,
              "max residual", traj.max_residual, "max iters", traj.newton_stats.max())
        assert traj.admissible and traj.max_residual <= 1e-13
        assert traj.newton_stats.shape == (256,) and traj.newton_stats.max() < 50
        assert traj.holder_admissible in (True, False)

    def test_cn_below_level(self):
        path = sample_fbm(6, 0.4, seed=0, level=2)
        with pytest.raises(ContractError):
            run_scheme("cn", get_model("trig"), 0.0, path)
        traj = run_scheme("cn", get_model("trig"), 0.0, path, force=True)
        assert traj.values.size == 5

    def test_inadmissible_is_constant(self):
        # one huge increment breaks the contraction margin
        path = sample_fbm(8, 0.45, seed=3, level=4)
        vals = np.array(path.values)
        vals[8:] += 3.0
        vals.setflags(write=False)
        from dataclasses import replace
        bad = replace(path, values=vals)
        traj = run_scheme("cn", get_model("trig"), 0.7, bad)
        assert not traj.admissible and np.all(traj.values == 0.7)
        assert np.all(traj.dense_path() == 0.7)

    @pytest.mark.parametrize("kind", KINDS)
    def test_dense_consistency(self, kind):
        path = sample_fbm(11, 0.45, seed=4, level=6)
        traj = run_scheme(kind, get_model("trig"), 0.2, path)
        dense = traj.dense_path()
        r = path.ratio()
        assert dense[::r].tobytes() == traj.values.tobytes()
        for k in (0, 7, 64):
            assert traj.dense(k / 64) == traj.values[k]
        j = 5 * r + 3
        assert traj.dense(j / path.n_fine) == dense[j]

    def test_dense_uses_fine_driver(self):
        path = sample_fbm(8, 0.45, seed=5, level=3)
        model = get_model("trig")
        traj = run_scheme("milstein", model, 0.1, path)
        j = 2 * 32 + 10
        expect = oracle_milstein(model, traj.values[2], 10 / 256, path.values[j] - path.values[64])
        assert traj.dense(j / 256) == pytest.approx(expect, abs=1e-14)

    def test_dense_off_grid(self):
        traj = run_scheme("euler", get_model("trig"), 0.1, sample_fbm(6, 0.7, seed=0, level=3))
        with pytest.raises(ContractError):
            traj.dense(0.3)

    @pytest.mark.parametrize("kind", KINDS)
    def test_batch_matches_single(self, kind):
        B = sample_fbm_batch(10, 0.5, seed=6, indices=range(4))
        vals, adm = run_scheme_batch(kind, get_model("sinh"), 0.3, B, 6)
        for i in range(4):
            from artifact.fbm import FbmPath
            p = FbmPath(0.5, 6, 10, B[i], 6, i)
            single = run_scheme(kind, get_model("sinh"), 0.3, p, holder_check=False)
            assert vals[i].tobytes() == single.values.tobytes() and adm[i] == single.admissible

    def test_csv(self, tmp_path):
        traj = run_scheme("euler", get_model("trig"), 0.1, sample_fbm(6, 0.7, seed=0, level=3))
        traj.to_csv(tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "t,x_scheme" and len(lines) == 10


@pytest.mark.parametrize("kind,H,model", [("euler", 0.75, "sinh"), ("milstein", 0.4, "trig"), ("cn", 0.5, "trig")])
def test_error_decreases_on_average(kind, H, model):
    m_model = get_model(model)
    means = []
    for m in (5, 7, 9):
        errs = []
        for i in range(32):
            p = sample_fbm(m + 4, H, seed=10, index=i, stream=(m,), level=m)
            ref = reference_solution(m_model, 0.5, p.values, p.times).x[:: p.ratio()]
            errs.append(np.max(np.abs(run_scheme(kind, m_model, 0.5, p).values - ref)))
        means.append(np.mean(errs))
    print(kind, means)
    assert means[0] >= means[1] >= means[2]
