import numpy as np
import pytest
from scipy.integrate import solve_ivp

from odemeta import autodiff as ad
from odemeta import odesolve as solv
from odemeta.odesolve import SolveStatus
from odemeta.systems import get_family


def lv2_field(params):
    a, b, d_, g = params

    def rhs(x, t):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([a * x1 - b * x1 * x2, d_ * x1 * x2 - g * x2], axis=-1)

    return rhs


LV2_BENCH = (0.5, 1.2, 1.0, 1.5)


class TestRK4Step:
    def test_zero_field_keeps_state(self):
        out = solv.rk4_step(lambda x, t: ad.scale(0.0, x), np.array([2.0, -1.0]), 0.0, 0.1)
        np.testing.assert_array_equal(out.value, [2.0, -1.0])

    def test_exponential_growth_single_step(self):
        out = solv.rk4_step(lambda x, t: x, np.array([1.0]), 0.0, 0.1)
        # 4th-order Taylor polynomial of e^0.1
        assert out.value[0] == pytest.approx(1.10517083, abs=1e-8)
        assert abs(out.value[0] - np.exp(0.1)) < 1e-7

    def test_exponential_decay_many_steps(self):
        state = ad.constant(np.array([1.0]))
        for k in range(100):
            state = solv.rk4_step(lambda x, t: ad.neg(x), state, k * 0.01, 0.01)
        assert state.value[0] == pytest.approx(np.exp(-1.0), abs=1e-7)

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ValueError):
            solv.rk4_step(lambda x, t: x, np.array([1.0]), 0.0, 0.0)


class TestSolveFixed:
    def test_single_time_returns_x0(self):
        res = solv.solve_fixed(lambda x, t: x, np.array([3.0]), [0.5])
        assert len(res.states) == 1
        np.testing.assert_array_equal(res.states[0].value, [3.0])
        assert res.status is SolveStatus.Ok

    def test_lv2_against_adaptive_oracle(self):
        field = lv2_field(LV2_BENCH)
        x0 = np.array([1.0, 1.0])
        grid = np.linspace(0.0, 1.0, 11)
        oracle = solv.solve_adaptive(field, x0, grid, rtol=1e-10, atol=1e-10)
        assert oracle.status is SolveStatus.Ok

        def tape_field(x, t):
            x1 = ad.select_cols(x, 0, 1)
            x2 = ad.select_cols(x, 1, 2)
            a, b, d_, g = LV2_BENCH
            x12 = ad.mul(x1, x2)
            return ad.concat_cols([
                ad.sub(ad.scale(a, x1), ad.scale(b, x12)),
                ad.sub(ad.scale(d_, x12), ad.scale(g, x2)),
            ])

        res = solv.solve_fixed(tape_field, x0.reshape(1, 2), grid, substeps_per_interval=4)
        err = abs(res.states[-1].value.ravel() - oracle.states[-1]).max()
        assert err < 1e-5

    def test_order_four_error_reduction(self):
        field = lv2_field(LV2_BENCH)
        x0 = np.array([1.0, 1.0])
        grid = np.array([0.0, 1.0])
        fine = solv.solve_adaptive(field, x0, grid, rtol=1e-12, atol=1e-12).states[-1]

        def run(substeps):
            res = solv.solve_fixed(lambda x, t: ad.constant(field(x.value, t)), x0, grid, substeps)
            return abs(res.states[-1].value - fine).max()

        e_coarse, e_fine = run(8), run(16)
        assert e_coarse / e_fine >= 12.0  # >= 2^3.58, order-4 behaviour

    def test_fixed_step_convergence_monotone_on_zoo(self):
        for name, params in [("lv2", LV2_BENCH), ("sir", (1.5, 5.0)), ("brusselator", (0.8, 1.5))]:
            fam = get_family(name)
            rhs = fam.rhs_np(np.array(params))
            x0 = (fam.x0_lower + fam.x0_upper) / 2.0
            grid = np.array([fam.t0, fam.t0 + (fam.t_max - fam.t0) / 10.0])
            exact = solv.solve_adaptive(rhs, x0, grid, rtol=1e-12, atol=1e-12).states[-1]
            errs = []
            for sub in (2, 4, 8):
                res = solv.solve_fixed(lambda x, t: ad.constant(rhs(x.value, t)), x0, grid, sub)
                errs.append(abs(res.states[-1].value - exact).max())
            assert errs[0] > errs[1] > errs[2], name

    def test_differentiable_through_solve(self):
        # d/dx0 of e^{t} * x0 at t=1 is e
        def f(x):
            res = solv.solve_fixed(lambda s, t: s, x, [0.0, 1.0], substeps_per_interval=20)
            return ad.sum_all(res.states[-1])

        report = ad.grad_check(f, np.array([1.3]))
        assert report.max_rel_error < 1e-8

    def test_gradient_wrt_time_grid_node(self):
        # reverse mode must match finite differences of the same discrete map
        def f(t_end):
            res = solv.solve_fixed(lambda s, t: s, np.array([2.0]), [0.0, t_end], 8)
            return ad.sum_all(res.states[-1])

        report = ad.grad_check(lambda x: f(ad.reshape(x, ())), np.array(0.7))
        assert report.max_rel_error < 1e-7

        # and converge to the analytic derivative x0 * e^t as steps refine
        t_end = ad.constant(0.7)
        res = solv.solve_fixed(lambda s, t: s, np.array([2.0]), [0.0, t_end], 50)
        ad.backward(ad.sum_all(res.states[-1]))
        assert t_end.adjoint == pytest.approx(2.0 * np.exp(0.7), rel=1e-6)

    def test_nonfinite_status(self):
        res = solv.solve_fixed(lambda x, t: ad.square(ad.scale(50.0, x)), np.array([10.0]),
                               np.linspace(0, 5, 6), 4)
        assert res.status is SolveStatus.NonFinite
        assert len(res.states) < 6


class TestSolveAdaptive:
    def test_exponential_decay_default_tolerances(self):
        res = solv.solve_adaptive(lambda x, t: -x, np.array([1.0]), [0.0, 1.0])
        assert res.status is SolveStatus.Ok
        assert res.states[-1][0] == pytest.approx(0.36787944, abs=1e-6)

    def test_sir_population_conserved(self):
        fam = get_family("sir")
        rhs = fam.rhs_np(np.array([1.5, 5.0]))
        x0 = np.array([2.0, 0.01, 0.0])
        grid = np.linspace(0, 1, 100)
        res = solv.solve_adaptive(rhs, x0, grid)
        assert res.status is SolveStatus.Ok
        totals = np.stack(res.states).sum(axis=1)
        assert np.abs(totals - totals[0]).max() < 1e-8

    def test_blowup_is_reported_not_silent(self):
        res = solv.solve_adaptive(lambda x, t: x * x, np.array([1.0]), [0.0, 2.0], max_steps=2000)
        assert res.status in (SolveStatus.NonFinite, SolveStatus.StepLimit)
        assert len(res.states) < 2

    def test_dense_output_matches_scipy(self):
        field = lv2_field(LV2_BENCH)
        x0 = np.array([1.2, 0.8])
        t_eval = np.linspace(0, 10, 37)
        mine = solv.solve_adaptive(field, x0, t_eval, rtol=1e-8, atol=1e-8)
        ref = solve_ivp(lambda t, y: field(y, t), (0, 10), x0, t_eval=t_eval,
                        rtol=1e-10, atol=1e-10, method="RK45")
        assert mine.status is SolveStatus.Ok
        np.testing.assert_allclose(np.stack(mine.states), ref.y.T, rtol=0, atol=5e-6)

    def test_batched_solve_matches_individual(self):
        field = lv2_field(LV2_BENCH)
        x0s = np.array([[1.0, 1.0], [2.0, 0.5], [0.3, 1.7]])
        grid = np.linspace(0, 5, 21)
        batch = solv.solve_adaptive(field, x0s, grid, rtol=1e-9, atol=1e-9)
        stacked = np.stack(batch.states)
        for i in range(3):
            single = solv.solve_adaptive(field, x0s[i], grid, rtol=1e-9, atol=1e-9)
            np.testing.assert_allclose(stacked[:, i], np.stack(single.states), atol=1e-6)

    def test_determinism(self):
        field = lv2_field(LV2_BENCH)
        grid = np.linspace(0, 15, 100)
        a = solv.solve_adaptive(field, np.array([1.0, 1.0]), grid)
        b = solv.solve_adaptive(field, np.array([1.0, 1.0]), grid)
        assert a.steps_taken == b.steps_taken
        np.testing.assert_array_equal(np.stack(a.states), np.stack(b.states))

    def test_invalid_tolerances(self):
        with pytest.raises(ValueError):
            solv.solve_adaptive(lambda x, t: -x, np.array([1.0]), [0, 1], rtol=0.0)


def test_grid_refinement_monotone_all_kinetic_families():
    # fixed-step error against the adaptive oracle shrinks with sub-steps
    from odemeta.systems import FAMILIES
    rng = ad.make_rng(77)
    for name, fam in FAMILIES.items():
        if name == "gp_field":
            continue
        lo, hi = fam.parameter_support
        rhs = fam.rhs_np((lo + hi) / 2.0)
        x0 = (fam.x0_lower + fam.x0_upper) / 2.0
        grid = np.array([fam.t0, fam.t0 + (fam.t_max - fam.t0) / 10.0])
        exact = solv.solve_adaptive(rhs, x0, grid, 1e-12, 1e-12).states[-1]
        errs = []
        for sub in (2, 4, 8):
            res = solv.solve_fixed(lambda x, t: ad.constant(rhs(x.value, t)), x0,
                                   grid, sub)
            errs.append(abs(res.states[-1].value - exact).max())
        assert errs[0] > errs[1] > errs[2], name


def test_adaptive_defaults_pinned():
    import inspect
    sig = inspect.signature(solv.solve_adaptive)
    assert sig.parameters["rtol"].default == 1e-5
    assert sig.parameters["atol"].default == 1e-5
