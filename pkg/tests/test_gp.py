import numpy as np
import pytest

from odemeta import autodiff as ad
from odemeta import gp


def naive_posterior(x, y, xq, ell, s2, noise):
    """Dense-solve oracle: direct O(n^3) conditionals, no caching."""
    def k(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) / ell) ** 2
        return s2 * np.exp(-0.5 * d2.sum(-1))

    kxx = k(x, x) + noise * np.eye(len(x))
    kxs = k(xq, x)
    mean = kxs @ np.linalg.solve(kxx, y)
    cov = k(xq, xq) - kxs @ np.linalg.solve(kxx, kxs.T)
    return mean, np.diag(cov)


class TestFitAndPosterior:
    def test_interpolates_single_point(self):
        model = gp.gp_fit(np.array([[0.5, 1.0]]), np.array([2.0]),
                          init_hyperparams={"noise_variance": 1e-6}, n_restarts=1)
        mean, var = gp.gp_posterior(model, np.array([[0.5, 1.0]]))
        assert mean[0, 0] == pytest.approx(2.0, abs=1e-4)

    def test_prior_reversion_far_from_data(self):
        rng = ad.make_rng(0)
        x = rng.uniform(0, 1, size=(10, 2))
        y = np.sin(3 * x[:, 0]) + x[:, 1]
        model = gp.gp_fit(x, y, n_restarts=2)
        far = np.array([[0.5 + 50 * model.lengthscales[0, 0], 0.5]])
        mean, var = gp.gp_posterior(model, far)
        assert abs(mean[0, 0]) < 1e-3
        assert var[0, 0] == pytest.approx(model.signal_variance[0], rel=1e-3)

    def test_optimized_lml_not_worse_than_init(self):
        rng = ad.make_rng(1)
        x = rng.uniform(-2, 2, size=(25, 3))
        y = np.cos(x[:, 0]) * x[:, 1] + 0.1 * rng.normal(size=25)
        init = {"lengthscales": np.ones(3), "signal_variance": 1.0,
                "noise_variance": 1e-2}
        theta0 = np.concatenate([np.log(init["lengthscales"]),
                                 [np.log(init["signal_variance"]),
                                  np.log(init["noise_variance"])]])
        base_nll, _ = gp._lml_and_grad(theta0, x, y)
        model = gp.gp_fit(x, y, init_hyperparams=init)
        assert model.log_marginal[0] >= -base_nll - 1e-9

    def test_kernel_diagonal_is_signal_variance(self):
        x = np.array([[0.3, 0.7]])
        k = gp._kernel(x, x, np.array([1.0, 2.0]), 1.7)
        assert k[0, 0] == pytest.approx(1.7)

    def test_posterior_variance_at_train_point_below_noise(self):
        rng = ad.make_rng(2)
        x = rng.uniform(0, 1, size=(12, 2))
        y = x[:, 0] ** 2
        model = gp.gp_fit(x, y, n_restarts=2)
        _, var = gp.gp_posterior(model, x)
        assert np.all(var[:, 0] <= model.noise_variance[0] + 1e-8)

    def test_matches_dense_solve_oracle(self):
        rng = ad.make_rng(3)
        for trial in range(4):
            n = int(rng.integers(3, 20))
            x = rng.uniform(-1, 1, size=(n, 2))
            y = rng.normal(size=n)
            ell = rng.uniform(0.3, 2.0, size=2)
            s2, noise = 1.3, 1e-4
            ky = gp._kernel(x, x, ell, s2) + noise * np.eye(n)
            from scipy.linalg import cho_factor, cho_solve
            c = cho_factor(ky, lower=True)
            model = gp.GPModel(x, y[:, None], ell[None], np.array([s2]),
                               np.array([noise]), cho_solve(c, y)[None],
                               cho_solve(c, np.eye(n))[None], np.zeros(1))
            xq = rng.uniform(-1, 1, size=(5, 2))
            mean, var = gp.gp_posterior(model, xq)
            om, ov = naive_posterior(x, y, xq, ell, s2, noise)
            np.testing.assert_allclose(mean[:, 0], om, atol=1e-10)
            np.testing.assert_allclose(var[:, 0], ov + noise * 0, atol=1e-8)

    def test_variance_nonnegative(self):
        rng = ad.make_rng(4)
        x = rng.uniform(0, 1, size=(30, 2))
        y = rng.normal(size=30)
        model = gp.gp_fit(x, y, n_restarts=2)
        _, var = gp.gp_posterior(model, rng.uniform(-2, 3, size=(200, 2)))
        assert np.all(var >= 0.0)

    def test_empty_training_rejected(self):
        with pytest.raises(ValueError):
            gp.gp_fit(np.zeros((0, 2)), np.zeros(0))


class TestPredictInterface:
    def test_gp_predict_shapes(self):
        rng = ad.make_rng(5)
        x = np.concatenate([rng.uniform(0, 2, size=(15, 2)),
                            rng.uniform(0, 10, size=(15, 1))], axis=1)
        y = rng.normal(size=(15, 2))
        model = gp.gp_fit(x, y, n_restarts=1)
        out = gp.gp_predict(model, np.array([1.0, 1.0]), np.linspace(0, 10, 4))
        assert out.means.shape == (1, 4, 2)
        assert np.all(out.stds > 0)

    def test_training_rows_builder(self):
        known = [(np.array([1.0, 2.0]), np.array([0.0, 1.0]),
                  np.array([[1.0, 2.0], [1.5, 1.0]]))]
        x, y = gp.trajectories_to_training_rows(known, np.array([0.0]),
                                                np.array([[3.0, 1.0]]))
        assert x.shape == (3, 3)
        np.testing.assert_array_equal(x[0], [1.0, 2.0, 0.0])
        np.testing.assert_array_equal(x[2], [3.0, 1.0, 0.0])


class TestGPAdapter:
    def _model(self):
        rng = ad.make_rng(6)
        x = np.concatenate([rng.uniform(0, 2, size=(12, 2)),
                            rng.uniform(0, 15, size=(12, 1))], axis=1)
        y = np.stack([np.sin(x[:, 2]) * x[:, 0], np.cos(x[:, 2])], axis=1)
        return gp.gp_fit(x, y, n_restarts=1)

    def test_paths_match_posterior(self):
        model = self._model()
        adapter = gp.GPAdapter(model)
        noise = adapter.draw_noise(3, ad.make_rng(7))
        noise["z"][:] = 0.0  # zero noise -> paths equal the posterior mean
        paths = adapter.mean_paths(np.array([1.0, 1.0]), [2.0, 5.0], noise)
        mean, _ = gp.gp_posterior(model, np.array([[1.0, 1.0, 2.0], [1.0, 1.0, 5.0]]))
        np.testing.assert_allclose(paths[0].value, np.tile(mean[0], (3, 1)), atol=1e-10)
        np.testing.assert_allclose(paths[1].value, np.tile(mean[1], (3, 1)), atol=1e-10)

    def test_appending_time_keeps_existing_values(self):
        adapter = gp.GPAdapter(self._model())
        noise = adapter.draw_noise(4, ad.make_rng(8))
        x0 = np.array([0.7, 1.2])
        short = adapter.mean_paths(x0, [1.0, 4.0], noise)
        longer = adapter.mean_paths(x0, [1.0, 4.0, 9.0], noise)
        for a, b in zip(short, longer[:2]):
            np.testing.assert_array_equal(a.value, b.value)

    def test_gradients_wrt_query(self):
        adapter = gp.GPAdapter(self._model())
        noise = adapter.draw_noise(2, ad.make_rng(9))

        def f(leaves):
            t = ad.reshape(leaves["t"], ())
            paths = adapter.mean_paths(leaves["x0"], [t], noise)
            return ad.sum_all(paths[0])

        report = ad.grad_check(f, {"x0": np.array([1.0, 1.0]), "t": np.array(3.0)})
        assert report.max_rel_error < 1e-6
