import logging

import numpy as np
import pytest

from auxssm.auxk import GenSSMTarget
from auxssm.lgssm import kalman_filter, random_model, rts_smoother
from auxssm.bench.models import (
    MODEL_KINDS, ModelSpec, build_model, grid_smoother, importance_mean_t0, load_data, matern_cov, save_data,
    simulate,
)


class TestModelSpec:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown model kind"):
            ModelSpec("nope")

    def test_unknown_param(self):
        with pytest.raises(ValueError, match="unknown parameters"):
            ModelSpec("stochvol", params={"phii": 0.5})

    def test_spatio_dimension_follows_grid(self):
        assert ModelSpec("spatio-temporal", params={"grid": 4}).d == 16

    @pytest.mark.parametrize("kind,d", [("diffusion-smoothing", 2), ("grid-1d-test", 3)])
    def test_fixed_dimension_models(self, kind, d):
        with pytest.raises(ValueError):
            ModelSpec(kind, d=d)


class TestSimulate:
    @pytest.mark.parametrize("kind", MODEL_KINDS)
    def test_deterministic(self, kind):
        d = {"diffusion-smoothing": 3, "grid-1d-test": 1}.get(kind, 2)
        spec = ModelSpec(kind, T=12, d=d, seed=7)
        x1, y1 = simulate(spec)
        x2, y2 = simulate(spec)
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(y1, y2)
        assert x1.shape == (13, spec.d)

    def test_seed_changes_data(self):
        a = simulate(ModelSpec("lgssm-synthetic", T=5, d=2, seed=7))[1]
        b = simulate(ModelSpec("lgssm-synthetic", T=5, d=2, seed=8))[1]
        assert not np.array_equal(a, b)

    def test_stochvol_degenerate_dynamics(self, caplog):
        spec = ModelSpec("stochvol", T=20, d=2, seed=1, params={"Q": [[0, 0], [0, 0]], "Phi": 1.0})
        with caplog.at_level(logging.WARNING):
            x, _ = simulate(spec)
        np.testing.assert_array_equal(x, np.broadcast_to(x[0], x.shape))
        assert "not stationary" in caplog.text

    def test_diffusion_observation_mask(self):
        spec = ModelSpec("diffusion-smoothing", T=10, d=3, seed=0, params={"obs_every": 5})
        _, y = simulate(spec)
        observed = ~np.isnan(y[:, 0])
        np.testing.assert_array_equal(np.flatnonzero(observed), [0, 5, 10])

    def test_poisson_counts(self):
        _, y = simulate(ModelSpec("spatio-temporal", T=6, seed=3))
        assert np.all(y >= 0) and np.all(y == np.round(y))


class TestDataFiles:
    def test_round_trip_is_exact(self, tmp_path):
        x, y = simulate(ModelSpec("stochvol", T=9, d=2, seed=4))
        path = tmp_path / "data.csv"
        save_data(path, x, y)
        x2, y2 = load_data(path)
        np.testing.assert_array_equal(x, x2)
        np.testing.assert_array_equal(y, y2)

    def test_missing_values_survive(self, tmp_path):
        x, y = simulate(ModelSpec("diffusion-smoothing", T=6, d=3, seed=0))
        save_data(tmp_path / "d.csv", x, y)
        _, y2 = load_data(tmp_path / "d.csv")
        np.testing.assert_array_equal(np.isnan(y), np.isnan(y2))

    def test_loaded_length_checked(self, tmp_path):
        x, y = simulate(ModelSpec("stochvol", T=5, d=2, seed=0))
        save_data(tmp_path / "d.csv", x, y)
        with pytest.raises(ValueError, match="steps"):
            build_model(ModelSpec("stochvol", T=6, d=2, data_file=str(tmp_path / "d.csv")))

    def test_loaded_dimension_checked(self, tmp_path):
        x, y = simulate(ModelSpec("stochvol", T=5, d=2, seed=0))
        save_data(tmp_path / "d.csv", x, y)
        with pytest.raises(ValueError, match="columns"):
            build_model(ModelSpec("stochvol", T=5, d=3, data_file=str(tmp_path / "d.csv")))

    def test_build_from_file_matches_simulation(self, tmp_path):
        spec = ModelSpec("stochvol", T=5, d=2, seed=3)
        x, y = simulate(spec)
        save_data(tmp_path / "d.csv", x, y)
        a = build_model(spec)
        b = build_model(ModelSpec("stochvol", T=5, d=2, data_file=str(tmp_path / "d.csv")))
        assert float(a.target.log_gamma(x)) == float(b.target.log_gamma(x))


class TestBuiltTargets:
    def test_matern_cov_is_positive_definite(self):
        S = matern_cov(4, 0.7, 1.3)
        assert np.allclose(S, S.T)
        assert np.linalg.eigvalsh(S).min() > 0
        assert np.allclose(np.diag(S), 0.49)

    def test_lgssm_info_holds_smoother(self):
        built = build_model(ModelSpec("lgssm-synthetic", T=6, d=2, seed=1))
        assert built.info["smoother_mean"].shape == (7, 2)
        assert np.all(built.info["smoother_var"] > 0)

    def test_stochvol_stationary_start(self):
        t = build_model(ModelSpec("stochvol", T=4, d=3, seed=0)).target
        F, Q = t.F[0], t.Q[0]
        np.testing.assert_allclose(F @ t.P0 @ F.T + Q, t.P0, atol=1e-12)


class TestOracles:
    def test_grid_matches_kalman_on_gaussian_target(self):
        model, obs = random_model(np.random.default_rng(5), 6, 1, 1)
        target = GenSSMTarget.from_lgssm(model, obs)
        sm = rts_smoother(model, kalman_filter(model, obs))
        g = grid_smoother(target, n_grid=4000, half_width=12)
        np.testing.assert_allclose(g["mean"], sm.mean[:, 0], atol=1e-6)
        np.testing.assert_allclose(g["var"], sm.cov[:, 0, 0], atol=1e-6)

    def test_grid_rejects_multivariate(self):
        with pytest.raises(ValueError):
            grid_smoother(build_model(ModelSpec("stochvol", T=3, d=2)).target)

    def test_grid_and_importance_sampling_agree(self):
        target = build_model(ModelSpec("grid-1d-test", T=10, seed=5)).target
        g = grid_smoother(target, n_grid=2000)
        est, se = importance_mean_t0(target, 1_000_000, seed=6)
        assert abs(g["mean"][0] - est) < 4 * se
