import math

import numpy as np
import pytest

from parseq import (
    ConstantPredictor,
    GaussianOptimalPredictor,
    MlpPredictor,
    ParseError,
    SchemaError,
    ShapeError,
    ZeroPredictor,
    central_difference_grad,
    load_gaussian_params,
    load_mlp,
    make_linear_beta_schedule,
    random_mlp,
    save_gaussian,
    save_mlp,
)


@pytest.fixture
def sched():
    return make_linear_beta_schedule(100, 1e-4, 0.05)


class TestTrivialPredictors:
    def test_zero(self):
        p = ZeroPredictor(3)
        x = np.array([1.0, -2.0, 0.5])
        assert p.predict(x, 5).tolist() == [0.0, 0.0, 0.0]
        assert p.vjp(x, 5, np.ones(3)).tolist() == [0.0, 0.0, 0.0]

    def test_constant(self):
        p = ConstantPredictor(np.array([1.5, -0.5]))
        assert p.predict(np.zeros(2), 1).tolist() == [1.5, -0.5]
        assert p.predict(np.array([9.0, 9.0]), 7).tolist() == [1.5, -0.5]
        assert p.vjp(np.zeros(2), 1, np.ones(2)).tolist() == [0.0, 0.0]

    def test_shape_mismatch(self):
        p = ZeroPredictor(3)
        with pytest.raises(ShapeError):
            p.predict(np.zeros(4), 1)


class TestGaussianOptimalPredictor:
    def test_worked_value(self):
        # mu=[2], var=[4], alpha_bar=0.5, x=[3]:
        # sqrt(0.5) * (3 - sqrt(0.5)*2) / (0.5*4 + 0.5).
        sched = make_linear_beta_schedule(1, 0.5, 0.5)
        p = GaussianOptimalPredictor(np.array([2.0]), np.array([4.0]), sched)
        expected = math.sqrt(0.5) * (3.0 - math.sqrt(0.5) * 2.0) / 2.5
        assert expected == pytest.approx(0.44852813742385697, rel=1e-15)
        assert p.predict(np.array([3.0]), 1)[0] == pytest.approx(expected, rel=1e-14)

    def test_standard_normal_data_reduces_to_scaling(self, sched):
        # mu=0, var=1 collapses the gain to sqrt(1 - a).
        p = GaussianOptimalPredictor(np.zeros(4), np.ones(4), sched)
        x = np.array([1.0, -2.0, 0.0, 3.0])
        for t in (1, 50, 100):
            a = sched.alpha_bar(t)
            np.testing.assert_allclose(
                p.predict(x, t), math.sqrt(1 - a) * x, rtol=1e-14
            )

    def test_vjp_is_diagonal_gain(self, sched):
        rng = np.random.default_rng(0)
        p = GaussianOptimalPredictor(
            rng.normal(size=5), np.abs(rng.normal(size=5)) + 0.1, sched
        )
        x = rng.standard_normal(5)
        u = rng.standard_normal(5)

        def scalar(xv):
            return float(p.predict(xv, 42) @ u)

        np.testing.assert_allclose(
            p.vjp(x, 42, u), central_difference_grad(scalar, x), rtol=1e-7, atol=1e-10
        )

    def test_unbiased_over_marginal(self, sched):
        # Over x_t ~ N(sqrt(a) mu, a var + (1 - a)), the predicted noise must
        # average to zero; bound the check at four standard errors.
        mu = np.array([1.0, -2.0])
        var = np.array([0.5, 3.0])
        p = GaussianOptimalPredictor(mu, var, sched)
        t = 60
        a = sched.alpha_bar(t)
        rng = np.random.default_rng(7)
        n = 100_000
        draws = math.sqrt(a) * mu + np.sqrt(a * var + 1 - a) * rng.standard_normal(
            (n, 2)
        )
        preds = np.array([p.predict(x, t) for x in draws])
        per_coord_var = (1 - a) / (a * var + 1 - a)
        se = np.sqrt(per_coord_var / n)
        assert np.all(np.abs(preds.mean(axis=0)) < 4 * se)

    def test_purity(self, sched):
        p = GaussianOptimalPredictor(np.zeros(3), np.ones(3), sched)
        x = np.array([0.5, -1.0, 2.0])
        first = p.predict(x, 10)
        second = p.predict(x, 10)
        np.testing.assert_array_equal(first, second)
        np.testing.assert_array_equal(x, [0.5, -1.0, 2.0])


class TestMlpPredictor:
    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        p = random_mlp(4, [16, 8], rng, t_max=100)
        x = rng.standard_normal(4)
        u = rng.standard_normal(4)

        def scalar(xv):
            return float(p.predict(xv, 37) @ u)

        fd = central_difference_grad(scalar, x, step=1e-5)
        np.testing.assert_allclose(p.vjp(x, 37, u), fd, rtol=1e-4, atol=1e-9)

    def test_time_slot_changes_output(self):
        p = random_mlp(3, [8], np.random.default_rng(1), t_max=100)
        x = np.zeros(3)
        assert not np.allclose(p.predict(x, 1), p.predict(x, 99))

    def test_widths_must_account_for_time_slot(self):
        with pytest.raises(SchemaError):
            MlpPredictor([3, 8, 3], [np.zeros((8, 3)), np.zeros((3, 8))],
                         [np.zeros(8), np.zeros(3)])

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(11)
        p = random_mlp(3, [8], rng, t_max=200)
        path = tmp_path / "mlp.json"
        save_mlp(str(path), p)
        q = load_mlp(str(path), t_max=200)
        for _ in range(100):
            x = rng.standard_normal(3)
            t = int(rng.integers(1, 201))
            np.testing.assert_array_equal(p.predict(x, t), q.predict(x, t))

    def test_missing_field_named(self, tmp_path):
        import json

        path = tmp_path / "broken.json"
        with open(path, "w") as fh:
            json.dump({"widths": [4, 8, 3], "weights": []}, fh)
        with pytest.raises(ParseError, match="biases"):
            load_mlp(str(path))

    def test_dim_mismatch_is_schema_error(self, tmp_path):
        p = random_mlp(2, [8], np.random.default_rng(0))
        path = tmp_path / "mlp.json"
        save_mlp(str(path), p)
        with pytest.raises(SchemaError, match="dimension"):
            load_mlp(str(path), expect_dim=4)

    def test_truncated_weights_is_schema_error(self, tmp_path):
        import json

        p = random_mlp(2, [4], np.random.default_rng(0))
        path = tmp_path / "mlp.json"
        save_mlp(str(path), p)
        with open(path) as fh:
            payload = json.load(fh)
        payload["weights"][0] = payload["weights"][0][:-1]
        with open(path, "w") as fh:
            json.dump(payload, fh)
        with pytest.raises(SchemaError):
            load_mlp(str(path))

    def test_non_json_is_parse_error(self, tmp_path):
        path = tmp_path / "garbage.json"
        path.write_text("{not json")
        with pytest.raises(ParseError):
            load_mlp(str(path))


class TestGaussianParamsFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "g.json"
        save_gaussian(str(path), np.array([1.0, -2.0]), np.array([0.5, 4.0]))
        mu, var = load_gaussian_params(str(path))
        assert mu.tolist() == [1.0, -2.0]
        assert var.tolist() == [0.5, 4.0]

    def test_missing_var(self, tmp_path):
        path = tmp_path / "g.json"
        path.write_text('{"mu": [1.0]}')
        with pytest.raises(ParseError, match="var"):
            load_gaussian_params(str(path))
