import numpy as np
import pytest

from bagscore.data import Dataset, Scaler
from bagscore.errors import InvalidInputError, ModelFormatError, TrainingDivergedError
from bagscore.ensemble import (
    EnsembleModel,
    MlpSpec,
    NetworkParams,
    TrainConfig,
    forward,
    init_network,
    load_model,
    loss_and_gradient,
    predict_ensemble,
    save_model,
    split_train_val,
    tanh_activation,
    train_ensemble,
    train_network,
)


def rel_errors(analytic, numeric, floor=1e-6):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def central_differences(params, spec, x, y, h=1e-5):
    theta = params.flat()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        f_up = np.mean((forward(NetworkParams.from_flat(spec, up), spec, x) - y) ** 2)
        f_down = np.mean((forward(NetworkParams.from_flat(spec, down), spec, x) - y) ** 2)
        grad[i] = (f_up - f_down) / (2 * h)
    return grad


class TestTanh:
    def test_values(self):
        assert tanh_activation(0.0) == 0.0
        # 2 / (1 + e^-2) - 1 at 40 digits (mpmath)
        assert tanh_activation(1.0) == pytest.approx(0.7615941559557648881, rel=1e-15)

    def test_odd_and_saturating(self):
        x = np.linspace(-800, 800, 1601)
        with np.errstate(all="raise"):
            t = tanh_activation(x)
        np.testing.assert_array_equal(t, -tanh_activation(-x))
        assert t[0] == -1.0 and t[-1] == 1.0
        assert np.all(np.abs(tanh_activation(np.linspace(-5, 5, 101))) < 1)

    def test_matches_logistic_form(self):
        x = np.linspace(-10, 10, 201)
        np.testing.assert_allclose(tanh_activation(x), 2 / (1 + np.exp(-2 * x)) - 1, atol=1e-15)


class TestInit:
    def test_deterministic(self):
        spec = MlpSpec(8)
        a, b = init_network(spec, 42), init_network(spec, 42)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_seeds_differ(self):
        spec = MlpSpec(8)
        assert not np.array_equal(init_network(spec, 1).flat(), init_network(spec, 2).flat())

    def test_shapes_and_limits(self):
        spec = MlpSpec(8)
        params = init_network(spec, 0)
        assert [w.shape for w in params.weights] == [(8, 20), (20, 20), (20, 20), (20, 1)]
        for w, b in zip(params.weights, params.biases):
            limit = np.sqrt(6 / sum(w.shape))
            assert np.all(np.abs(w) <= limit)
            np.testing.assert_array_equal(b, 0.0)

    def test_default_spec(self):
        spec = MlpSpec(3)
        assert spec.hidden_widths == (20, 20, 20)
        assert spec.activations == ("linear", "tanh", "linear")

    def test_bad_spec(self):
        with pytest.raises(InvalidInputError):
            MlpSpec(3, hidden_widths=(4, 4), activations=("tanh",))
        with pytest.raises(InvalidInputError):
            MlpSpec(3, activations=("relu", "tanh", "linear"))


class TestForward:
    def test_zero_network(self):
        spec = MlpSpec(4)
        theta = np.zeros(spec.n_params)
        assert forward(NetworkParams.from_flat(spec, theta), spec, np.array([1.0, -2.0, 3.0, 9.0])) == 0.0

    def test_linear_homogeneity(self):
        spec = MlpSpec(3, activations=("linear", "linear", "linear"))
        params = init_network(spec, 5)
        zero_bias = NetworkParams(params.weights, tuple(np.zeros_like(b) for b in params.biases))
        x = np.array([0.3, -1.2, 2.0])
        assert forward(zero_bias, spec, 2 * x) == pytest.approx(2 * forward(zero_bias, spec, x), rel=1e-14)

    def test_hand_computed(self):
        spec = MlpSpec(1, hidden_widths=(2,), activations=("tanh",))
        params = NetworkParams(
            (np.array([[0.5, -1.0]]), np.array([[1.5], [-2.0]])),
            (np.array([0.1, 0.2]), np.array([0.3])),
        )
        # 1.5 tanh(0.45) - 2 tanh(-0.5) + 0.3 at 40 digits (mpmath)
        assert forward(params, spec, np.array([0.7])) == pytest.approx(1.857082822395031407, rel=1e-15)

    def test_dimension_mismatch(self):
        spec = MlpSpec(3)
        with pytest.raises(InvalidInputError):
            forward(init_network(spec, 0), spec, np.zeros(4))


class TestGradient:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        spec = MlpSpec(3, hidden_widths=(4, 3, 5), activations=("linear", "tanh", "linear"))
        params = NetworkParams.from_flat(spec, rng.normal(0, 0.7, spec.n_params))
        x = rng.normal(size=(6, 3))
        y = rng.normal(size=6)
        loss, grad = loss_and_gradient(params, spec, x, y)
        assert loss == pytest.approx(np.mean((forward(params, spec, x) - y) ** 2), rel=1e-14)
        numeric = central_differences(params, spec, x, y)
        assert np.max(rel_errors(grad.flat(), numeric)) <= 1e-4


class TestSplitTrainVal:
    def test_sizes(self):
        tr, va = split_train_val(10, 3, 0.3)
        assert (len(tr), len(va)) == (7, 3)
        assert len(np.intersect1d(tr, va)) == 0
        np.testing.assert_array_equal(np.union1d(tr, va), np.arange(10))

    def test_deterministic(self):
        a, b = split_train_val(50, 9, 0.3), split_train_val(50, 9, 0.3)
        np.testing.assert_array_equal(a[1], b[1])

    def test_seeds_distinct(self):
        collisions = 0
        for s in range(100):
            a = split_train_val(40, 2 * s, 0.3)[1]
            b = split_train_val(40, 2 * s + 1, 0.3)[1]
            collisions += np.array_equal(a, b)
        assert collisions == 0

    def test_degenerate(self):
        with pytest.raises(InvalidInputError):
            split_train_val(1, 0, 0.3)


@pytest.fixture(scope="module")
def linear_problem():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(100, 1))
    return x, 2 * x[:, 0] + 1


class TestTrainNetwork:
    def test_linear_target(self, linear_problem):
        x, y = linear_problem
        spec = MlpSpec(1)
        params, log = train_network(spec, 1, x, y, return_log=True)
        rmse = np.sqrt(np.mean((forward(params, spec, x) - y) ** 2))
        assert rmse < 0.05
        assert log.final_train_loss <= log.initial_train_loss

    def test_constant_target(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(80, 2))
        c = 3.0
        spec = MlpSpec(2)
        params = train_network(spec, 2, x, np.full(80, c))
        rmse = np.sqrt(np.mean((forward(params, spec, x) - c) ** 2))
        assert rmse < 0.05 * (1 + abs(c))

    def test_deterministic(self, linear_problem):
        x, y = linear_problem
        cfg = TrainConfig(epochs=20)
        a = train_network(MlpSpec(1), 3, x, y, cfg)
        b = train_network(MlpSpec(1), 3, x, y, cfg)
        np.testing.assert_array_equal(a.flat(), b.flat())
        assert a.seed == 3

    def test_early_stopping(self, linear_problem):
        x, y = linear_problem
        _, log = train_network(MlpSpec(1), 4, x, y, TrainConfig(epochs=400, patience=0), return_log=True)
        assert log.epochs_run < 400

    def test_divergence(self, linear_problem):
        x, y = linear_problem
        with pytest.raises(TrainingDivergedError) as info:
            train_network(MlpSpec(1), 1, x, y * 1e200, TrainConfig(epochs=5))
        assert info.value.epoch == 1

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            TrainConfig(learning_rate=0)
        with pytest.raises(InvalidInputError):
            TrainConfig(val_fraction=1.0)


@pytest.fixture(scope="module")
def toy_data():
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 10, size=(60, 3))
    y = 5 + x[:, 0] * np.sin(x[:, 1]) + 0.5 * x[:, 2]
    return Dataset(x, y, ("a", "b", "c"))


class TestTrainEnsemble:
    def test_single_member_matches_train_network(self, toy_data):
        cfg = TrainConfig(epochs=15)
        spec = MlpSpec(3)
        model = train_ensemble(spec, 1, toy_data, cfg)
        fx, fy = Scaler.fit(toy_data.features), Scaler.fit(toy_data.targets)
        alone = train_network(spec, 1, fx.apply(toy_data.features), fy.apply(toy_data.targets), cfg)
        np.testing.assert_array_equal(model.members[0].flat(), alone.flat())
        assert model.seeds == (1,)

    def test_schedule_independent(self, toy_data):
        cfg = TrainConfig(epochs=15, patience=3)
        spec = MlpSpec(3)
        together = train_ensemble(spec, 8, toy_data, cfg, chunk_size=8)
        one_by_one = train_ensemble(spec, 8, toy_data, cfg, chunk_size=1)
        pooled = train_ensemble(spec, 8, toy_data, cfg, chunk_size=3, n_jobs=2)
        np.testing.assert_array_equal(together.stacked(), one_by_one.stacked())
        np.testing.assert_array_equal(together.stacked(), pooled.stacked())
        assert together.seeds == tuple(range(1, 9))

    def test_seed_base(self, toy_data):
        model = train_ensemble(MlpSpec(3), 2, toy_data, TrainConfig(epochs=2), seed_base=10)
        assert model.seeds == (11, 12)

    def test_invalid(self, toy_data):
        with pytest.raises(InvalidInputError):
            train_ensemble(MlpSpec(3), 0, toy_data)
        with pytest.raises(InvalidInputError):
            train_ensemble(MlpSpec(4), 1, toy_data)


class TestPredict:
    def test_single_member(self, toy_data):
        model = train_ensemble(MlpSpec(3), 1, toy_data, TrainConfig(epochs=3))
        x = toy_data.features[4]
        ps = predict_ensemble(model, x)
        z = model.feature_scaler.apply(x)
        expected = model.target_scaler.invert(forward(model.members[0], model.spec, z))
        assert len(ps) == 1
        assert ps.values[0] == expected
        assert ps.source_seeds == (1,)

    def test_member_permutation(self, toy_data):
        model = train_ensemble(MlpSpec(3), 4, toy_data, TrainConfig(epochs=3))
        order = [2, 0, 3, 1]
        permuted = EnsembleModel(
            model.spec, [model.members[i] for i in order], model.feature_scaler, model.target_scaler
        )
        x = toy_data.features[7]
        np.testing.assert_array_equal(
            predict_ensemble(permuted, x).values, predict_ensemble(model, x).values[order]
        )

    def test_dimension_mismatch(self, toy_data):
        model = train_ensemble(MlpSpec(3), 1, toy_data, TrainConfig(epochs=1))
        with pytest.raises(InvalidInputError):
            predict_ensemble(model, np.zeros(5))


class TestSerialization:
    def test_roundtrip_bitwise(self, tmp_path, toy_data):
        model = train_ensemble(MlpSpec(3), 3, toy_data, TrainConfig(epochs=3))
        model.provenance["note"] = "toy"
        path = tmp_path / "m.bsm"
        save_model(model, path)
        back = load_model(path)
        assert back.spec == model.spec
        assert back.seeds == model.seeds
        assert back.provenance == {"note": "toy"}
        np.testing.assert_array_equal(back.stacked(), model.stacked())
        np.testing.assert_array_equal(back.feature_scaler.scale, model.feature_scaler.scale)
        np.testing.assert_array_equal(back.target_scaler.mean, model.target_scaler.mean)
        save_model(back, tmp_path / "again.bsm")
        assert (tmp_path / "again.bsm").read_bytes() == path.read_bytes()

    def test_version_mismatch(self, tmp_path, toy_data):
        model = train_ensemble(MlpSpec(3), 1, toy_data, TrainConfig(epochs=1))
        path = tmp_path / "m.bsm"
        save_model(model, path)
        raw = bytearray(path.read_bytes())
        raw[8] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError, match="version 99"):
            load_model(path)

    @pytest.mark.parametrize("cut", [4, 30, -8])
    def test_truncated(self, tmp_path, toy_data, cut):
        model = train_ensemble(MlpSpec(3), 1, toy_data, TrainConfig(epochs=1))
        path = tmp_path / "m.bsm"
        save_model(model, path)
        path.write_bytes(path.read_bytes()[:cut])
        with pytest.raises(ModelFormatError):
            load_model(path)
