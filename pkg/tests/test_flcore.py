import numpy as np
import pytest

from fedisl.config import ComputeCostModel, TrainingConfig
from fedisl.errors import DivergedError, DomainError
from fedisl.flcore import (
    DenseGradient,
    LeastSquaresRegression,
    LocalDataset,
    ModelParams,
    SoftmaxRegression,
    add_gradients,
    apply_update,
    client_opt,
    compute_time,
    evaluate,
    federated_average_round,
    make_compressor,
    make_model,
    partition_dataset,
)
from fedisl.seeding import stream
from fedisl.sparsify import SparseGradient, TopQCompressor


def test_compute_time_cycle_model():
    cost = ComputeCostModel()
    assert compute_time(cost, D_k=100, n_d=7850, epochs=5, batch_size=10) == pytest.approx(0.3955, abs=1e-4)


def test_compute_time_zero_and_override():
    zero = ComputeCostModel(c_epoch=0, c_s=0, c_step=0, c_compress=0, c_os=0)
    assert compute_time(zero, 100, 7850, 5, 10) == 0.0
    assert compute_time(ComputeCostModel(fixed_override=60.0), 100, 7850, 5, 10) == 60.0


def test_zero_epochs_give_a_zero_gradient_with_full_weight(rng):
    model = SoftmaxRegression(4, 3)
    data = LocalDataset(rng.standard_normal((12, 4)), rng.integers(0, 3, 12))
    g = client_opt(ModelParams(model.init_params()), data, model, 0, 4, 0.1, rng)
    assert g.weight == 12
    np.testing.assert_array_equal(g.values, np.zeros(model.n_params))


def test_one_least_squares_step_by_hand(rng):
    model = LeastSquaresRegression(2)
    x, y = np.array([1.0, 2.0]), 3.0
    data = LocalDataset(x[None, :], np.array([y]))
    w0 = np.array([0.5, -0.5])
    lr = 0.1
    g = client_opt(ModelParams(w0), data, model, 1, 1, lr, rng)
    np.testing.assert_allclose(g.values, -lr * (w0 @ x - y) * x)


def test_effective_gradient_is_weighted_parameter_change():
    model = SoftmaxRegression(3, 2)
    data = LocalDataset(np.eye(3), np.array([0, 1, 0]))
    params = ModelParams(model.init_params())
    g = client_opt(params, data, model, 3, 2, 0.5, stream(0, "shuffle", 0, 1))
    # replay the same SGD with the same stream
    w = params.values.copy()
    replay = stream(0, "shuffle", 0, 1)
    for _ in range(3):
        order = replay.permutation(3)
        for start in range(0, 3, 2):
            batch = order[start : start + 2]
            _, grad = model.loss_and_grad(w, data.features[batch], data.labels[batch])
            w -= 0.5 * grad
    np.testing.assert_allclose(g.values, 3 * (w - params.values))


def test_client_opt_preconditions(rng):
    model = LeastSquaresRegression(2)
    empty = LocalDataset(np.empty((0, 2)), np.empty(0))
    with pytest.raises(DomainError):
        client_opt(ModelParams(np.zeros(2)), empty, model, 1, 1, 0.1, rng)
    data = LocalDataset(np.ones((2, 2)), np.ones(2))
    with pytest.raises(DomainError):
        client_opt(ModelParams(np.zeros(2)), data, model, 1, 0, 0.1, rng)


def test_divergence_is_reported(rng):
    model = LeastSquaresRegression(1)
    data = LocalDataset(np.array([[1e3]]), np.array([0.0]))
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergedError):
        client_opt(ModelParams(np.ones(1)), data, model, 200, 1, 10.0, rng)


def test_compressed_client_update_is_sparse_and_scaled(rng):
    model = SoftmaxRegression(4, 3)
    data = LocalDataset(rng.standard_normal((8, 4)), rng.integers(0, 3, 8))
    compressor = TopQCompressor(0.25, model.n_params)
    g = client_opt(ModelParams(model.init_params()), data, model, 1, 4, 0.1, rng, compressor)
    assert isinstance(g, SparseGradient)
    assert g.nnz <= 3 and g.weight == 8


def test_softmax_gradient_matches_finite_differences(rng):
    model = SoftmaxRegression(3, 4)
    X, y = rng.standard_normal((5, 3)), rng.integers(0, 4, 5)
    w = 0.1 * rng.standard_normal(model.n_params)
    _, grad = model.loss_and_grad(w, X, y)
    eps = 1e-6
    for j in (0, 5, model.n_params - 1):
        step = np.zeros_like(w)
        step[j] = eps
        numeric = (model.loss_and_grad(w + step, X, y)[0] - model.loss_and_grad(w - step, X, y)[0]) / (2 * eps)
        assert grad[j] == pytest.approx(numeric, abs=1e-6)


def test_make_model():
    assert make_model("softmax", 784, 10).n_params == 7850
    assert make_model("least-squares", 5, 1).n_params == 5
    with pytest.raises(DomainError):
        make_model("cnn", 784, 10)


def test_apply_update():
    params = ModelParams(np.array([1.0, 2.0]))
    out = apply_update(params, np.array([4.0, -4.0]), total_weight=2.0, server_lr=0.5)
    np.testing.assert_allclose(out.values, [2.0, 1.0])
    with pytest.raises(DomainError):
        apply_update(params, np.zeros(2), 0.0)
    with pytest.raises(DomainError):
        apply_update(params, np.zeros(3), 1.0)


def test_add_gradients_keeps_sparse_sums_sparse():
    a = SparseGradient(5, [0, 2], [1.0, 1.0], weight=1.0)
    b = SparseGradient(5, [2, 4], [-1.0, 2.0], weight=2.0)
    s = add_gradients(a, b)
    assert isinstance(s, SparseGradient)
    assert s.entries == [(0, 1.0), (4, 2.0)] and s.weight == 3.0
    d = add_gradients(a, DenseGradient(np.ones(5), 4.0))
    assert isinstance(d, DenseGradient)
    np.testing.assert_allclose(d.values, [2.0, 1.0, 2.0, 1.0, 1.0])
    with pytest.raises(DomainError):
        add_gradients(a, DenseGradient(np.ones(4), 1.0))


def test_make_compressor():
    assert make_compressor(TrainingConfig(), 100) is None
    assert isinstance(make_compressor(TrainingConfig(sparsify_q=0.1), 100), TopQCompressor)


@pytest.mark.parametrize("mode", ["iid", "dirichlet"])
def test_partition_is_disjoint_and_complete(mode):
    features = np.arange(200, dtype=float)[:, None]
    labels = np.arange(200) % 10
    parts = partition_dataset(features, labels, 8, mode, beta=0.5, seed=3)
    assert len(parts) == 8
    assert all(p.size > 0 for p in parts)
    seen = np.concatenate([p.features[:, 0] for p in parts])
    assert sorted(seen) == list(range(200))


def test_partition_errors():
    features, labels = np.zeros((5, 1)), np.zeros(5, dtype=int)
    with pytest.raises(DomainError):
        partition_dataset(features, labels, 6)
    with pytest.raises(DomainError):
        partition_dataset(features, labels, 2, mode="shards")


def test_evaluate():
    model = LeastSquaresRegression(1)
    assert evaluate(model, np.array([1.0]), np.array([[1.0], [2.0]]), np.array([1.0, 3.0])) == 0.5
    with pytest.raises(DomainError):
        evaluate(model, np.array([1.0]), np.empty((0, 1)), np.empty(0))


def test_federated_average_round_is_the_weighted_mean(tiny_datasets):
    datasets = tiny_datasets(3)
    model = SoftmaxRegression(5, 3)
    training = TrainingConfig(epochs=1, batch_size=5, learning_rate=0.1)
    params = ModelParams(model.init_params())
    out = federated_average_round(params, datasets, model, training, seed=4, iteration=1)
    total = sum(d.size for d in datasets)
    expected = params.values.copy()
    for k, data in enumerate(datasets):
        g = client_opt(params, data, model, 1, 5, 0.1, stream(4, "shuffle", k, 1))
        expected += g.values / total
    np.testing.assert_allclose(out.values, expected, rtol=1e-10, atol=1e-12)
