"""Local training, gradient containers, data partitioning and the compute-time model."""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy.special import logsumexp

from .config import ComputeCostModel, TrainingConfig
from .errors import DivergedError, DomainError
from .seeding import stream
from .sparsify import SparseGradient, TopQCompressor, sparse_add

logger = logging.getLogger(__name__)


@dataclass
class ModelParams:
    values: np.ndarray
    elem_bits: int = 32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise DomainError("model parameters must be finite")

    @property
    def n_d(self) -> int:
        return self.values.size

    @property
    def size_bits(self) -> int:
        return self.n_d * self.elem_bits

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.elem_bits)


@dataclass(eq=False)
class DenseGradient:
    values: np.ndarray
    weight: float  # D_k, or the sum of D_k over an aggregate
    elem_bits: int = 32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.weight < 0:
            raise DomainError("gradient weight must be >= 0")

    @property
    def n_d(self) -> int:
        return self.values.size

    @property
    def wire_bits(self) -> int:
        return self.n_d * self.elem_bits

    def to_dense(self) -> np.ndarray:
        return self.values


Gradient = DenseGradient | SparseGradient


def to_dense(g: Gradient | np.ndarray) -> np.ndarray:
    if isinstance(g, np.ndarray):
        return g
    return g.to_dense()


def add_gradients(a: Gradient, b: Gradient) -> Gradient:
    """Sum two weighted gradients; sparse + sparse stays sparse."""
    if a.n_d != b.n_d:
        raise DomainError(f"dimension mismatch: {a.n_d} vs {b.n_d}")
    if isinstance(a, SparseGradient) and isinstance(b, SparseGradient):
        return sparse_add(a, b)
    return DenseGradient(to_dense(a) + to_dense(b), a.weight + b.weight, a.elem_bits)


@dataclass
class LocalDataset:
    features: np.ndarray  # (D_k, F)
    labels: np.ndarray  # (D_k,)

    @property
    def size(self) -> int:
        return len(self.labels)


class Model(Protocol):
    n_params: int

    def init_params(self) -> np.ndarray: ...

    def loss_and_grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]: ...

    def predict(self, w: np.ndarray, X: np.ndarray) -> np.ndarray: ...


class SoftmaxRegression:
    """Multinomial logistic regression; parameters are W (F x C) then b (C), flattened."""

    def __init__(self, num_features: int, num_classes: int):
        self.num_features = num_features
        self.num_classes = num_classes
        self.n_params = (num_features + 1) * num_classes

    def unpack(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        split = self.num_features * self.num_classes
        return w[:split].reshape(self.num_features, self.num_classes), w[split:]

    def init_params(self) -> np.ndarray:
        return np.zeros(self.n_params)

    def loss_and_grad(self, w, X, y):
        W, b = self.unpack(w)
        logits = X @ W + b
        log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
        rows = np.arange(len(y))
        loss = -float(np.mean(log_probs[rows, y]))
        delta = np.exp(log_probs)
        delta[rows, y] -= 1.0
        delta /= len(y)
        return loss, np.concatenate([(X.T @ delta).ravel(), delta.sum(axis=0)])

    def predict(self, w, X):
        W, b = self.unpack(w)
        return np.argmax(X @ W + b, axis=1)


class LeastSquaresRegression:
    """f(w) = 1/2 (w.x - y)^2 averaged over the batch, no bias term."""

    def __init__(self, num_features: int):
        self.num_features = num_features
        self.n_params = num_features

    def init_params(self) -> np.ndarray:
        return np.zeros(self.n_params)

    def loss_and_grad(self, w, X, y):
        residual = X @ w - y
        return 0.5 * float(np.mean(residual**2)), X.T @ residual / len(y)

    def predict(self, w, X):
        return X @ w


def make_model(kind: str, num_features: int, num_classes: int) -> Model:
    if kind == "softmax":
        return SoftmaxRegression(num_features, num_classes)
    if kind == "least-squares":
        return LeastSquaresRegression(num_features)
    raise DomainError(f"unknown model kind {kind!r}")


def client_opt(
    params: ModelParams,
    data: LocalDataset,
    model: Model,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    compressor: Callable[[np.ndarray], SparseGradient] | None = None,
) -> Gradient:
    """Run local SGD and return D_k times the (compressed) effective gradient.

    The effective gradient is final minus initial local parameters after
    ``epochs`` passes of shuffled mini-batch SGD.
    """
    if data.size == 0:
        raise DomainError("client_opt needs a nonempty local dataset")
    if epochs < 0 or batch_size < 1 or not lr > 0:
        raise DomainError("need epochs >= 0, batch_size >= 1 and lr > 0")
    w = params.values.copy()
    for epoch in range(epochs):
        order = rng.permutation(data.size)
        for start in range(0, data.size, batch_size):
            batch = order[start : start + batch_size]
            loss, grad = model.loss_and_grad(w, data.features[batch], data.labels[batch])
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergedError(f"non-finite loss {loss} in epoch {epoch}")
            w -= lr * grad
    effective = w - params.values
    weight = float(data.size)
    if compressor is None:
        return DenseGradient(weight * effective, weight, params.elem_bits)
    return compressor(effective).scaled(weight, weight=weight)


def make_compressor(training: TrainingConfig, n_d: int) -> TopQCompressor | None:
    if training.sparsify_q is None:
        return None
    return TopQCompressor(training.sparsify_q, n_d, training.elem_bits)


def compute_time(cost: ComputeCostModel, D_k: int, n_d: int, epochs: int, batch_size: int) -> float:
    """Seconds a satellite spends on one call of client_opt."""
    if cost.fixed_override is not None:
        return cost.fixed_override
    cycles = (
        epochs * D_k * (cost.c_epoch + n_d * cost.c_s)
        + cost.c_step * n_d * (epochs * math.ceil(D_k / batch_size) + 1)
        + cost.c_compress
        + cost.c_os
    )
    return cycles / cost.cpu_freq


def apply_update(
    params: ModelParams, aggregate: Gradient | np.ndarray, total_weight: float, server_lr: float = 1.0
) -> ModelParams:
    """w + eta_s * aggregate / D; the aggregate already carries the D_k factors."""
    if not total_weight > 0:
        raise DomainError(f"total weight must be > 0, got {total_weight}")
    dense = to_dense(aggregate)
    if dense.shape != params.values.shape:
        raise DomainError(f"aggregate shape {dense.shape} does not match model {params.values.shape}")
    return ModelParams(params.values + server_lr * (dense / total_weight), params.elem_bits)


def partition_dataset(
    features: np.ndarray,
    labels: np.ndarray,
    K: int,
    mode: str = "iid",
    beta: float = 0.5,
    seed: int = 0,
    max_attempts: int = 100,
) -> list[LocalDataset]:
    """Split a labelled set into K disjoint local datasets.

    ``iid`` deals a random permutation out in near-equal parts. ``dirichlet``
    splits every class over the K clients with proportions drawn from
    Dirichlet(beta), redrawing until no client is left empty.
    """
    n = len(labels)
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}")
    if K > n:
        raise DomainError(f"cannot split {n} samples over {K} clients")
    rng = stream(seed, "partition")
    if mode == "iid":
        parts = np.array_split(rng.permutation(n), K)
    elif mode == "dirichlet":
        if not beta > 0:
            raise DomainError(f"beta must be > 0, got {beta}")
        parts = None
        for _ in range(max_attempts):
            buckets = [[] for _ in range(K)]
            for c in np.unique(labels):
                members = rng.permutation(np.flatnonzero(labels == c))
                shares = rng.dirichlet(np.full(K, beta))
                cuts = (np.cumsum(shares)[:-1] * len(members)).astype(int)
                for k, chunk in enumerate(np.split(members, cuts)):
                    buckets[k].append(chunk)
            parts = [np.concatenate(b) for b in buckets]
            if min(len(p) for p in parts) > 0:
                break
        else:
            logger.warning("dirichlet partition left empty clients after %d draws, rebalancing", max_attempts)
            for k in range(K):
                if len(parts[k]) == 0:
                    donor = max(range(K), key=lambda j: len(parts[j]))
                    parts[k], parts[donor] = parts[donor][-1:], parts[donor][:-1]
    else:
        raise DomainError(f"unknown partition mode {mode!r}")
    return [LocalDataset(features[np.sort(p)], labels[np.sort(p)]) for p in parts]


def evaluate(model: Model, params: ModelParams | np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy."""
    if len(labels) == 0:
        raise DomainError("evaluate needs a nonempty test set")
    w = params.values if isinstance(params, ModelParams) else params
    return float(np.mean(model.predict(w, features) == labels))


def federated_average_round(
    params: ModelParams,
    datasets: list[LocalDataset],
    model: Model,
    training: TrainingConfig,
    seed: int,
    iteration: int,
    keys: list[int] | None = None,
    server_lr: float = 1.0,
) -> ModelParams:
    """One offline FedAvg round with the simulator's shuffling streams.

    ``keys[k]`` is the stream key of client k; it defaults to its position.
    """
    keys = list(range(len(datasets))) if keys is None else keys
    total = sum(d.size for d in datasets)
    aggregate = np.zeros(params.n_d)
    for key, data in zip(keys, datasets):
        rng = stream(seed, "shuffle", key, iteration)
        g = client_opt(params, data, model, training.epochs, training.batch_size, training.learning_rate, rng)
        aggregate += g.values
    return apply_update(params, aggregate, total, server_lr)
