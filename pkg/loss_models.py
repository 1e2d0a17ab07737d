"""
Differentiable loss models with exact analytic gradients.

Every model maps a flat float64 parameter vector x in R^d and a
`LabeledDataset` to the empirical loss (1/n) * sum_s l(x, s) and its gradient.
Three kinds are provided:

QuadraticConsensus – l(x, s) = 0.5 * ||x - c||^2 for every sample, L = 1
SoftmaxRegression  – multinomial logistic regression, cross-entropy
MLP1               – one tanh hidden layer, cross-entropy

A `PartyModels` assigns a model to every client and to the server.  The
classifiers share one model across all parties; on the quadratic testbed each
party carries its own center, so party objectives differ while the data only
fixes party sizes.

Full-data losses and gradients reduce over the samples in a canonical order
(label, then feature values), so they are bit-identical under any permutation
of the dataset.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from config import ContractError
from datasets import LabeledDataset

ParamVector = np.ndarray

INIT_SCALE = 0.05


# ---------------------------------------------------------------------------
# Gradient estimate
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class GradEstimate:
    """A gradient together with the sample indices that produced it."""

    grad: ParamVector
    batch_indices: np.ndarray
    is_exact: bool


def canonical_order(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row order sorted by label, then by feature columns left to right."""
    keys = tuple(features[:, j] for j in range(features.shape[1] - 1, -1, -1)) + (labels,)
    return np.lexsort(keys)


# ---------------------------------------------------------------------------
# Base class
# ---------------------------------------------------------------------------

class LossModel(abc.ABC):
    """Immutable architecture description plus loss/gradient evaluation."""

    kind: str = "abstract"
    #: loss and gradient do not depend on the samples, so minibatches add no noise
    data_independent: bool = False

    @property
    @abc.abstractmethod
    def dim(self) -> int:
        """Length d of the parameter vector."""

    # -- array-level kernels implemented by subclasses ------------------

    @abc.abstractmethod
    def _loss(self, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        ...

    @abc.abstractmethod
    def _grad(self, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def _per_sample_grads(self, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        ...

    def predict(self, params: ParamVector, features: np.ndarray) -> Optional[np.ndarray]:
        """Predicted labels, or None when the model is not a classifier."""
        return None

    def smoothness(self) -> Optional[float]:
        """Known smoothness constant L, if any."""
        return None

    # -- contract checks --------------------------------------------------

    def check_params(self, params: ParamVector) -> np.ndarray:
        x = np.asarray(params, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ContractError(f"{self.kind} expects {self.dim} parameters, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError("parameter vector contains NaN or Inf")
        return x

    def check_data(self, data: LabeledDataset) -> None:
        if len(data) == 0:
            raise ContractError("empty dataset")
        self._check_features(data)

    def _check_features(self, data: LabeledDataset) -> None:
        ...

    def _arrays(self, data: LabeledDataset) -> Tuple[np.ndarray, np.ndarray]:
        order = canonical_order(data.features, data.labels)
        return data.features[order], data.labels[order]

    # -- public operations ------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        """Deterministic uniform[-0.05, 0.05] initialisation."""
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=self.dim)

    def loss(self, params: ParamVector, data: LabeledDataset) -> float:
        x = self.check_params(params)
        self.check_data(data)
        return float(self._loss(x, *self._arrays(data)))

    def full_grad(self, params: ParamVector, data: LabeledDataset) -> GradEstimate:
        x = self.check_params(params)
        self.check_data(data)
        grad = self._grad(x, *self._arrays(data))
        return GradEstimate(grad, np.arange(len(data)), True)

    def stochastic_grad(
        self,
        params: ParamVector,
        data: LabeledDataset,
        batch_size: int,
        rng: np.random.Generator,
    ) -> GradEstimate:
        """
        Gradient over a uniformly drawn batch (without replacement).

        ``batch_size == len(data)`` returns the full gradient and draws no
        random numbers.
        """
        n = len(data)
        if not (1 <= batch_size <= n):
            raise ContractError(f"batch_size {batch_size} outside [1, {n}]")
        if batch_size == n:
            return self.full_grad(params, data)
        x = self.check_params(params)
        self._check_features(data)
        idx = np.sort(rng.choice(n, size=batch_size, replace=False))
        grad = self._grad(x, data.features[idx], data.labels[idx])
        return GradEstimate(grad, idx, False)

    def per_sample_grads(self, params: ParamVector, data: LabeledDataset) -> np.ndarray:
        """Gradient of l(x, s) for every sample, shape (n, d), in dataset order."""
        x = self.check_params(params)
        self.check_data(data)
        return self._per_sample_grads(x, data.features, data.labels)

    def finite_diff_check(self, params: ParamVector, data: LabeledDataset, h: float = 1e-4) -> float:
        """
        Largest coordinate error between the analytic gradient and the
        central difference (l(x + h e_j) - l(x - h e_j)) / 2h.

        Errors are relative to max(|analytic|, |numeric|, 1) so coordinates
        with a vanishing gradient are compared absolutely.
        """
        if h <= 0:
            raise ContractError(f"h must be positive, got {h}")
        x = self.check_params(params)
        self.check_data(data)
        X, y = self._arrays(data)
        analytic = self._grad(x, X, y)
        worst = 0.0
        shifted = x.copy()
        for j in range(self.dim):
            shifted[j] = x[j] + h
            up = self._loss(shifted, X, y)
            shifted[j] = x[j] - h
            down = self._loss(shifted, X, y)
            shifted[j] = x[j]
            numeric = (up - down) / (2.0 * h)
            scale = max(abs(analytic[j]), abs(numeric), 1.0)
            worst = max(worst, abs(analytic[j] - numeric) / scale)
        return worst


# ---------------------------------------------------------------------------
# Quadratic consensus
# ---------------------------------------------------------------------------

class QuadraticConsensus(LossModel):
    """f(x) = 0.5 * ||x - center||^2 whatever the data; every sample has this loss."""

    kind = "quadratic"
    data_independent = True

    def __init__(self, center: Sequence[float]):
        c = np.array(center, dtype=np.float64)
        if c.ndim != 1 or c.size == 0:
            raise ContractError(f"center must be a non-empty vector, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ContractError("center contains NaN or Inf")
        c.setflags(write=False)
        self._center = c

    @classmethod
    def zeros(cls, dim: int) -> "QuadraticConsensus":
        return cls(np.zeros(dim))

    @property
    def center(self) -> np.ndarray:
        return self._center

    @property
    def dim(self) -> int:
        return int(self._center.shape[0])

    def smoothness(self) -> float:
        return 1.0

    def _arrays(self, data: LabeledDataset) -> Tuple[np.ndarray, np.ndarray]:
        return data.features, data.labels

    def _loss(self, params, X, y):
        r = params - self._center
        return 0.5 * float(r @ r)

    def _grad(self, params, X, y):
        return params - self._center

    def _per_sample_grads(self, params, X, y):
        return np.tile(params - self._center, (X.shape[0], 1))


# ---------------------------------------------------------------------------
# Softmax regression
# ---------------------------------------------------------------------------

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _one_hot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((y.shape[0], k), dtype=np.float64)
    out[np.arange(y.shape[0]), y] = 1.0
    return out


class _Classifier(LossModel):
    def __init__(self, input_dim: int, num_classes: int):
        if input_dim < 1 or num_classes < 2:
            raise ContractError(
                f"need input_dim >= 1 and num_classes >= 2, got {input_dim}, {num_classes}"
            )
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)

    def _check_features(self, data: LabeledDataset) -> None:
        if data.dim != self.input_dim:
            raise ContractError(f"feature dim {data.dim} != model input dim {self.input_dim}")
        if data.num_classes > self.num_classes:
            raise ContractError(
                f"dataset has {data.num_classes} classes, model only {self.num_classes}"
            )

    @abc.abstractmethod
    def _logits(self, params: np.ndarray, X: np.ndarray) -> np.ndarray:
        ...

    def _loss(self, params, X, y):
        logp = _log_softmax(self._logits(params, X))
        return -float(np.mean(logp[np.arange(y.shape[0]), y]))

    def predict(self, params: ParamVector, features: np.ndarray) -> np.ndarray:
        x = self.check_params(params)
        return np.argmax(self._logits(x, np.asarray(features, dtype=np.float64)), axis=1)


class SoftmaxRegression(_Classifier):
    """Logits W x + b; parameters laid out as [W (k*p, row-major), b (k)]."""

    kind = "softmax"

    @property
    def dim(self) -> int:
        return self.num_classes * self.input_dim + self.num_classes

    def _unpack(self, params) -> Tuple[np.ndarray, np.ndarray]:
        k, p = self.num_classes, self.input_dim
        return params[: k * p].reshape(k, p), params[k * p:]

    def _logits(self, params, X):
        W, b = self._unpack(params)
        return X @ W.T + b

    def _residual(self, params, X, y):
        probs = np.exp(_log_softmax(self._logits(params, X)))
        return probs - _one_hot(y, self.num_classes)

    def _grad(self, params, X, y):
        R = self._residual(params, X, y) / X.shape[0]
        return np.concatenate([(R.T @ X).ravel(), R.sum(axis=0)])

    def _per_sample_grads(self, params, X, y):
        R = self._residual(params, X, y)
        gW = np.einsum("nk,np->nkp", R, X).reshape(X.shape[0], -1)
        return np.hstack([gW, R])


class MLP1(_Classifier):
    """
    One hidden tanh layer.

    Parameters are laid out as [W1 (h*p), b1 (h), W2 (k*h), b2 (k)].
    """

    kind = "mlp"

    def __init__(self, input_dim: int, hidden: int, num_classes: int):
        super().__init__(input_dim, num_classes)
        if hidden < 1:
            raise ContractError(f"hidden must be positive, got {hidden}")
        self.hidden = int(hidden)

    @property
    def dim(self) -> int:
        p, h, k = self.input_dim, self.hidden, self.num_classes
        return h * p + h + k * h + k

    def _unpack(self, params):
        p, h, k = self.input_dim, self.hidden, self.num_classes
        o1 = h * p
        o2 = o1 + h
        o3 = o2 + k * h
        return (params[:o1].reshape(h, p), params[o1:o2],
                params[o2:o3].reshape(k, h), params[o3:])

    def _forward(self, params, X):
        W1, b1, W2, b2 = self._unpack(params)
        H = np.tanh(X @ W1.T + b1)
        return H, H @ W2.T + b2

    def _logits(self, params, X):
        return self._forward(params, X)[1]

    def _backward(self, params, X, y):
        _, _, W2, _ = self._unpack(params)
        H, logits = self._forward(params, X)
        R = np.exp(_log_softmax(logits)) - _one_hot(y, self.num_classes)
        dZ = (R @ W2) * (1.0 - H * H)
        return H, R, dZ

    def _grad(self, params, X, y):
        H, R, dZ = self._backward(params, X, y)
        n = X.shape[0]
        return np.concatenate([
            (dZ.T @ X).ravel() / n,
            dZ.sum(axis=0) / n,
            (R.T @ H).ravel() / n,
            R.sum(axis=0) / n,
        ])

    def _per_sample_grads(self, params, X, y):
        H, R, dZ = self._backward(params, X, y)
        n = X.shape[0]
        return np.hstack([
            np.einsum("nh,np->nhp", dZ, X).reshape(n, -1),
            dZ,
            np.einsum("nk,nh->nkh", R, H).reshape(n, -1),
            R,
        ])


# ---------------------------------------------------------------------------
# Party models
# ---------------------------------------------------------------------------

class PartyModels:
    """
    Loss model of every client and of the server.

    The server's model also scores the test set.  All models share one
    parameter dimension.
    """

    def __init__(self, clients: Sequence[LossModel], server: LossModel):
        self._clients = tuple(clients)
        if not self._clients:
            raise ContractError("need a model for at least one client")
        dims = {m.dim for m in self._clients} | {server.dim}
        if len(dims) != 1:
            raise ContractError(f"party models disagree on the parameter dimension: {sorted(dims)}")
        self._server = server

    @classmethod
    def shared(cls, model: LossModel, num_clients: int) -> "PartyModels":
        return cls([model] * num_clients, model)

    @property
    def num_clients(self) -> int:
        return len(self._clients)

    @property
    def dim(self) -> int:
        return self._server.dim

    @property
    def server(self) -> LossModel:
        return self._server

    def client(self, i: int) -> LossModel:
        if not (0 <= i < len(self._clients)):
            raise ContractError(f"no model for client {i} of {len(self._clients)}")
        return self._clients[i]

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        return self._server.init_params(rng)


ModelLike = Union[LossModel, PartyModels]


def as_party_models(model: ModelLike, num_clients: int) -> PartyModels:
    """``model`` itself when it already assigns models per party, else a shared assignment."""
    if isinstance(model, PartyModels):
        if model.num_clients != num_clients:
            raise ContractError(f"models for {model.num_clients} clients, data for {num_clients}")
        return model
    return PartyModels.shared(model, num_clients)


def quadratic_party_models(
    client_centers: Sequence[Sequence[float]], server_center: Sequence[float]
) -> PartyModels:
    """One `QuadraticConsensus` per client center plus the server's."""
    return PartyModels([QuadraticConsensus(c) for c in client_centers],
                       QuadraticConsensus(server_center))


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------

def loss(model: LossModel, params: ParamVector, data: LabeledDataset) -> float:
    return model.loss(params, data)


def full_grad(model: LossModel, params: ParamVector, data: LabeledDataset) -> GradEstimate:
    return model.full_grad(params, data)


def stochastic_grad(
    model: LossModel,
    params: ParamVector,
    data: LabeledDataset,
    batch_size: int,
    rng: np.random.Generator,
) -> GradEstimate:
    return model.stochastic_grad(params, data, batch_size, rng)


def finite_diff_check(model: LossModel, params: ParamVector, data: LabeledDataset, h: float = 1e-4) -> float:
    return model.finite_diff_check(params, data, h)


def build_model(kind: str, dim: int, num_classes: int, hidden: int = 16) -> LossModel:
    """Factory used by the experiment harness."""
    kind = kind.strip().lower()
    if kind in ("quadratic", "quadratic_consensus"):
        return QuadraticConsensus.zeros(dim)
    if kind in ("softmax", "softmax_regression"):
        return SoftmaxRegression(dim, num_classes)
    if kind in ("mlp", "mlp1"):
        return MLP1(dim, hidden, num_classes)
    raise ContractError(f"unknown model kind {kind!r}")
