"""
Diagnostics for federated runs: objective values, gradient dissimilarity,
client/server drift, rolling accuracy and rise time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import DiagnosticsError
from datasets import LabeledDataset
from loss_models import LossModel, ModelLike, PartyModels, as_party_models

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Objective values
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class ObjectiveValues:
    """F, f0, F~ and their gradients at one point."""

    F: float
    f0: float
    Ftilde: float
    grad_F: np.ndarray
    grad_f0: np.ndarray
    grad_Ftilde: np.ndarray
    client_grads: List[np.ndarray] = field(default_factory=list)

    @property
    def grad_F_sq(self) -> float:
        return float(self.grad_F @ self.grad_F)

    @property
    def grad_f0_sq(self) -> float:
        return float(self.grad_f0 @ self.grad_f0)

    @property
    def grad_Ftilde_sq(self) -> float:
        return float(self.grad_Ftilde @ self.grad_Ftilde)

    @property
    def xi_sq(self) -> float:
        diff = self.grad_f0 - self.grad_F
        return float(diff @ diff)

    @property
    def G_sq(self) -> float:
        if not self.client_grads:
            return math.nan
        return float(np.mean([np.sum((g - self.grad_F) ** 2) for g in self.client_grads]))


def _global_gradient(
    x: np.ndarray, clients: Sequence[LabeledDataset], models: PartyModels
) -> Tuple[float, np.ndarray, List[np.ndarray]]:
    """Loss and gradient of F over the union of client data, plus per-client gradients."""
    sizes = np.array([len(c) for c in clients], dtype=np.float64)
    weights = sizes / sizes.sum()
    losses, grads = [], []
    for i, ds in enumerate(clients):
        model = models.client(i)
        losses.append(model.loss(x, ds))
        grads.append(model.full_grad(x, ds).grad)
    F = float(np.dot(weights, losses))
    grad_F = np.tensordot(weights, np.stack(grads), axes=1)
    return F, grad_F, grads


def objective_values(
    x: np.ndarray,
    clients: Sequence[LabeledDataset],
    server: LabeledDataset,
    model: ModelLike,
    gamma: float,
) -> ObjectiveValues:
    """
    Evaluate F (all client data), f0 (server data) and
    F~ = (F + gamma * f0) / (1 + gamma) with exact gradients.

    An empty server dataset contributes f0 = F, so F~ = F.  ``model`` is one
    model shared by every party or a `PartyModels`.
    """
    models = as_party_models(model, len(clients))
    F, grad_F, grads = _global_gradient(x, clients, models)
    if len(server):
        f0 = models.server.loss(x, server)
        grad_f0 = models.server.full_grad(x, server).grad
    else:
        f0, grad_f0 = F, grad_F
    Ftilde = (F + gamma * f0) / (1.0 + gamma)
    grad_Ftilde = (grad_F + gamma * grad_f0) / (1.0 + gamma)
    return ObjectiveValues(F, f0, Ftilde, grad_F, grad_f0, grad_Ftilde, grads)


def grad_dissimilarity(
    x: np.ndarray,
    clients: Sequence[LabeledDataset],
    model: ModelLike,
    server: Optional[LabeledDataset] = None,
) -> Tuple[float, float]:
    """
    (G_t^2, xi_t^2) at ``x`` from full gradients.

    G_t^2 = (1/N) sum_i ||grad f_i - grad F||^2 and
    xi_t^2 = ||grad f0 - grad F||^2 (NaN without server data).
    """
    models = as_party_models(model, len(clients))
    _, grad_F, grads = _global_gradient(x, clients, models)
    G_sq = float(np.mean([np.sum((g - grad_F) ** 2) for g in grads]))
    if server is None or len(server) == 0:
        return G_sq, math.nan
    diff = models.server.full_grad(x, server).grad - grad_F
    return G_sq, float(diff @ diff)


def accuracy(model: LossModel, x: np.ndarray, data: Optional[LabeledDataset]) -> float:
    if data is None or len(data) == 0:
        return math.nan
    predicted = model.predict(x, data.features)
    if predicted is None:
        return math.nan
    return float(np.mean(predicted == data.labels))


# ---------------------------------------------------------------------------
# Drift
# ---------------------------------------------------------------------------

@dataclass
class RoundInternals:
    """
    Local iterates recorded during one round.

    ``client_iterates[i]`` holds x^{(i)}_{t,0} ... x^{(i)}_{t,K-1} and
    ``server_iterates`` holds w_{t,0} ... w_{t,K0-1}.  ``estimated`` is set
    when only the sampled clients stand in for the average over all N.
    """

    x_t: np.ndarray
    client_iterates: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    server_iterates: List[np.ndarray] = field(default_factory=list)
    estimated: bool = False


def _mean_sq_distance(origin: np.ndarray, points: Sequence[np.ndarray]) -> float:
    if not points:
        return 0.0
    diffs = np.stack(points) - origin
    return float(np.mean(np.sum(diffs * diffs, axis=1)))


def drift_terms(internals: Optional[RoundInternals]) -> Tuple[float, float]:
    """
    (E^{(c)}, E^{(0)}): mean squared distance of local iterates from x_t.

    E^{(c)} = (1/KN) sum_i sum_k ||x_t - x^{(i)}_{t,k-1}||^2 and
    E^{(0)} = (1/K0) sum_k ||x_t - w_{t,k-1}||^2.
    """
    if internals is None:
        raise DiagnosticsError("drift terms need recorded iterates (enable record_drift)")
    client_points = [p for its in internals.client_iterates.values() for p in its]
    e_c = _mean_sq_distance(internals.x_t, client_points)
    e_0 = _mean_sq_distance(internals.x_t, internals.server_iterates)
    return e_c, e_0


# ---------------------------------------------------------------------------
# Accuracy series
# ---------------------------------------------------------------------------

def rolling_accuracy(series: Sequence[float], window: int = 20) -> List[float]:
    """Trailing mean; the first ``window - 1`` entries average the available prefix."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    values = [float(v) for v in series]
    if window == 1:
        return values
    out = []
    for t in range(len(values)):
        chunk = values[max(0, t + 1 - window): t + 1]
        out.append(math.fsum(chunk) / len(chunk))
    return out


def rise_time(series: Sequence[float], fraction: float = 0.9) -> Optional[int]:
    """First index whose value reaches ``fraction`` of the last value."""
    values = list(series)
    if not values or math.isnan(values[-1]):
        return None
    target = fraction * values[-1]
    for t, value in enumerate(values):
        if value >= target:
            return t
    return None
