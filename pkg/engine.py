"""
Round engine for Federated Learning with Server Learning.

One FSL round (t):
1. Sample a subset S of S clients without replacement
2. Each i in S runs LocalSGD(x_t, eta_l, K, D_i) and returns Delta_i = y_K - x_t
3. Delta = mean of Delta_i over S
4. x_bar = x_t + eta_g * Delta
5. x_{t+1} = LocalSGD(x_bar, gamma * eta_0, K0, D0)

FedAvg stops after step 4.  DS runs FedAvg on clients whose data were
augmented with D0 once at setup.  FSLp runs the server's LocalSGD from x_t
alongside the clients and averages its update in with weight w.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import Algorithm, FederationConfig, SimulationError
from datasets import FederatedData, LabeledDataset, augment_clients
from loss_models import LossModel, ModelLike, ParamVector, PartyModels, as_party_models
from metrics import (
    RoundInternals, accuracy, drift_terms, objective_values, rolling_accuracy,
)
from rng import StreamFactory
from round_trace import RoundTrace

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def local_sgd(
    x: ParamVector,
    eta: float,
    K: int,
    data: LabeledDataset,
    model: LossModel,
    batch: int,
    rng: np.random.Generator,
    record: Optional[List[np.ndarray]] = None,
) -> ParamVector:
    """
    K steps y_{k+1} = y_k - eta * g(y_k) from y_0 = x.

    When ``record`` is a list, the iterates y_0 ... y_{K-1} are appended.
    """
    if K < 0 or eta < 0:
        raise SimulationError(f"local_sgd needs K >= 0 and eta >= 0, got K={K}, eta={eta}")
    y = np.array(x, dtype=np.float64)
    if K == 0:
        return y
    batch = min(batch, len(data))
    for _ in range(K):
        if record is not None:
            record.append(y.copy())
        g = model.stochastic_grad(y, data, batch, rng).grad
        y = y - eta * g
    if not np.all(np.isfinite(y)):
        raise SimulationError("local SGD diverged (non-finite parameters)")
    return y


def sample_clients(N: int, S: int, rng: np.random.Generator) -> Tuple[int, ...]:
    """Uniform S-subset of range(N) without replacement, in ascending order."""
    if not (1 <= S <= N):
        raise SimulationError(f"cannot sample S={S} of N={N} clients")
    if S == N:
        return tuple(range(N))
    return tuple(int(i) for i in np.sort(rng.choice(N, size=S, replace=False)))


def pretrain_server(
    x0: ParamVector,
    server_data: LabeledDataset,
    epochs: int,
    lr: float,
    batch: int,
    model: LossModel,
    rng: np.random.Generator,
) -> ParamVector:
    """Plain SGD on D0: each epoch is one shuffled pass in batches of ``batch``."""
    if epochs < 0:
        raise SimulationError(f"epochs must be non-negative, got {epochs}")
    x = np.array(x0, dtype=np.float64)
    n = len(server_data)
    if epochs == 0 or n == 0:
        return x
    batch = max(1, min(batch, n))
    for _ in range(epochs):
        order = np.arange(n) if batch == n else rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            part = server_data if idx.size == n else server_data.subset(np.sort(idx))
            x = x - lr * model.full_grad(x, part).grad
    if not np.all(np.isfinite(x)):
        raise SimulationError("server pretraining diverged")
    logger.debug("pretrained server model for %d epochs (lr=%g)", epochs, lr)
    return x


def params_digest(x: ParamVector) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Round results
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class RoundResult:
    round: int
    params_digest: str
    delta_norm: float
    sampled: Tuple[int, ...]
    internals: Optional[RoundInternals] = None

    def __post_init__(self) -> None:
        if len(set(self.sampled)) != len(self.sampled):
            raise SimulationError(f"duplicate client ids in {self.sampled}")


def _client_updates(
    x_t: ParamVector,
    ids: Sequence[int],
    clients: Sequence[LabeledDataset],
    cfg: FederationConfig,
    models: PartyModels,
    streams: StreamFactory,
    t: int,
    record: bool,
    executor: Optional[Executor],
) -> Dict[int, Tuple[np.ndarray, List[np.ndarray]]]:
    def one(i: int) -> Tuple[int, Tuple[np.ndarray, List[np.ndarray]]]:
        iterates: Optional[List[np.ndarray]] = [] if record else None
        y = local_sgd(x_t, cfg.eta_l, cfg.local_steps, clients[i], models.client(i),
                      cfg.batch_size, streams.client(t, i), iterates)
        return i, (y, iterates or [])

    if executor is None:
        return dict(one(i) for i in ids)
    return dict(executor.map(one, ids))


def _aggregate(
    x_t: ParamVector,
    clients: Sequence[LabeledDataset],
    cfg: FederationConfig,
    models: PartyModels,
    streams: StreamFactory,
    t: int,
    record: bool,
    executor: Optional[Executor],
) -> Tuple[np.ndarray, Tuple[int, ...], RoundInternals]:
    """Client phase shared by every algorithm: returns (Delta, sampled, internals)."""
    N, S = len(clients), cfg.clients_per_round
    if N != cfg.num_clients:
        raise SimulationError(f"config expects {cfg.num_clients} clients, got {N}")
    sampled = sample_clients(N, S, streams.sampling(t))

    simulate = sampled
    if record and cfg.exact_drift and S < N:
        simulate = tuple(range(N))
    updates = _client_updates(x_t, simulate, clients, cfg, models, streams, t, record, executor)

    delta = np.mean(np.stack([updates[i][0] - x_t for i in sampled]), axis=0)
    internals = RoundInternals(x_t=np.array(x_t))
    if record:
        internals.client_iterates = {i: updates[i][1] for i in simulate}
        internals.estimated = len(simulate) < N
    return delta, sampled, internals


def _finish(
    t: int, x_t: ParamVector, x_next: ParamVector, sampled, internals, record: bool
) -> Tuple[ParamVector, RoundResult]:
    result = RoundResult(
        round=t,
        params_digest=params_digest(x_next),
        delta_norm=float(np.linalg.norm(x_next - x_t)),
        sampled=sampled,
        internals=internals if record else None,
    )
    return x_next, result


# ---------------------------------------------------------------------------
# Algorithms
# ---------------------------------------------------------------------------

def fsl_round(
    x_t: ParamVector,
    clients: Sequence[LabeledDataset],
    server_data: LabeledDataset,
    cfg: FederationConfig,
    model: ModelLike,
    streams: StreamFactory,
    t: int = 0,
    record: bool = False,
    executor: Optional[Executor] = None,
) -> Tuple[ParamVector, RoundResult]:
    """Client aggregation followed by K0 server SGD steps of size gamma*eta_0."""
    models = as_party_models(model, len(clients))
    delta, sampled, internals = _aggregate(x_t, clients, cfg, models, streams, t, record, executor)
    x_bar = x_t + cfg.eta_g * delta
    server_record: Optional[List[np.ndarray]] = [] if record else None
    if len(server_data):
        x_next = local_sgd(x_bar, cfg.server_step_size, cfg.server_steps, server_data,
                           models.server, cfg.server_batch_size, streams.server(t), server_record)
    else:
        x_next = x_bar
        if record:
            server_record.extend(x_bar.copy() for _ in range(cfg.server_steps))
    if record:
        internals.server_iterates = server_record
    return _finish(t, x_t, x_next, sampled, internals, record)


def fedavg_round(
    x_t: ParamVector,
    clients: Sequence[LabeledDataset],
    server_data: LabeledDataset,
    cfg: FederationConfig,
    model: ModelLike,
    streams: StreamFactory,
    t: int = 0,
    record: bool = False,
    executor: Optional[Executor] = None,
) -> Tuple[ParamVector, RoundResult]:
    """
    FedAvg: x_{t+1} = x_t + eta_g * Delta.

    ``server_data`` is not used for learning.  For drift reporting the absent
    server phase counts as the identity, so E^{(0)} = ||x_t - x_bar||^2, the
    value FSL reports at gamma = 0.
    """
    models = as_party_models(model, len(clients))
    delta, sampled, internals = _aggregate(x_t, clients, cfg, models, streams, t, record, executor)
    x_next = x_t + cfg.eta_g * delta
    if record:
        internals.server_iterates = [x_next.copy() for _ in range(max(cfg.server_steps, 1))]
    return _finish(t, x_t, x_next, sampled, internals, record)


def ds_round(
    x_t: ParamVector,
    augmented_clients: Sequence[LabeledDataset],
    server_data: LabeledDataset,
    cfg: FederationConfig,
    model: ModelLike,
    streams: StreamFactory,
    t: int = 0,
    record: bool = False,
    executor: Optional[Executor] = None,
) -> Tuple[ParamVector, RoundResult]:
    """
    Data sharing: a FedAvg round over clients already holding D_i ∪ D0.

    Each client keeps its own model, so on the quadratic testbed, whose loss
    ignores the data, DS coincides with FedAvg.
    """
    return fedavg_round(x_t, augmented_clients, server_data, cfg, model, streams,
                        t, record, executor)


def fslp_round(
    x_t: ParamVector,
    clients: Sequence[LabeledDataset],
    server_data: LabeledDataset,
    cfg: FederationConfig,
    model: ModelLike,
    streams: StreamFactory,
    t: int = 0,
    record: bool = False,
    executor: Optional[Executor] = None,
) -> Tuple[ParamVector, RoundResult]:
    """
    Non-incremental server learning: the server acts as one more client.

    x_{t+1} = x_t + eta_g * ((1 - w) * mean_i Delta_i + w * Delta_0).
    """
    models = as_party_models(model, len(clients))
    delta, sampled, internals = _aggregate(x_t, clients, cfg, models, streams, t, record, executor)
    server_record: Optional[List[np.ndarray]] = [] if record else None
    if len(server_data):
        w_end = local_sgd(x_t, cfg.server_step_size, cfg.server_steps, server_data,
                          models.server, cfg.server_batch_size, streams.server(t), server_record)
    else:
        w_end = np.array(x_t)
    delta_0 = w_end - x_t
    w = cfg.fslp_server_weight
    x_next = x_t + cfg.eta_g * ((1.0 - w) * delta + w * delta_0)
    if record:
        internals.server_iterates = server_record or [np.array(x_t)]
    return _finish(t, x_t, x_next, sampled, internals, record)


RoundFunction = Callable[..., Tuple[ParamVector, RoundResult]]

ROUND_FUNCTIONS: Dict[Algorithm, RoundFunction] = {
    Algorithm.FSL: fsl_round,
    Algorithm.FEDAVG: fedavg_round,
    Algorithm.DS: ds_round,
    Algorithm.FSLP: fslp_round,
}


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

class FederatedEngine:
    """
    Runs T rounds of one algorithm and records a trace.

    Steps:
    1. Derive x_0 from the master seed (uniform[-0.05, 0.05])
    2. Pretrain on D0 when configured (FSL, FSLp and DS only)
    3. For DS, augment every client with D0 once
    4. Per round: diagnostics at x_t (every ``metrics_stride`` rounds),
       the algorithm's round, evaluation of x_{t+1}
    """

    def __init__(self, cfg: FederationConfig, data: FederatedData, model: ModelLike):
        self.cfg = cfg
        self.data = data
        self.models = as_party_models(model, data.num_clients)
        self.streams = StreamFactory(cfg.master_seed)
        self.round_fn = ROUND_FUNCTIONS[cfg.algorithm]
        self.params: Optional[ParamVector] = None
        if cfg.algorithm is Algorithm.DS:
            self.train_clients = augment_clients(data.clients, data.server)
        else:
            self.train_clients = list(data.clients)

    # ------------------------------------------------------------------
    # Setup
    # ------------------------------------------------------------------

    def initial_params(self) -> ParamVector:
        x0 = self.models.init_params(self.streams.init())
        if self.cfg.pretrain_epochs > 0 and self.cfg.algorithm is not Algorithm.FEDAVG:
            x0 = pretrain_server(x0, self.data.server, self.cfg.pretrain_epochs,
                                 self.cfg.pretrain_lr, self.cfg.server_batch_size,
                                 self.models.server, self.streams.pretrain())
        return x0

    def exact_gradients(self) -> bool:
        """True when every local step uses its party's full gradient."""
        cfg = self.cfg
        clients = all(self.models.client(i).data_independent or cfg.batch_size >= len(c)
                      for i, c in enumerate(self.train_clients))
        server = self.data.server
        if cfg.algorithm in (Algorithm.FEDAVG, Algorithm.DS) or len(server) == 0:
            return clients
        return clients and (self.models.server.data_independent
                            or cfg.server_batch_size >= len(server))

    # ------------------------------------------------------------------
    # Rounds
    # ------------------------------------------------------------------

    def step(
        self, x_t: ParamVector, t: int, record: bool = False,
        executor: Optional[Executor] = None,
    ) -> Tuple[ParamVector, RoundResult]:
        return self.round_fn(x_t, self.train_clients, self.data.server, self.cfg,
                             self.models, self.streams, t, record, executor)

    def run(self) -> List[RoundTrace]:
        cfg = self.cfg
        logger.info("run: %s", cfg.summary())
        x = self.initial_params()
        traces: List[RoundTrace] = []
        accs: List[float] = []
        executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
        try:
            for t in range(cfg.rounds):
                evaluate = t % cfg.metrics_stride == 0
                trace = RoundTrace(round=t)
                if evaluate:
                    self._diagnose(x, trace)
                record = evaluate and cfg.record_drift
                x_next, result = self.step(x, t, record, executor)
                if record:
                    trace.Ec_drift, trace.E0_drift = drift_terms(result.internals)
                    trace.drift_estimated = result.internals.estimated
                self._evaluate(x_next, trace, result, accs)
                traces.append(trace.validate())
                if evaluate:
                    logger.debug("%s", trace.summary())
                x = x_next
        finally:
            if executor is not None:
                executor.shutdown()
        self.params = x
        return traces

    # ------------------------------------------------------------------
    # Diagnostics
    # ------------------------------------------------------------------

    def _diagnose(self, x: ParamVector, trace: RoundTrace) -> None:
        gamma = self.cfg.gamma
        ov = objective_values(x, self.data.clients, self.data.server, self.models, gamma)
        trace.grad_norm_F = math.sqrt(ov.grad_F_sq)
        trace.grad_norm_f0 = math.sqrt(ov.grad_f0_sq)
        trace.grad_norm_Ftilde = math.sqrt(ov.grad_Ftilde_sq)
        trace.G_sq = ov.G_sq
        trace.xi_sq = ov.xi_sq if len(self.data.server) else math.nan
        trace.Ftilde = ov.Ftilde

    def _evaluate(self, x_next, trace: RoundTrace, result: RoundResult, accs: List[float]) -> None:
        trace.params_digest = result.params_digest
        trace.delta_norm = result.delta_norm
        sizes = [len(c) for c in self.data.clients]
        clients = [(self.models.client(i), c) for i, c in enumerate(self.data.clients)]
        losses = [m.loss(x_next, c) for m, c in clients]
        trace.train_loss = float(np.dot(sizes, losses) / sum(sizes))
        trace.train_acc = _weighted_accuracy(clients, x_next)
        test = self.data.test
        trace.test_acc = accuracy(self.models.server, x_next, test)
        if test is not None and len(test):
            trace.test_loss = self.models.server.loss(x_next, test)
        accs.append(trace.test_acc)
        if not math.isnan(trace.test_acc):
            trace.rolling_acc = rolling_accuracy(accs[-self.cfg.rolling_window:],
                                                 self.cfg.rolling_window)[-1]


def _weighted_accuracy(clients: Sequence[Tuple[LossModel, LabeledDataset]], x) -> float:
    accs = [accuracy(m, x, c) for m, c in clients]
    if any(math.isnan(a) for a in accs):
        return math.nan
    sizes = [len(c) for _, c in clients]
    return float(np.dot(sizes, accs) / sum(sizes))


def run(cfg: FederationConfig, data: FederatedData, model: ModelLike) -> List[RoundTrace]:
    """Execute ``cfg.rounds`` rounds and return the per-round trace."""
    return FederatedEngine(cfg, data, model).run()
