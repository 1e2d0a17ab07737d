"""
Federation configuration for the FSL simulator.

This module defines the exception hierarchy shared by every subsystem and the
`FederationConfig` dataclass, which carries all protocol hyperparameters of a
single simulated run.

Symbol recap
------------
N    – number of clients                 S    – clients sampled per round
K    – client local steps                K0   – server local steps
eta_l – client step size                 eta_g – global (aggregation) step size
eta_0 – server base step size            gamma – server weight (server step = gamma*eta_0)
T    – rounds                            B, B0 – client / server batch sizes
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, fields
from typing import Any, Dict, Optional


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class FederationError(Exception):
    """Base class for every error raised by the simulator."""


class ContractError(FederationError, ValueError):
    """A model or dataset contract was violated (dimension, range, finiteness)."""


class PartitionError(FederationError, ValueError):
    """A partition or server-dataset request cannot be satisfied."""


class ConfigError(FederationError, ValueError):
    """Invalid configuration.  ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class SimulationError(FederationError):
    pass


class DiagnosticsError(SimulationError):
    pass


class BoundViolation(FederationError):
    """A step-size premise of a bound is not satisfied."""


class ReportError(FederationError):
    pass


# ---------------------------------------------------------------------------
# Algorithm kinds
# ---------------------------------------------------------------------------

class Algorithm(str, enum.Enum):
    FSL = "FSL"
    FEDAVG = "FedAvg"
    DS = "DS"
    FSLP = "FSLp"

    @classmethod
    def parse(cls, value: Any) -> "Algorithm":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        for member in cls:
            if member.value.lower() == text or member.name.lower() == text:
                return member
        raise ConfigError("algorithm", f"unknown algorithm {value!r}")

    @property
    def has_server_learning(self) -> bool:
        return self in (Algorithm.FSL, Algorithm.FSLP)


# ---------------------------------------------------------------------------
# Main dataclass
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class FederationConfig:
    """
    All hyperparameters of one simulated run.

    Unset step sizes are bound to the experimental defaults:
    ``eta_g = sqrt(S)`` and ``eta_0 = sqrt(S) * eta_l * K / K0``.  When eta_g
    keeps its default the effective-step identity ``K * eta_l * eta_g == K0 * eta_0``
    holds.
    FedAvg and DS never learn at the server; their ``gamma`` is forced to 0.

    Parameters
    ----------
    algorithm : Algorithm
    num_clients, clients_per_round : int
        N and S, with ``1 <= S <= N``.
    local_steps, server_steps : int
        K and K0.
    eta_l, eta_g, eta_0, gamma : float
        Step sizes and server weight, all non-negative.
    rounds : int
        T, number of global rounds.
    batch_size, server_batch_size : int
        B and B0 (B0 defaults to B).
    pretrain_epochs, pretrain_lr : int, float
        Server pretraining on its own data before round 0 (0 epochs = off).
    master_seed : int
        Root of every random stream of the run.
    fslp_server_weight : float
        Weight w of the server update in FSLp, in (0, 1]; default 1/(S+1).
    metrics_stride : int
        Gradient diagnostics are evaluated every ``metrics_stride`` rounds.
    rolling_window : int
        Window of the rolling test accuracy.
    record_drift : bool
        Record local iterates so client/server drift can be reported.
    exact_drift : bool
        When S < N, also simulate unsampled clients for the drift average.
    workers : int
        Threads used for client updates inside a round.
    """

    algorithm: Algorithm
    num_clients: int
    clients_per_round: int
    local_steps: int
    server_steps: int
    eta_l: float
    rounds: int
    batch_size: int
    eta_g: Optional[float] = None
    eta_0: Optional[float] = None
    gamma: float = 1.0
    server_batch_size: Optional[int] = None
    pretrain_epochs: int = 0
    pretrain_lr: float = 0.01
    master_seed: int = 0
    fslp_server_weight: Optional[float] = None
    metrics_stride: int = 1
    rolling_window: int = 20
    record_drift: bool = False
    exact_drift: bool = False
    workers: int = 1

    # ------------------------------------------------------------------ #
    # Initialisation & validation                                        #
    # ------------------------------------------------------------------ #

    def __post_init__(self) -> None:
        self.algorithm = Algorithm.parse(self.algorithm)

        _require_int("num_clients", self.num_clients, minimum=1)
        _require_int("clients_per_round", self.clients_per_round, minimum=1)
        if self.clients_per_round > self.num_clients:
            raise ConfigError(
                "S",
                f"clients_per_round ({self.clients_per_round}) exceeds "
                f"num_clients ({self.num_clients})",
            )
        _require_int("local_steps", self.local_steps, minimum=1)
        min_server_steps = 1 if self.algorithm.has_server_learning else 0
        _require_int("server_steps", self.server_steps, minimum=min_server_steps)
        _require_int("rounds", self.rounds, minimum=0)
        _require_int("batch_size", self.batch_size, minimum=1)
        if self.server_batch_size is None:
            self.server_batch_size = self.batch_size
        _require_int("server_batch_size", self.server_batch_size, minimum=1)
        _require_int("pretrain_epochs", self.pretrain_epochs, minimum=0)
        _require_int("metrics_stride", self.metrics_stride, minimum=1)
        _require_int("rolling_window", self.rolling_window, minimum=1)
        _require_int("workers", self.workers, minimum=1)
        _require_int("master_seed", self.master_seed, minimum=0)

        if not self.algorithm.has_server_learning:
            self.gamma = 0.0

        _require_non_negative("eta_l", self.eta_l)
        _require_non_negative("gamma", self.gamma)
        _require_non_negative("pretrain_lr", self.pretrain_lr)

        if self.eta_g is None:
            self.eta_g = math.sqrt(self.clients_per_round)
        _require_non_negative("eta_g", self.eta_g)

        if self.eta_0 is None:
            self.eta_0 = (
                math.sqrt(self.clients_per_round) * self.eta_l * self.local_steps
                / self.server_steps
                if self.server_steps > 0 else 0.0
            )
        _require_non_negative("eta_0", self.eta_0)

        if self.fslp_server_weight is None:
            self.fslp_server_weight = 1.0 / (self.clients_per_round + 1)
        w = float(self.fslp_server_weight)
        if not (0.0 < w <= 1.0):
            raise ConfigError("fslp_server_weight", f"must lie in (0, 1], got {w!r}")
        self.fslp_server_weight = w

    # ------------------------------------------------------------------ #
    # Computed properties                                                #
    # ------------------------------------------------------------------ #

    @property
    def server_step_size(self) -> float:
        """Step size actually used by the server, gamma * eta_0."""
        return self.gamma * self.eta_0

    @property
    def effective_client_step(self) -> float:
        """K * eta_l * eta_g."""
        return self.local_steps * self.eta_l * self.eta_g

    @property
    def effective_server_step(self) -> float:
        """K0 * eta_0."""
        return self.server_steps * self.eta_0

    # ------------------------------------------------------------------ #
    # Serialisation                                                      #
    # ------------------------------------------------------------------ #

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["algorithm"] = self.algorithm.value
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FederationConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown federation field")
        return cls(**data)

    def summary(self) -> str:
        return (
            f"{self.algorithm.value} | N={self.num_clients} S={self.clients_per_round} "
            f"K={self.local_steps} K0={self.server_steps} | eta_l={self.eta_l:g} "
            f"eta_g={self.eta_g:g} eta_0={self.eta_0:g} gamma={self.gamma:g} | "
            f"T={self.rounds} B={self.batch_size} B0={self.server_batch_size} "
            f"seed={self.master_seed}"
        )


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------

def _require_int(name: str, value: Any, minimum: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(name, f"must be >= {minimum}, got {value}")


def _require_non_negative(name: str, value: Any) -> None:
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"must be a number, got {value!r}") from None
    if not math.isfinite(number) or number < 0.0:
        raise ConfigError(name, f"must be a finite non-negative number, got {value!r}")
