"""
Convergence-theory apparatus for FSL.

Constants
---------
L        – smoothness of every f_i and f0
G        – bound on the client gradient dissimilarity (1/N) sum_i ||grad f_i - grad F||^2 <= G^2
xi_bar   – bound on the server dissimilarity ||grad f0 - grad F||^2 <= xi_bar^2
sigma, sigma0 – client / server stochastic-gradient standard deviations

Derived
-------
rho_s = (N - S) / (N - 1)
Psi   = gamma^2 sigma0^2 / K0 + sigma^2 / (K S) + rho_s G^2 / S
kappa = max{4 gamma^3, 2 / eta_g^2 + 3 gamma^2}
Phi   = gamma^2 Psi + (2 gamma^2 / S)(sigma^2 / K + rho_s G^2) + (2 G^2 + sigma^2 / K) / eta_g^2
h     = gamma + 1/2 - a (1 + gamma) / 2 * (3 gamma + 3 + 16 kappa a),   a = K0 eta_0 L
G3    = sigma^2 / (K S) + rho_s G^2 / S + gamma^2 sigma0^2 / (3 K0)
M^2   = gamma^2 sigma0^2 S + sigma^2 + rho_s K G^2
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from config import BoundViolation, ConfigError, FederationConfig

logger = logging.getLogger(__name__)

STEP_TOLERANCE = 1e-12


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TheoryConstants:
    L: float
    G: float = 0.0
    xi_bar: float = 0.0
    sigma: float = 0.0
    sigma0: float = 0.0
    N: int = 1
    S: int = 1
    K: int = 1
    K0: int = 1
    gamma: float = 0.0
    eta_l: float = 0.0
    eta_g: float = 1.0
    eta_0: float = 0.0

    def __post_init__(self) -> None:
        if not self.L > 0:
            raise ConfigError("L", f"must be positive, got {self.L}")
        for name in ("G", "xi_bar", "sigma", "sigma0", "gamma", "eta_l", "eta_0"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be non-negative, got {getattr(self, name)}")
        if not (1 <= self.S <= self.N):
            raise ConfigError("S", f"need 1 <= S <= N, got S={self.S}, N={self.N}")
        if self.K < 1 or self.K0 < 1:
            raise ConfigError("K", "K and K0 must be positive")
        if not self.eta_g > 0:
            raise ConfigError("eta_g", f"must be positive, got {self.eta_g}")

    @property
    def step(self) -> float:
        """K0 * eta_0, the effective server step."""
        return self.K0 * self.eta_0

    def with_protocol(self, cfg: FederationConfig) -> "TheoryConstants":
        return replace(
            self,
            N=cfg.num_clients, S=cfg.clients_per_round, K=cfg.local_steps,
            K0=max(cfg.server_steps, 1), gamma=cfg.gamma, eta_l=cfg.eta_l,
            eta_g=cfg.eta_g, eta_0=cfg.eta_0,
        )


@dataclass(frozen=True)
class DerivedConstants:
    rho_s: float
    psi: float
    kappa: float
    phi: float
    h: float
    g3: float
    m_sq: float
    d0_tilde: Optional[float] = None


def derive_constants(tc: TheoryConstants, d0_tilde: Optional[float] = None) -> DerivedConstants:
    g, L = tc.gamma, tc.L
    G2, s2, s02 = tc.G ** 2, tc.sigma ** 2, tc.sigma0 ** 2
    rho_s = (tc.N - tc.S) / (tc.N - 1) if tc.N >= 2 else 0.0
    psi = g * g * s02 / tc.K0 + s2 / (tc.K * tc.S) + rho_s * G2 / tc.S
    kappa = max(4.0 * g ** 3, 2.0 / tc.eta_g ** 2 + 3.0 * g * g)
    phi = (g * g * psi
           + (2.0 * g * g / tc.S) * (s2 / tc.K + rho_s * G2)
           + (2.0 * G2 + s2 / tc.K) / tc.eta_g ** 2)
    a = tc.step * L
    h = g + 0.5 - a * (1.0 + g) / 2.0 * (3.0 * g + 3.0 + 16.0 * kappa * a)
    g3 = s2 / (tc.K * tc.S) + rho_s * G2 / tc.S + g * g * s02 / (3.0 * tc.K0)
    m_sq = g * g * s02 * tc.S + s2 + rho_s * tc.K * G2
    return DerivedConstants(rho_s, psi, kappa, phi, h, g3, m_sq, d0_tilde)


# ---------------------------------------------------------------------------
# Step-size conditions
# ---------------------------------------------------------------------------

def descent_step_cap(tc: TheoryConstants) -> float:
    """Largest K0*eta_0 for which the per-round descent bound holds: min{eta_g, 1/gamma, 8/9} / (4L)."""
    inv_gamma = math.inf if tc.gamma == 0 else 1.0 / tc.gamma
    return min(tc.eta_g, inv_gamma, 8.0 / 9.0) / (4.0 * tc.L)


def strict_step_cap(tc: TheoryConstants) -> float:
    """
    Tighter cap min{1, (gamma+1)^2 / (2 kappa)} / (8 L (gamma+1)); under it
    h >= (3 gamma + 1) / 4.
    """
    g = tc.gamma
    kappa = max(4.0 * g ** 3, 2.0 / tc.eta_g ** 2 + 3.0 * g * g)
    return min(1.0, (g + 1.0) ** 2 / (2.0 * kappa)) / (8.0 * tc.L * (g + 1.0))


def h_floor(gamma: float) -> float:
    return (3.0 * gamma + 1.0) / 4.0


def validate_step_sizes(tc: TheoryConstants) -> None:
    """Raise BoundViolation unless K eta_l eta_g == K0 eta_0 <= descent_step_cap."""
    client = tc.K * tc.eta_l * tc.eta_g
    if not math.isclose(client, tc.step, rel_tol=STEP_TOLERANCE, abs_tol=1e-300):
        raise BoundViolation(
            f"K*eta_l*eta_g = {client:.17g} differs from K0*eta_0 = {tc.step:.17g}"
        )
    cap = descent_step_cap(tc)
    if tc.step > cap * (1.0 + STEP_TOLERANCE):
        raise BoundViolation(f"K0*eta_0 = {tc.step:.6g} exceeds the cap {cap:.6g}")


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

def _noise_terms(tc: TheoryConstants, dc: DerivedConstants, xi_sq: float) -> tuple:
    a = tc.step
    L, g = tc.L, tc.gamma
    first = 5.0 * a * a * L * dc.psi
    second = 8.0 * a ** 3 * L * L * (g * dc.kappa * xi_sq / (1.0 + g) + dc.phi)
    return first, second


def descent_bound(
    tc: TheoryConstants,
    dc: DerivedConstants,
    ftilde: float,
    grad_ftilde_sq: float,
    xi_sq: Optional[float] = None,
) -> float:
    """
    Upper bound on E[F~(x_{t+1})] given the state at x_t:

    F~(x_t) - K0 eta_0 h ||grad F~(x_t)||^2 + 5 (K0 eta_0)^2 L Psi
            + 8 (K0 eta_0)^3 L^2 (gamma kappa xi^2 / (1 + gamma) + Phi)

    ``xi_sq`` replaces xi_bar^2 by the pointwise value when given.
    """
    validate_step_sizes(tc)
    xi2 = tc.xi_bar ** 2 if xi_sq is None else xi_sq
    first, second = _noise_terms(tc, dc, xi2)
    return ftilde - tc.step * dc.h * grad_ftilde_sq + first + second


def stationarity_bound(tc: TheoryConstants, dc: DerivedConstants, d0_tilde: float, T: int) -> float:
    """Upper bound on min_{t<T} E ||grad F~(x_t)||^2."""
    validate_step_sizes(tc)
    if T < 1:
        raise BoundViolation(f"T must be >= 1, got {T}")
    if dc.h <= 0:
        raise BoundViolation(f"h = {dc.h:.6g} is not positive")
    a, L, g = tc.step, tc.L, tc.gamma
    rhs = (d0_tilde / (T * a)
           + 5.0 * a * L * dc.psi
           + 8.0 * a * a * L * L * (g * dc.kappa * tc.xi_bar ** 2 / (1.0 + g) + dc.phi))
    return rhs / dc.h


def client_drift_bound(tc: TheoryConstants, grad_F_sq: float) -> float:
    """4 K^2 eta_l^2 (||grad F||^2 + sigma^2 / 2K + G^2), valid when 4 K eta_l L <= 1."""
    if 4.0 * tc.K * tc.eta_l * tc.L > 1.0 + STEP_TOLERANCE:
        raise BoundViolation("client drift bound needs 4 K eta_l L <= 1")
    return 4.0 * (tc.K * tc.eta_l) ** 2 * (grad_F_sq + tc.sigma ** 2 / (2 * tc.K) + tc.G ** 2)


def server_drift_bound(
    tc: TheoryConstants,
    dc: DerivedConstants,
    client_drift: float,
    grad_F_sq: float,
    grad_f0_sq: float,
) -> float:
    """
    12 (K0 eta_0)^2 (L^2 E^{(c)} + ||grad F||^2 + 4/3 gamma^2 ||grad f0||^2 + G3),
    valid when 4 K0 eta_0 gamma L <= 1.
    """
    if 4.0 * tc.step * tc.gamma * tc.L > 1.0 + STEP_TOLERANCE:
        raise BoundViolation("server drift bound needs 4 K0 eta_0 gamma L <= 1")
    return 12.0 * tc.step ** 2 * (
        tc.L ** 2 * client_drift + grad_F_sq
        + (4.0 / 3.0) * tc.gamma ** 2 * grad_f0_sq + dc.g3
    )


def gradient_relation_gap(grad_F_sq: float, grad_Ftilde_sq: float, xi_sq: float, gamma: float) -> float:
    """
    (1 + gamma) ||grad F~||^2 + gamma / (1 + gamma) xi^2 - ||grad F||^2,
    which is never negative.
    """
    return (1.0 + gamma) * grad_Ftilde_sq + gamma / (1.0 + gamma) * xi_sq - grad_F_sq


# ---------------------------------------------------------------------------
# Order-of-magnitude error terms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorOrder:
    """Error expression with unit hidden constants, split into its two rates."""

    slow_term: float
    fast_term: float

    @property
    def total(self) -> float:
        return self.slow_term + self.fast_term


def scaled_step_sizes(tc: TheoryConstants, T: int) -> TheoryConstants:
    """
    Bindings eta_g = sqrt(S), K0 = K, K0 eta_0 = sqrt(K S) / (sqrt(L T) (gamma + 1)),
    with eta_l chosen so K eta_l eta_g = K0 eta_0.
    """
    eta_g = math.sqrt(tc.S)
    step = math.sqrt(tc.K * tc.S) / (math.sqrt(tc.L * T) * (tc.gamma + 1.0))
    return replace(tc, eta_g=eta_g, K0=tc.K, eta_0=step / tc.K, eta_l=step / (tc.K * eta_g))


def error_order(tc: TheoryConstants, T: int, d0_tilde: float = 0.0, regime: str = "c") -> ErrorOrder:
    """
    Convergence error up to constants.

    regime "a": K0 eta_0 ~ 1 / ((gamma+1) sqrt(T))
    regime "b": eta_g ~ sqrt(S), K0 eta_0 ~ sqrt(S) / (sqrt(L T) (gamma+1))
    regime "c": as "b" with K0 = K and K0 eta_0 ~ sqrt(K S) / (sqrt(L T) (gamma+1))
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    dc = derive_constants(tc)
    g, L, S, K = tc.gamma, tc.L, tc.S, tc.K
    xi2 = tc.xi_bar ** 2
    if regime == "a":
        slow = d0_tilde / math.sqrt(T) + L * dc.psi / (math.sqrt(T) * (1 + g) ** 2)
        fast = (L * L * g * dc.kappa * xi2 / (T * (1 + g) ** 4)
                + L * L * dc.phi / (T * (1 + g) ** 3))
    elif regime == "b":
        g_sq = g * g * tc.sigma0 ** 2 * S / tc.K0 + tc.sigma ** 2 / K + dc.rho_s * tc.G ** 2
        slow = math.sqrt(L) / math.sqrt(S * T) * (d0_tilde + g_sq / (g + 1) ** 2)
        fast = (L / T) * (g_sq / (1 + g) + g * dc.kappa * S * xi2 / (1 + g) ** 4)
    elif regime == "c":
        slow = math.sqrt(L) / math.sqrt(K * S * T) * (d0_tilde + dc.m_sq / (g + 1) ** 2)
        fast = (L / T) * (dc.m_sq / (1 + g) + g * dc.kappa * K * S * xi2 / (1 + g) ** 4)
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return ErrorOrder(slow, fast)


# ---------------------------------------------------------------------------
# Quadratic testbed
# ---------------------------------------------------------------------------

def exact_constants_for_quadratics(
    client_centers: Sequence[Sequence[float]],
    server_center: Sequence[float],
) -> TheoryConstants:
    """
    Exact constants for f_i(x) = 0.5 ||x - c_i||^2.

    L = 1, G^2 = (1/N) sum_i ||c_bar - c_i||^2, xi_bar^2 = ||c_0 - c_bar||^2.
    The losses ignore the data, so sigma = sigma0 = 0 for every batch size.
    Protocol fields are placeholders; bind them with ``with_protocol``.
    """
    centers = np.asarray(client_centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] < 1:
        raise ConfigError("client_centers", "need at least one client center")
    c_bar = centers.mean(axis=0)
    G_sq = float(np.mean(np.sum((centers - c_bar) ** 2, axis=1)))
    xi_sq = float(np.sum((np.asarray(server_center, dtype=np.float64) - c_bar) ** 2))
    N = centers.shape[0]
    return TheoryConstants(L=1.0, G=math.sqrt(G_sq), xi_bar=math.sqrt(xi_sq),
                           sigma=0.0, sigma0=0.0, N=N, S=N)


def composite_minimum_quadratic(
    client_centers: Sequence[Sequence[float]],
    server_center: Sequence[float],
    gamma: float,
) -> np.ndarray:
    """Minimizer (c_bar + gamma c_0) / (1 + gamma) of F~ on the quadratic testbed."""
    c_bar = np.mean(np.asarray(client_centers, dtype=np.float64), axis=0)
    return (c_bar + gamma * np.asarray(server_center, dtype=np.float64)) / (1.0 + gamma)
