"""Leader-follower game between the server (decay factor) and clients (local epochs).

The server commits to a decay factor ``gamma`` in [0, 1]; each client answers
with a number of local epochs ``tau`` that maximizes

    U_i = gamma * omega_i * tau - c_i * tau**2

where ``omega_i`` is the client's contribution score and ``c_i`` its per-epoch
cost coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EQUILIBRIUM_TOL = 1e-9


@dataclass(frozen=True)
class ClientGameParams:
    client_id: int
    cost_coeff: float
    contribution: float
    tau_min: int = 1
    tau_max: int = 10

    def __post_init__(self):
        if not self.cost_coeff > 0:
            raise ValueError(f"cost_coeff must be positive, got {self.cost_coeff}")
        if self.tau_min < 0 or self.tau_max < 1 or self.tau_min > self.tau_max:
            raise ValueError(f"invalid epoch bounds [{self.tau_min}, {self.tau_max}]")
        # contributions are clamped, not rejected
        object.__setattr__(self, "contribution", clamp_contribution(self.contribution))


@dataclass
class GameState:
    round: int = 1
    gamma: float = 1.0
    epochs: dict[int, int] = field(default_factory=dict)
    contributions: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("round must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


def clamp_contribution(omega: float) -> float:
    return min(max(float(omega), 0.0), 1.0)


def _check_finite(**values: float) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")


def client_utility(gamma: float, contribution: float, cost_coeff: float, tau: float) -> float:
    """Revenue ``gamma * contribution * tau`` minus quadratic cost ``cost_coeff * tau**2``."""
    _check_finite(gamma=gamma, contribution=contribution, cost_coeff=cost_coeff, tau=tau)
    if cost_coeff <= 0:
        raise ValueError(f"cost_coeff must be positive, got {cost_coeff}")
    return gamma * contribution * tau - cost_coeff * tau * tau


def best_response_tau(gamma: float, contribution: float, cost_coeff: float) -> float:
    """Unconstrained real maximizer of :func:`client_utility` in ``tau``."""
    _check_finite(gamma=gamma, contribution=contribution, cost_coeff=cost_coeff)
    if cost_coeff <= 0:
        raise ValueError(f"cost_coeff must be positive, got {cost_coeff}")
    return gamma * contribution / (2.0 * cost_coeff)


def quantize_tau(
    tau_star: float,
    tau_min: int,
    tau_max: int,
    gamma: float,
    contribution: float,
    cost_coeff: float,
) -> int:
    """Integer epoch count a client actually runs.

    The real optimum is clamped into ``[tau_min, tau_max]`` and the better of
    its floor and ceiling is kept (smaller wins ties). A client whose best
    feasible utility is not positive abstains with 0 epochs, which is always
    individually rational.
    """
    if tau_min > tau_max:
        raise ValueError(f"tau_min ({tau_min}) exceeds tau_max ({tau_max})")
    clamped = min(max(tau_star, tau_min), tau_max)
    best_tau, best_u = 0, 0.0
    for cand in sorted({math.floor(clamped), math.ceil(clamped)}):
        u = client_utility(gamma, contribution, cost_coeff, cand)
        if u > best_u:
            best_tau, best_u = int(cand), u
    return best_tau


def server_utility(
    gamma: float, params: Sequence[ClientGameParams], epochs: Sequence[int], round: int
) -> float:
    if len(params) != len(epochs):
        raise ValueError(f"{len(params)} clients but {len(epochs)} epoch choices")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    revenue = sum(gamma * (p.contribution + tau) for p, tau in zip(params, epochs))
    return revenue - round * gamma * gamma


def optimal_gamma(contribution: float, cost_coeff: float, round: int, gamma_min: float = 0.01) -> float:
    """Leader's optimal decay factor for one client, clamped to ``[gamma_min, 1]``.

    Interior optimum ``omega*c / (2*t*c - omega)`` exists only while the
    substituted server utility is concave (``2*t*c > omega``); otherwise the
    maximum over [0, 1] sits at the upper boundary.
    """
    if cost_coeff <= 0:
        raise ValueError(f"cost_coeff must be positive, got {cost_coeff}")
    if round < 1:
        raise ValueError("round must be >= 1")
    if not 0.0 <= gamma_min < 1.0:
        raise ValueError(f"gamma_min must lie in [0, 1), got {gamma_min}")
    denom = 2.0 * round * cost_coeff - contribution
    if denom <= 0:
        return 1.0
    return min(max(contribution * cost_coeff / denom, gamma_min), 1.0)


def substituted_server_utility(gamma: float, contribution: float, cost_coeff: float, round: int) -> float:
    """Single-client server utility after plugging in the client's best response."""
    return gamma * contribution + gamma**2 * contribution / (2.0 * cost_coeff) - round * gamma**2


def ir_satisfied(gamma: float, contribution: float, cost_coeff: float, tau: float) -> bool:
    return client_utility(gamma, contribution, cost_coeff, tau) >= 0.0


def verify_equilibrium(
    params: Sequence[ClientGameParams],
    gamma: float,
    proposed: Sequence[float],
    grid_step: float = 1.0,
    tol: float = EQUILIBRIUM_TOL,
) -> bool:
    """Check that no client gains more than ``tol`` by a unilateral deviation.

    Deviations are searched on the grid ``0, grid_step, ..., tau_max``. Client
    utilities do not depend on the other clients' epochs, so each client is
    checked on its own.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    if len(params) != len(proposed):
        raise ValueError(f"{len(params)} clients but {len(proposed)} proposals")
    for p, tau in zip(params, proposed):
        current = client_utility(gamma, p.contribution, p.cost_coeff, tau)
        grid = np.arange(0.0, p.tau_max + grid_step / 2, grid_step)
        grid = grid[grid <= p.tau_max + 1e-12]
        alt = gamma * p.contribution * grid - p.cost_coeff * grid * grid
        if alt.max() > current + tol:
            return False
    return True
