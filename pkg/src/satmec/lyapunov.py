"""Virtual energy queues and the per-slot drift-plus-penalty objective.

Each AP carries a backlog of energy spent above its per-slot budget.  The
online controller minimizes ``V * total_delay + sum_m Q_m * (energy_m -
budget_m)`` each slot, which keeps the queues mean-rate stable and therefore
enforces the time-average energy budgets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import Scenario, SlotState, service_delay


@dataclass(frozen=True)
class QueueState:
    """Per-AP energy backlog in Joules at the start of slot ``t``."""

    q: np.ndarray
    t: int = 0

    def __post_init__(self):
        if np.any(self.q < 0) or not np.all(np.isfinite(self.q)):
            raise ValueError("queue backlogs must be finite and >= 0")

    @staticmethod
    def zeros(num_aps: int) -> "QueueState":
        return QueueState(q=np.zeros(num_aps), t=0)


@dataclass(frozen=True)
class ControlParams:
    """Controller knobs: delay weight V, solver gap tolerance, iteration cap
    and the number of cuts generated per iteration."""

    v: float = 50.0
    eps: float = 1e-3
    l_max: int = 50
    rho: int = 5

    def __post_init__(self):
        if self.v < 0:
            raise ValueError("v must be >= 0")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.l_max < 1:
            raise ValueError("l_max must be >= 1")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")


def update_queue(queue: QueueState, ap_energy_j: np.ndarray,
                 budgets_j: np.ndarray) -> QueueState:
    """One backlog step: ``Q' = max(Q + spent - budget, 0)`` per AP."""
    if np.any(ap_energy_j < -1e-12):
        raise ValueError("per-AP energies must be >= 0")
    nxt = np.maximum(queue.q + ap_energy_j - budgets_j, 0.0)
    return QueueState(q=nxt, t=queue.t + 1)


def drift_penalty_value(scn: Scenario, slot: SlotState, assignment, allocation,
                        queue: QueueState, params: ControlParams) -> float:
    """Evaluate the per-slot objective from raw delays and energies.

    The constant ``-Q_m * budget_m`` part is included so values are comparable
    across solvers even though it does not affect the argmin.
    """
    metrics = service_delay(scn, slot, assignment, allocation)
    queue_term = float(np.dot(queue.q, metrics.ap_energy_j - scn.energy_budget_j))
    return params.v * metrics.total_delay_s + queue_term


def worst_case_ap_energy(scn: Scenario) -> np.ndarray:
    """Largest per-task energy any single user can cost each AP.

    Uses the upper ends of the task-size and cycles-per-bit distributions; the
    bound is the larger of the backhaul relay energy and the onboard compute
    energy at the per-task CPU cap (relay-only tiers have no compute term).
    """
    d_max = scn.cfg.task_bits_range[1]
    c_max = scn.cfg.cycles_per_bit_range[1]
    relay = scn.ap_power_w * d_max / scn.backhaul_bps
    compute = np.where(scn.compute_ok,
                       scn.kappa * scn.f_max_hz ** 2 * d_max * c_max, 0.0)
    return np.maximum(relay, compute)


def c_star(scn: Scenario) -> float:
    """Drift bound constant: half the sum over APs of the squared worst-case
    slot energy plus the squared budget.  Conservative because the per-task
    energy bound is taken at the top of the task distribution."""
    e_worst = scn.num_users * worst_case_ap_energy(scn)
    return 0.5 * float(np.sum(e_worst ** 2 + scn.energy_budget_j ** 2))
