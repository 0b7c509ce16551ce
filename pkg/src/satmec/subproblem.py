"""Per-assignment continuous resource allocation and Benders cut generation.

With the binary decisions fixed, the slot problem separates per AP into a
bandwidth-sharing stage and a CPU-sharing stage.  Both reduce to a scalar
search on the capacity multiplier with closed-form per-user minimizers, so no
external solver is needed.  Cuts lower-bound the optimal value as a quadratic
function of the binaries by freezing the capacity multipliers and re-minimizing
each user's box problem, which keeps them valid at every feasible assignment
and exact at the generating one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assignment import (Allocation, Assignment, InvalidAssignment,
                         validate_assignment)
from .lyapunov import ControlParams, QueueState
from .scenario import Scenario, SlotState

_BRACKET_REL = 1e-10


class ZeroRateLink(InvalidAssignment):
    """Association over a link whose achievable rate is zero."""


class InfeasibleByCapacity(InvalidAssignment):
    """Box minima alone overflow a capacity sum; screened before solving."""


class EnergyCapInfeasible(InvalidAssignment):
    """No allocation can keep this AP under its per-slot energy cap."""


def capacity_screen(scn: Scenario, assignment: Assignment) -> None:
    n_assoc = assignment.alpha.sum(axis=0)
    n_local = assignment.z.sum(axis=0)
    if np.any(n_assoc * scn.beta_min > 1.0 + 1e-9):
        raise InfeasibleByCapacity("bandwidth floors exceed the band")
    if np.any(n_local * scn.f_min_hz > scn.max_cpu_hz + 1e-3):
        raise InfeasibleByCapacity("CPU floors exceed the AP capacity")


# ---------------------------------------------------------------------------
# Per-AP stages


def _beta_of_lambda(cost: np.ndarray, lam: float, lo: float, hi: float) -> np.ndarray:
    """Per-user minimizer of cost/beta + lam*beta on [lo, hi]."""
    beta = np.full(cost.shape, float(lo))
    pos = cost > 0
    if lam <= 0.0:
        beta[pos] = hi
    else:
        beta[pos] = np.clip(np.sqrt(cost[pos] / lam), lo, hi)
    return beta


def _bandwidth_stage(cost: np.ndarray, lo: float, hi: float,
                     cap: float = 1.0) -> tuple[np.ndarray, float]:
    """Minimize sum(cost/beta) subject to sum(beta) <= cap and the box.

    Returns the allocation and the smallest consistent capacity multiplier.
    """
    if cost.size == 0:
        return cost.copy(), 0.0
    beta = _beta_of_lambda(cost, 0.0, lo, hi)
    if beta.sum() <= cap * (1.0 + 1e-12):
        return beta, 0.0
    lam_lo, lam_hi = 0.0, 1.0
    for _ in range(400):
        if _beta_of_lambda(cost, lam_hi, lo, hi).sum() <= cap:
            break
        lam_lo = lam_hi
        lam_hi *= 4.0
    else:
        raise RuntimeError("bandwidth multiplier bracket did not close")
    while lam_hi - lam_lo > _BRACKET_REL * lam_hi:
        mid = 0.5 * (lam_lo + lam_hi)
        if _beta_of_lambda(cost, mid, lo, hi).sum() > cap:
            lam_lo = mid
        else:
            lam_hi = mid
    return _beta_of_lambda(cost, lam_hi, lo, hi), lam_hi


def _cpu_root(a: float, b: float, nu: float) -> float:
    """Positive root of 2*b*f^3 + nu*f^2 = a (a > 0, b + nu > 0)."""
    if b <= 0.0:
        return math.sqrt(a / nu)
    f = (a / (2.0 * b)) ** (1.0 / 3.0)
    # The cubic is convex and increasing for f > 0 and the start lies at or
    # above the root, so Newton descends monotonically onto it.
    for _ in range(100):
        g = 2.0 * b * f ** 3 + nu * f * f - a
        dg = 6.0 * b * f * f + 2.0 * nu * f
        step = g / dg
        f -= step
        if abs(step) <= 1e-15 * f:
            break
    return f


def _cpu_user_min(a: float, b: float, nu: float, lo: float, hi: float) -> float:
    """Minimizer of a/f + b*f^2 + nu*f on [lo, hi]."""
    if a <= 0.0:
        return lo
    if b <= 0.0 and nu <= 0.0:
        return hi
    return min(max(_cpu_root(a, b, nu), lo), hi)


def _cpu_stage(a: np.ndarray, b: np.ndarray, lo: float, hi: float,
               cap: float) -> tuple[np.ndarray, float]:
    """Minimize sum(a/f + b*f^2) subject to sum(f) <= cap and the box."""
    if a.size == 0:
        return a.copy(), 0.0

    def f_of(nu: float) -> np.ndarray:
        return np.array([_cpu_user_min(a[i], b[i], nu, lo, hi)
                         for i in range(a.size)])

    f = f_of(0.0)
    if f.sum() <= cap * (1.0 + 1e-12):
        return f, 0.0
    nu_lo, nu_hi = 0.0, 1.0
    for _ in range(400):
        if f_of(nu_hi).sum() <= cap:
            break
        nu_lo = nu_hi
        nu_hi *= 4.0
    else:
        raise RuntimeError("CPU multiplier bracket did not close")
    while nu_hi - nu_lo > _BRACKET_REL * nu_hi:
        mid = 0.5 * (nu_lo + nu_hi)
        if f_of(mid).sum() > cap:
            nu_lo = mid
        else:
            nu_hi = mid
    return f_of(nu_hi), nu_hi


# ---------------------------------------------------------------------------
# Subproblem


@dataclass(frozen=True)
class SubproblemSolution:
    """Optimal continuous allocation for a fixed assignment plus the dual
    information needed to build a cut.

    ``weights`` holds the per-AP energy prices actually used: the queue
    backlogs in the online mode, or the smallest multipliers enforcing the
    per-slot caps in the energy-capped mode.
    """

    assignment: Assignment
    allocation: Allocation
    phi: float
    total_delay_s: float
    pair_energy_j: np.ndarray
    lambda_bw: np.ndarray
    nu_cpu: np.ndarray
    weights: np.ndarray
    budgets_j: np.ndarray
    energy_capped: bool
    duals: dict = field(default_factory=dict, repr=False)

    @property
    def ap_energy_j(self) -> np.ndarray:
        return self.pair_energy_j.sum(axis=0)


def _rate_curvature(scn: Scenario, slot: SlotState) -> np.ndarray:
    """Spectral efficiency times bandwidth per link: rate = beta * this."""
    return scn.bandwidth_hz[None, :] * np.log2(1.0 + scn.snr(slot))


def cloud_path_cost(scn: Scenario, slot: SlotState, weights: np.ndarray,
                    v: float) -> np.ndarray:
    """Delay-plus-priced-energy cost of routing each (user, AP) task to the
    cloud: backhaul delay and energy plus the cloud compute delay."""
    d = slot.task_bits[:, None]
    work = (slot.task_bits * slot.cycles_per_bit)[:, None]
    relay = d / scn.backhaul_bps[None, :]
    return ((v + weights[None, :] * scn.ap_power_w[None, :]) * relay
            + v * work / scn.cfg.cloud_cpu_hz)


def _relay_energy(scn: Scenario, slot: SlotState, assignment: Assignment,
                  m: int) -> float:
    cloud = (assignment.alpha[:, m] == 1) & (assignment.z[:, m] == 0)
    return float(scn.ap_power_w[m]
                 * np.sum(slot.task_bits[cloud]) / scn.backhaul_bps[m])


def _capped_cpu(scn, slot, assignment, m, a, local, lo, hi, cap, budget_j):
    """CPU stage under a hard per-slot energy budget: price compute energy
    with the smallest multiplier that brings the AP under budget."""
    work = (slot.task_bits * slot.cycles_per_bit)[local]
    coef = scn.kappa[m] * work
    budget = budget_j - _relay_energy(scn, slot, assignment, m)
    if float(np.sum(coef * lo * lo)) > budget + 1e-9:
        raise EnergyCapInfeasible(f"CPU floors exceed the energy cap at AP {m}")

    def energy(f_m: np.ndarray) -> float:
        return float(np.sum(coef * f_m * f_m))

    f_m, nu = _cpu_stage(a, np.zeros_like(a), lo, hi, cap)
    if energy(f_m) <= budget * (1.0 + 1e-12):
        return f_m, nu, 0.0
    om_lo, om_hi = 0.0, 1.0
    for _ in range(400):
        f_m, nu = _cpu_stage(a, om_hi * coef, lo, hi, cap)
        if energy(f_m) <= budget:
            break
        om_lo = om_hi
        om_hi *= 4.0
    else:
        raise RuntimeError("energy multiplier bracket did not close")
    while om_hi - om_lo > _BRACKET_REL * om_hi:
        mid = 0.5 * (om_lo + om_hi)
        f_m, nu = _cpu_stage(a, mid * coef, lo, hi, cap)
        if energy(f_m) > budget:
            om_lo = mid
        else:
            om_hi = mid
    f_m, nu = _cpu_stage(a, om_hi * coef, lo, hi, cap)
    return f_m, nu, om_hi


def solve_subproblem(scn: Scenario, slot: SlotState, assignment: Assignment,
                     queue: QueueState, params: ControlParams, *,
                     energy_cap: np.ndarray | None = None,
                     validate: bool = True) -> SubproblemSolution:
    """Optimal bandwidth/CPU split and delays for fixed binary decisions.

    ``energy_cap`` switches to the per-slot hard-cap mode: queue backlogs are
    ignored and each AP's total energy is forced under the cap.  Requires a
    positive delay weight; delay constraints are imposed at equality since the
    objective strictly increases in every delay component.
    """
    if params.v <= 0.0:
        raise ValueError("the slot solver needs a positive delay weight")
    if validate:
        validate_assignment(scn, slot, assignment)
    capacity_screen(scn, assignment)
    U, M = scn.num_users, scn.num_aps
    v = params.v
    curvature = _rate_curvature(scn, slot)
    work = slot.task_bits * slot.cycles_per_bit

    beta = np.zeros((U, M))
    f = np.zeros((U, M))
    lambda_bw = np.zeros(M)
    nu_cpu = np.zeros(M)
    if energy_cap is None:
        weights = queue.q.astype(float).copy()
        budgets = scn.energy_budget_j.copy()
    else:
        weights = np.zeros(M)
        budgets = np.asarray(energy_cap, dtype=float).copy()

    for m in range(M):
        assoc = np.flatnonzero(assignment.alpha[:, m] == 1)
        local = np.flatnonzero(assignment.z[:, m] == 1)
        if assoc.size:
            if np.any(curvature[assoc, m] <= 0.0):
                raise ZeroRateLink(f"user on AP {m} has zero achievable rate")
            cost = v * slot.task_bits[assoc] / curvature[assoc, m]
            beta_m, lam = _bandwidth_stage(cost, scn.beta_min[m], scn.beta_max[m])
            beta[assoc, m] = beta_m
            lambda_bw[m] = lam
        if local.size:
            a = v * work[local]
            cap = scn.max_cpu_hz[m]
            lo, hi = scn.f_min_hz[m], scn.f_max_hz[m]
            if energy_cap is None:
                b = weights[m] * scn.kappa[m] * work[local]
                f_m, nu = _cpu_stage(a, b, lo, hi, cap)
            else:
                f_m, nu, weights[m] = _capped_cpu(
                    scn, slot, assignment, m, a, local, lo, hi, cap, budgets[m])
            f[local, m] = f_m
            nu_cpu[m] = nu
        elif energy_cap is not None and assoc.size:
            if _relay_energy(scn, slot, assignment, m) > budgets[m] + 1e-9:
                raise EnergyCapInfeasible(f"relay energy alone exceeds cap at AP {m}")

    tau_tx = np.zeros((U, M))
    tau_cp = np.zeros((U, M))
    assoc_mask = assignment.alpha == 1
    local_mask = assignment.z == 1
    np.divide(np.broadcast_to(slot.task_bits[:, None], (U, M)), beta * curvature,
              out=tau_tx, where=assoc_mask)
    np.divide(np.broadcast_to(work[:, None], (U, M)), f, out=tau_cp,
              where=local_mask)
    cloud = assoc_mask & ~local_mask
    tau_txc = np.where(cloud, slot.task_bits[:, None] / scn.backhaul_bps[None, :], 0.0)
    tau_cpc = np.where(cloud, work[:, None] / scn.cfg.cloud_cpu_hz, 0.0)
    for arr in (beta, f, tau_tx, tau_cp, tau_txc, tau_cpc):
        arr.flags.writeable = False
    allocation = Allocation(beta=beta, f=f, tau_tx=tau_tx, tau_cp=tau_cp,
                            tau_txc=tau_txc, tau_cpc=tau_cpc)

    relay_e = scn.ap_power_w[None, :] * tau_txc
    compute_e = scn.kappa[None, :] * f ** 2 * work[:, None] * assignment.z
    pair_energy = relay_e + compute_e
    total_delay = float((tau_tx + tau_cp + tau_txc + tau_cpc).sum())

    if energy_cap is None:
        # Stage-wise objective; tests cross-check it against the raw-delay path.
        stage = 0.0
        for m in range(M):
            assoc = np.flatnonzero(assignment.alpha[:, m] == 1)
            local = np.flatnonzero(assignment.z[:, m] == 1)
            if assoc.size:
                stage += float(np.sum(v * slot.task_bits[assoc]
                                      / (curvature[assoc, m] * beta[assoc, m])))
            if local.size:
                stage += float(np.sum(v * work[local] / f[local, m]
                                      + weights[m] * scn.kappa[m] * work[local]
                                      * f[local, m] ** 2))
        gcost = cloud_path_cost(scn, slot, weights, v)
        stage += float(gcost[cloud].sum())
        phi = stage - float(np.dot(weights, budgets))
    else:
        phi = v * total_delay

    duals = _recover_duals(scn, slot, assignment, beta, f, lambda_bw, nu_cpu,
                           weights, curvature, v)
    return SubproblemSolution(
        assignment=assignment, allocation=allocation, phi=phi,
        total_delay_s=total_delay, pair_energy_j=pair_energy,
        lambda_bw=lambda_bw, nu_cpu=nu_cpu, weights=weights, budgets_j=budgets,
        energy_capped=energy_cap is not None, duals=duals)


def _recover_duals(scn, slot, assignment, beta, f, lambda_bw, nu_cpu, weights,
                   curvature, v):
    """Multipliers for the box constraints, defined so per-user stationarity
    holds exactly; their sign pattern matches the clipped minimizers."""
    U, M = beta.shape
    eta_lo = np.zeros((U, M))
    eta_hi = np.zeros((U, M))
    theta_lo = np.zeros((U, M))
    theta_hi = np.zeros((U, M))
    work = slot.task_bits * slot.cycles_per_bit
    for m in range(M):
        for u in np.flatnonzero(assignment.alpha[:, m] == 1):
            c = v * slot.task_bits[u] / curvature[u, m]
            slack = lambda_bw[m] - c / beta[u, m] ** 2
            eta_lo[u, m] = max(slack, 0.0)
            eta_hi[u, m] = max(-slack, 0.0)
        for u in np.flatnonzero(assignment.z[:, m] == 1):
            a = v * work[u]
            b = weights[m] * scn.kappa[m] * work[u]
            slack = nu_cpu[m] + 2.0 * b * f[u, m] - a / f[u, m] ** 2
            theta_lo[u, m] = max(slack, 0.0)
            theta_hi[u, m] = max(-slack, 0.0)
    xi_tx = np.where(assignment.alpha == 1, v, 0.0)
    xi_cp = np.where(assignment.z == 1, v, 0.0)
    xi_txc = np.where(assignment.alpha == 1,
                      v + weights[None, :] * scn.ap_power_w[None, :], 0.0)
    xi_cpc = np.where(assignment.alpha == 1, v, 0.0)
    return {"eta_lo": eta_lo, "eta_hi": eta_hi, "theta_lo": theta_lo,
            "theta_hi": theta_hi, "xi_tx": xi_tx, "xi_cp": xi_cp,
            "xi_txc": xi_txc, "xi_cpc": xi_cpc}


def kkt_residual(scn: Scenario, slot: SlotState, sol: SubproblemSolution,
                 params: ControlParams) -> float:
    """Largest normalized violation across stationarity, primal and dual
    feasibility, and complementary slackness."""
    assignment = sol.assignment
    beta, f = sol.allocation.beta, sol.allocation.f
    curvature = _rate_curvature(scn, slot)
    work = slot.task_bits * slot.cycles_per_bit
    v = params.v
    res = 0.0
    for m in range(scn.num_aps):
        assoc = np.flatnonzero(assignment.alpha[:, m] == 1)
        if assoc.size:
            c = v * slot.task_bits[assoc] / curvature[assoc, m]
            grad = (-c / beta[assoc, m] ** 2 + sol.lambda_bw[m]
                    - sol.duals["eta_lo"][assoc, m] + sol.duals["eta_hi"][assoc, m])
            scale = np.maximum(1.0, c / beta[assoc, m] ** 2)
            res = max(res, float(np.max(np.abs(grad) / scale)))
            total = float(beta[assoc, m].sum())
            res = max(res, total - 1.0)
            res = max(res, sol.lambda_bw[m] * abs(total - 1.0)
                      / max(1.0, sol.lambda_bw[m]))
            res = max(res, float(np.max(np.maximum(
                scn.beta_min[m] - beta[assoc, m], beta[assoc, m] - scn.beta_max[m]))))
            res = max(res, float(np.max(
                sol.duals["eta_lo"][assoc, m] * (beta[assoc, m] - scn.beta_min[m]))))
            res = max(res, float(np.max(
                sol.duals["eta_hi"][assoc, m] * (scn.beta_max[m] - beta[assoc, m]))))
        local = np.flatnonzero(assignment.z[:, m] == 1)
        if local.size:
            a = v * work[local]
            b = sol.weights[m] * scn.kappa[m] * work[local]
            grad = (-a / f[local, m] ** 2 + 2.0 * b * f[local, m] + sol.nu_cpu[m]
                    - sol.duals["theta_lo"][local, m] + sol.duals["theta_hi"][local, m])
            scale = np.maximum(1.0, a / f[local, m] ** 2 + 2.0 * b * f[local, m])
            res = max(res, float(np.max(np.abs(grad) / scale)))
            total = float(f[local, m].sum())
            cap = max(scn.max_cpu_hz[m], 1.0)
            res = max(res, (total - scn.max_cpu_hz[m]) / cap)
            res = max(res, sol.nu_cpu[m] * abs(total - scn.max_cpu_hz[m])
                      / (max(1.0, sol.nu_cpu[m]) * cap))
            res = max(res, float(np.max(np.maximum(
                scn.f_min_hz[m] - f[local, m], f[local, m] - scn.f_max_hz[m]))) / cap)
    for name in ("eta_lo", "eta_hi", "theta_lo", "theta_hi"):
        res = max(res, float(np.max(np.maximum(-sol.duals[name], 0.0), initial=0.0)))
    return res


# ---------------------------------------------------------------------------
# Benders cuts


@dataclass(frozen=True)
class BendersCut:
    """Quadratic lower bound on the slot objective as a function of the
    binaries: ``constant + sum a*alpha + sum b*z + sum q*alpha*z``.

    On assignments satisfying the compute-needs-a-link rule, alpha*z collapses
    to z, so ``b + q`` is the effective z coefficient there.
    """

    constant: float
    a: np.ndarray  # (U, M) coefficient on alpha
    b: np.ndarray  # (U, M) coefficient on z
    q: np.ndarray  # (U, M) coefficient on alpha*z

    def value(self, alpha: np.ndarray, z: np.ndarray) -> float:
        return self.constant + float(np.sum(self.a * alpha) + np.sum(self.b * z)
                                     + np.sum(self.q * alpha * z))

    def interval_min(self) -> float:
        """Lower bound over all binaries with z <= alpha."""
        eff = np.minimum(0.0, self.a) + np.minimum(0.0, self.b + self.q)
        return self.constant + float(eff.sum())

    def to_dict(self) -> dict:
        return {"constant": self.constant, "a": self.a.tolist(),
                "b": self.b.tolist(), "q": self.q.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "BendersCut":
        return BendersCut(constant=float(d["constant"]),
                          a=np.array(d["a"], dtype=float),
                          b=np.array(d["b"], dtype=float),
                          q=np.array(d["q"], dtype=float))


def make_cut(scn: Scenario, slot: SlotState, sol: SubproblemSolution,
             params: ControlParams) -> BendersCut:
    """Build the optimality cut from a solved subproblem.

    Capacity multipliers and energy prices are frozen at the subproblem's
    values; every user's box problem is re-minimized in closed form, making
    the per-user constants valid marginal costs for any assignment.  The
    cloud-path cost enters the alpha and alpha*z coefficients, the onboard
    compute cost enters z; relay-only tiers carry no z terms.
    """
    U, M = scn.num_users, scn.num_aps
    v = params.v
    curvature = _rate_curvature(scn, slot)
    work = slot.task_bits * slot.cycles_per_bit
    gcost = cloud_path_cost(scn, slot, sol.weights, v)

    a = np.zeros((U, M))
    b = np.zeros((U, M))
    q = np.zeros((U, M))
    active = set(slot.active_users)
    for m in range(M):
        lam = sol.lambda_bw[m]
        nu = sol.nu_cpu[m]
        wgt = sol.weights[m]
        for u in range(U):
            if u not in active or not slot.available[u, m]:
                continue
            if curvature[u, m] <= 0.0:
                continue
            c = v * slot.task_bits[u] / curvature[u, m]
            if c > 0.0:
                bb = min(max(math.sqrt(c / lam) if lam > 0 else scn.beta_max[m],
                             scn.beta_min[m]), scn.beta_max[m])
                w_term = c / bb + lam * bb
            else:
                w_term = lam * scn.beta_min[m]
            a[u, m] = w_term + gcost[u, m]
            if scn.compute_ok[m]:
                fa = v * work[u]
                fb = wgt * scn.kappa[m] * work[u]
                ff = _cpu_user_min(fa, fb, nu, scn.f_min_hz[m], scn.f_max_hz[m])
                b[u, m] = (fa / ff + fb * ff * ff + nu * ff) if ff > 0.0 else 0.0
                q[u, m] = -gcost[u, m]
    constant = -float(np.dot(sol.weights, sol.budgets_j)
                      + sol.lambda_bw.sum()
                      + np.dot(sol.nu_cpu, scn.max_cpu_hz))
    for arr in (a, b, q):
        arr.flags.writeable = False
    return BendersCut(constant=constant, a=a, b=b, q=q)
