"""Binary offloading decisions and continuous resource allocations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import Scenario, SlotState


class InvalidAssignment(ValueError):
    """Assignment violates a structural constraint (availability, one-AP rule,
    compute-without-link, or compute on a relay-only tier)."""


@dataclass(frozen=True)
class Assignment:
    """User-AP association ``alpha`` and local-vs-cloud decision ``z``.

    Both are (U, M) 0/1 arrays.  ``z[u, m] = 1`` means the task of user ``u`` is
    processed onboard AP ``m``; ``z[u, m] = 0`` with ``alpha[u, m] = 1`` routes
    it over the backhaul to the cloud.
    """

    alpha: np.ndarray
    z: np.ndarray

    def key(self) -> bytes:
        return self.alpha.tobytes() + self.z.tobytes()

    def __eq__(self, other) -> bool:
        return isinstance(other, Assignment) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())


@dataclass(frozen=True)
class Allocation:
    """Bandwidth fractions, CPU frequencies and the four delay components."""

    beta: np.ndarray     # (U, M) bandwidth fraction
    f: np.ndarray        # (U, M) CPU cycles/s
    tau_tx: np.ndarray   # uplink transmission delay
    tau_cp: np.ndarray   # onboard compute delay
    tau_txc: np.ndarray  # backhaul relay delay
    tau_cpc: np.ndarray  # cloud compute delay


def make_assignment(num_users: int, num_aps: int,
                    pairs: dict[int, tuple[int, int]]) -> Assignment:
    """Build an assignment from ``{user: (ap, z)}``; omitted users stay inactive."""
    alpha = np.zeros((num_users, num_aps), dtype=np.int8)
    z = np.zeros((num_users, num_aps), dtype=np.int8)
    for u, (m, zz) in pairs.items():
        alpha[u, m] = 1
        z[u, m] = int(zz)
    alpha.flags.writeable = False
    z.flags.writeable = False
    return Assignment(alpha=alpha, z=z)


def validate_assignment(scn: Scenario, slot: SlotState, assignment: Assignment) -> None:
    alpha, z = assignment.alpha, assignment.z
    if alpha.shape != (scn.num_users, scn.num_aps):
        raise InvalidAssignment(f"alpha shape {alpha.shape} does not match network")
    if np.any(alpha > slot.available):
        raise InvalidAssignment("association on an unavailable link")
    if np.any(z > alpha):
        raise InvalidAssignment("compute decision without association")
    if np.any(z[:, ~scn.compute_ok] != 0):
        raise InvalidAssignment("onboard compute requested on a relay-only tier")
    active = slot.active_users
    rows = alpha[list(active)].sum(axis=1) if active else np.zeros(0)
    if np.any(rows != 1):
        raise InvalidAssignment("each active user must associate with exactly one AP")
    dead = list(slot.infeasible_users)
    if dead and np.any(alpha[dead] != 0):
        raise InvalidAssignment("users without coverage must stay unassigned")


def user_options(scn: Scenario, slot: SlotState, u: int) -> list[tuple[int, int]]:
    """Feasible ``(ap, z)`` choices for one user, ordered by AP then z."""
    opts: list[tuple[int, int]] = []
    for m in range(scn.num_aps):
        if not slot.available[u, m]:
            continue
        opts.append((m, 0))
        if scn.compute_ok[m]:
            opts.append((m, 1))
    return opts


def capacity_feasible(scn: Scenario, slot: SlotState, assignment: Assignment,
                      tol: float = 1e-9) -> bool:
    """Check that per-AP minimum shares fit: bandwidth floors sum to <= 1 and
    CPU floors fit under the AP capacity."""
    n_assoc = assignment.alpha.sum(axis=0)
    n_local = assignment.z.sum(axis=0)
    if np.any(n_assoc * scn.beta_min > 1.0 + tol):
        return False
    if np.any(n_local * scn.f_min_hz > scn.max_cpu_hz + tol):
        return False
    return True


def max_snr_assignment(scn: Scenario, slot: SlotState, *, prefer_local: bool = True,
                       ) -> Assignment:
    """Associate each active user with its strongest available AP.

    With ``prefer_local`` the compute flag is set wherever the tier allows it,
    then greedily cleared (weakest users first) until per-AP CPU floors fit,
    and associations are moved to the next-best AP while bandwidth floors
    overflow.  The result always passes :func:`capacity_feasible` when any
    feasible assignment exists.
    """
    snr = scn.snr(slot)
    U, M = scn.num_users, scn.num_aps
    choice: dict[int, tuple[int, int]] = {}
    order = {}
    for u in slot.active_users:
        masked = np.where(slot.available[u] == 1, snr[u], -np.inf)
        ranked = np.argsort(-masked, kind="stable")
        ranked = [int(m) for m in ranked if slot.available[u, m]]
        order[u] = ranked
        m = ranked[0]
        choice[u] = (m, 1 if (prefer_local and scn.compute_ok[m]) else 0)

    # Resolve bandwidth-floor overflow by demoting the weakest users.
    for m in range(M):
        if scn.beta_min[m] <= 0:
            continue
        cap = int(np.floor((1.0 + 1e-12) / scn.beta_min[m]))
        users = [u for u, (mm, _) in choice.items() if mm == m]
        users.sort(key=lambda u: snr[u, m])
        while len(users) > cap:
            u = users.pop(0)
            ranked = order[u]
            nxt = next((mm for mm in ranked if mm != m), None)
            if nxt is None:
                break
            choice[u] = (nxt, 1 if (prefer_local and scn.compute_ok[nxt]) else 0)

    # Resolve CPU-floor overflow by clearing compute flags, weakest first.
    for m in range(M):
        if not scn.compute_ok[m] or scn.f_min_hz[m] <= 0:
            continue
        cap = int(np.floor((scn.max_cpu_hz[m] + 1e-9) / scn.f_min_hz[m]))
        users = [u for u, (mm, zz) in choice.items() if mm == m and zz == 1]
        users.sort(key=lambda u: snr[u, m])
        while len(users) > cap:
            u = users.pop(0)
            choice[u] = (m, 0)

    return make_assignment(U, M, choice)


def random_feasible_assignment(scn: Scenario, slot: SlotState,
                               rng: np.random.Generator,
                               max_tries: int = 200) -> Assignment:
    """Uniform per-user draw over options, rejection-sampled to capacity."""
    for _ in range(max_tries):
        choice = {}
        for u in slot.active_users:
            opts = user_options(scn, slot, u)
            choice[u] = opts[int(rng.integers(len(opts)))]
        cand = make_assignment(scn.num_users, scn.num_aps, choice)
        if capacity_feasible(scn, slot, cand):
            return cand
    # Dense floors: fall back to all-cloud on the strongest link.
    return max_snr_assignment(scn, slot, prefer_local=False)
