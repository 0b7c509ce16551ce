"""Master problem over the binary decisions: cut collection, QUBO and Ising
compilation, sample decoding, and an exact enumeration backend.

The master minimizes an epigraph variable over all accumulated cuts subject to
the structural assignment constraints.  For the annealing path the epigraph
variable is discretized into a signed fixed-point register and every
constraint becomes a weighted penalty; the compiled model is an
upper-triangular quadratic form over bits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assignment import Assignment, make_assignment
from .scenario import Scenario, SlotState
from .subproblem import BendersCut

PENALTY_FAMILIES = ("availability", "one_ap", "relay_only", "compute_link", "cut")


class PenaltyOverflow(RuntimeError):
    """A compiled coefficient exceeds the configured dynamic-range cap."""


class SizeCapExceeded(RuntimeError):
    """Feasible assignment count exceeds the enumeration cap."""


# ---------------------------------------------------------------------------
# Epigraph register


@dataclass(frozen=True)
class MuEncoding:
    """Signed fixed-point register for the epigraph variable.

    ``n_int_pos`` bits cover the positive integer part, ``n_frac`` the positive
    fractional part (resolution ``2**-n_frac``), and ``n_int_neg`` the negative
    integer part.  Total width is ``1 + n_int_pos + n_frac + n_int_neg``.
    """

    n_int_pos: int = 14
    n_frac: int = 6
    n_int_neg: int = 8

    def __post_init__(self):
        if min(self.n_int_pos, self.n_frac, self.n_int_neg) < 0:
            raise ValueError("bit widths must be >= 0")

    @property
    def num_bits(self) -> int:
        return 1 + self.n_int_pos + self.n_frac + self.n_int_neg

    def weights(self) -> np.ndarray:
        pos = [2.0 ** (i - self.n_frac)
               for i in range(self.n_int_pos + self.n_frac + 1)]
        neg = [-(2.0 ** j) for j in range(self.n_int_neg)]
        return np.array(pos + neg)

    @property
    def resolution(self) -> float:
        return 2.0 ** (-self.n_frac)

    @property
    def max_value(self) -> float:
        return 2.0 ** (self.n_int_pos + 1) - self.resolution

    @property
    def min_value(self) -> float:
        return -(2.0 ** self.n_int_neg - 1.0)

    def decode(self, bits: np.ndarray) -> float:
        if len(bits) != self.num_bits:
            raise ValueError(f"expected {self.num_bits} bits, got {len(bits)}")
        return float(np.dot(self.weights(), bits))

    @staticmethod
    def for_range(lo: float, hi: float, n_frac: int = 6) -> "MuEncoding":
        """Smallest widths whose representable range covers [lo, hi]."""
        hi = max(hi, 0.0)
        lo = min(lo, 0.0)
        n_pos = 0
        while 2.0 ** (n_pos + 1) - 2.0 ** (-n_frac) < hi:
            n_pos += 1
        n_neg = 0
        while -(2.0 ** n_neg - 1.0) > lo:
            n_neg += 1
        return MuEncoding(n_int_pos=n_pos, n_frac=n_frac, n_int_neg=n_neg)


def encode_mu(bits: np.ndarray, enc: MuEncoding) -> float:
    """Value of the epigraph register for a bit vector."""
    return enc.decode(np.asarray(bits))


# ---------------------------------------------------------------------------
# Master model


@dataclass
class MasterModel:
    """Instance context plus the accumulated cuts.

    ``assoc_cap[m]`` / ``local_cap[m]`` bound how many users an AP can host
    before its bandwidth or CPU floors overflow; enumeration uses them as
    screens.  ``relay_energy_j`` and ``min_local_energy_j`` support the
    per-slot energy screen of the hard-capped mode.
    """

    num_users: int
    num_aps: int
    active_users: tuple[int, ...]
    available: np.ndarray
    compute_ok: np.ndarray
    assoc_cap: np.ndarray
    local_cap: np.ndarray
    relay_energy_j: np.ndarray
    min_local_energy_j: np.ndarray
    budgets_j: np.ndarray
    cuts: list[BendersCut] = field(default_factory=list)

    def add_cut(self, cut: BendersCut) -> None:
        self.cuts.append(cut)

    def user_options(self, u: int) -> list[tuple[int, int]]:
        opts = []
        for m in range(self.num_aps):
            if not self.available[u, m]:
                continue
            opts.append((m, 0))
            if self.compute_ok[m]:
                opts.append((m, 1))
        return opts

    def to_dict(self) -> dict:
        return {
            "num_users": self.num_users,
            "num_aps": self.num_aps,
            "active_users": list(self.active_users),
            "available": self.available.tolist(),
            "compute_ok": self.compute_ok.tolist(),
            "assoc_cap": self.assoc_cap.tolist(),
            "local_cap": self.local_cap.tolist(),
            "relay_energy_j": self.relay_energy_j.tolist(),
            "min_local_energy_j": self.min_local_energy_j.tolist(),
            "budgets_j": self.budgets_j.tolist(),
            "cuts": [c.to_dict() for c in self.cuts],
        }

    @staticmethod
    def from_dict(d: dict) -> "MasterModel":
        return MasterModel(
            num_users=int(d["num_users"]),
            num_aps=int(d["num_aps"]),
            active_users=tuple(d["active_users"]),
            available=np.array(d["available"], dtype=np.uint8),
            compute_ok=np.array(d["compute_ok"], dtype=bool),
            assoc_cap=np.array(d["assoc_cap"], dtype=int),
            local_cap=np.array(d["local_cap"], dtype=int),
            relay_energy_j=np.array(d["relay_energy_j"], dtype=float),
            min_local_energy_j=np.array(d["min_local_energy_j"], dtype=float),
            budgets_j=np.array(d["budgets_j"], dtype=float),
            cuts=[BendersCut.from_dict(c) for c in d["cuts"]],
        )


def build_master(scn: Scenario, slot: SlotState) -> MasterModel:
    big = scn.num_users + 1
    assoc_cap = np.where(scn.beta_min > 0,
                         np.floor((1.0 + 1e-12) / np.maximum(scn.beta_min, 1e-300)),
                         big).astype(int)
    local_cap = np.where((scn.f_min_hz > 0) & scn.compute_ok,
                         np.floor((scn.max_cpu_hz + 1e-3)
                                  / np.maximum(scn.f_min_hz, 1e-300)),
                         np.where(scn.compute_ok, big, 0)).astype(int)
    relay = scn.ap_power_w[None, :] * slot.task_bits[:, None] / scn.backhaul_bps[None, :]
    work = (slot.task_bits * slot.cycles_per_bit)[:, None]
    min_local = scn.kappa[None, :] * scn.f_min_hz[None, :] ** 2 * work
    return MasterModel(
        num_users=scn.num_users, num_aps=scn.num_aps,
        active_users=slot.active_users,
        available=slot.available.copy(),
        compute_ok=scn.compute_ok.copy(),
        assoc_cap=assoc_cap, local_cap=local_cap,
        relay_energy_j=relay, min_local_energy_j=min_local,
        budgets_j=scn.energy_budget_j.copy())


# ---------------------------------------------------------------------------
# QUBO model


@dataclass
class QuboModel:
    """Upper-triangular quadratic binary model with a variable registry,
    constant offset, recorded penalty weights and the decode context."""

    variables: list[str]
    index: dict[str, int]
    terms: dict[tuple[int, int], float]
    offset: float
    penalties: dict[str, float]
    master: MasterModel | None = None
    encoding: MuEncoding | None = None
    alpha_bits: dict[tuple[int, int], int] = field(default_factory=dict)
    z_bits: dict[tuple[int, int], int] = field(default_factory=dict)
    w_bits: list[int] = field(default_factory=list)
    slack_bits: list[list[int]] = field(default_factory=list)
    cut_scales: list[float] = field(default_factory=list)

    @property
    def num_variables(self) -> int:
        return len(self.variables)

    def energy(self, bits: np.ndarray) -> float:
        bits = np.asarray(bits)
        total = self.offset
        for (i, j), v in self.terms.items():
            if bits[i] and bits[j]:
                total += v
        return float(total)

    def energies(self, states: np.ndarray) -> np.ndarray:
        """Vectorized energy over a (num_states, num_vars) bit matrix."""
        states = np.asarray(states)
        out = np.full(states.shape[0], self.offset)
        for (i, j), v in self.terms.items():
            out += v * (states[:, i] * states[:, j])
        return out

    def max_abs_coefficient(self) -> float:
        vals = [abs(v) for v in self.terms.values()]
        return max(vals) if vals else 0.0


class _QuboBuilder:
    def __init__(self):
        self.variables: list[str] = []
        self.index: dict[str, int] = {}
        self.terms: dict[tuple[int, int], float] = {}
        self.offset = 0.0

    def new_var(self, name: str) -> int:
        if name in self.index:
            raise ValueError(f"duplicate variable {name}")
        self.index[name] = len(self.variables)
        self.variables.append(name)
        return self.index[name]

    def add(self, i: int, j: int, value: float) -> None:
        if value == 0.0:
            return
        key = (i, j) if i <= j else (j, i)
        self.terms[key] = self.terms.get(key, 0.0) + value

    def add_affine_square(self, coeffs: dict[int, float], const: float,
                          weight: float) -> None:
        """Accumulate weight * (const + sum coeffs[i]*b_i)^2 using b^2 = b."""
        self.offset += weight * const * const
        items = list(coeffs.items())
        for idx, (i, gi) in enumerate(items):
            self.add(i, i, weight * gi * (gi + 2.0 * const))
            for j, gj in items[idx + 1:]:
                self.add(i, j, weight * 2.0 * gi * gj)


def default_penalties(enc: MuEncoding, lo: float, hi: float) -> dict[str, float]:
    """Family weights: twice the current objective range, floored at one."""
    base = max(2.0 * (hi - lo), 1.0)
    return {fam: base for fam in PENALTY_FAMILIES}


def compile_qubo(master: MasterModel, enc: MuEncoding | None = None,
                 penalties: dict[str, float] | None = None, *,
                 value_range: tuple[float, float] | None = None,
                 coeff_cap: float = 1e12) -> QuboModel:
    """Compile the cut-constrained master into a quadratic binary model.

    Registers: association and compute bits per active user and AP, the
    epigraph register, and one slack register per cut sized by interval
    arithmetic over the cut's coefficients.  Structural constraints become
    penalties; the vacuous availability constraint on reachable links is
    skipped.  Cut expressions are normalized to unit maximum coefficient
    before weighting; the scale is recorded for diagnostics.  Compute products
    collapse onto the z bits, which is exact under the compute-needs-a-link
    penalty.
    """
    if not master.cuts:
        raise ValueError("master needs at least one cut before compilation")
    if enc is None:
        if value_range is not None:
            enc = MuEncoding.for_range(value_range[0], value_range[1])
        else:
            enc = MuEncoding()
    if value_range is None:
        value_range = (enc.min_value, enc.max_value)
    if penalties is None:
        penalties = default_penalties(enc, value_range[0], value_range[1])
    else:
        penalties = dict(penalties)

    b = _QuboBuilder()
    alpha_bits: dict[tuple[int, int], int] = {}
    z_bits: dict[tuple[int, int], int] = {}
    for u in master.active_users:
        for m in range(master.num_aps):
            alpha_bits[(u, m)] = b.new_var(f"alpha[{u},{m}]")
    for u in master.active_users:
        for m in range(master.num_aps):
            z_bits[(u, m)] = b.new_var(f"z[{u},{m}]")
    w_bits = [b.new_var(f"w[{i}]") for i in range(enc.num_bits)]
    w_weights = enc.weights()

    # Epigraph objective.
    for i, wt in zip(w_bits, w_weights):
        b.add(i, i, float(wt))

    # Availability: only unreachable links need a penalty; the constraint is
    # vacuous on reachable ones, so no slack bits are ever emitted.
    zeta = penalties["availability"]
    for (u, m), i in alpha_bits.items():
        if not master.available[u, m]:
            b.add(i, i, zeta)

    # Exactly one AP per active user.
    zeta = penalties["one_ap"]
    for u in master.active_users:
        row = [alpha_bits[(u, m)] for m in range(master.num_aps)]
        b.offset += zeta
        for idx, i in enumerate(row):
            b.add(i, i, -zeta)
            for j in row[idx + 1:]:
                b.add(i, j, 2.0 * zeta)

    # No onboard compute on relay-only tiers.
    zeta = penalties["relay_only"]
    for (u, m), i in z_bits.items():
        if not master.compute_ok[m]:
            b.add(i, i, zeta)

    # Compute requires the link: z*(1 - alpha) per pair.
    zeta = penalties["compute_link"]
    for (u, m), iz in z_bits.items():
        b.add(iz, iz, zeta)
        b.add(iz, alpha_bits[(u, m)], -zeta)

    # Cuts: epigraph dominates every cut, softened with a slack register.
    slack_bits: list[list[int]] = []
    cut_scales: list[float] = []
    zeta_cut = penalties["cut"]
    stiffness_floor = 2.0 ** (enc.n_frac + 1)
    for k, cut in enumerate(master.cuts):
        coeffs: dict[int, float] = {}
        for (u, m), i in alpha_bits.items():
            if cut.a[u, m]:
                coeffs[i] = coeffs.get(i, 0.0) + float(cut.a[u, m])
        for (u, m), i in z_bits.items():
            eff = float(cut.b[u, m] + cut.q[u, m])
            if eff:
                coeffs[i] = coeffs.get(i, 0.0) + eff
        for i, wt in zip(w_bits, w_weights):
            coeffs[i] = coeffs.get(i, 0.0) - float(wt)
        gap = enc.max_value - cut.interval_min()
        xbar = 0
        while 2.0 ** (xbar + 1) - enc.resolution < gap:
            xbar += 1
        reg = []
        for x in range(-enc.n_frac, xbar + 1):
            i = b.new_var(f"s[{k},{x}]")
            reg.append(i)
            coeffs[i] = 2.0 ** x
        slack_bits.append(reg)
        const = float(cut.constant)
        scale = max(max(abs(v) for v in coeffs.values()), abs(const), 1e-9)
        cut_scales.append(scale)
        # The weight applies to the normalized square, so emitted coefficients
        # stay within the weight regardless of the cut's physical magnitude.
        # The floor keeps one epigraph grid step more expensive to undercut
        # than it saves, so sampled registers cannot drift below the surface.
        weight = max(zeta_cut, stiffness_floor * scale * scale)
        b.add_affine_square({i: v / scale for i, v in coeffs.items()},
                            const / scale, weight)

    model = QuboModel(variables=b.variables, index=b.index, terms=b.terms,
                      offset=b.offset, penalties=penalties, master=master,
                      encoding=enc, alpha_bits=alpha_bits, z_bits=z_bits,
                      w_bits=w_bits, slack_bits=slack_bits,
                      cut_scales=cut_scales)
    if model.max_abs_coefficient() > coeff_cap:
        raise PenaltyOverflow(
            f"coefficient {model.max_abs_coefficient():.3e} exceeds cap {coeff_cap:.3e}")
    return model


@dataclass(frozen=True)
class DecodedSample:
    """Assignment read back from a bit vector plus its feasibility report.

    ``violations`` lists (family, key) pairs for the structural constraint
    families only; the epigraph value is reported separately since a sampled
    register may sit below the cut surface without making the assignment
    itself infeasible.
    """

    assignment: Assignment
    mu_bar: float
    violations: tuple[tuple[str, tuple], ...]

    @property
    def feasible(self) -> bool:
        return not self.violations


def decode_sample(model: QuboModel, bits: np.ndarray) -> DecodedSample:
    if model.master is None or model.encoding is None:
        raise ValueError("model carries no decode context")
    bits = np.asarray(bits)
    if len(bits) != model.num_variables:
        raise ValueError("bit vector length does not match the registry")
    master = model.master
    alpha = np.zeros((master.num_users, master.num_aps), dtype=np.int8)
    z = np.zeros((master.num_users, master.num_aps), dtype=np.int8)
    for (u, m), i in model.alpha_bits.items():
        alpha[u, m] = bits[i]
    for (u, m), i in model.z_bits.items():
        z[u, m] = bits[i]
    mu_bar = model.encoding.decode(bits[model.w_bits])
    violations: list[tuple[str, tuple]] = []
    for (u, m), i in model.alpha_bits.items():
        if alpha[u, m] and not master.available[u, m]:
            violations.append(("availability", (u, m)))
    for u in master.active_users:
        if alpha[u].sum() != 1:
            violations.append(("one_ap", (u,)))
    for (u, m), i in model.z_bits.items():
        if z[u, m] and not master.compute_ok[m]:
            violations.append(("relay_only", (u, m)))
        if z[u, m] and not alpha[u, m]:
            violations.append(("compute_link", (u, m)))
    alpha.flags.writeable = False
    z.flags.writeable = False
    return DecodedSample(assignment=Assignment(alpha=alpha, z=z),
                         mu_bar=mu_bar, violations=tuple(violations))


# ---------------------------------------------------------------------------
# Ising form


@dataclass
class IsingModel:
    """Spin form of a quadratic binary model: biases, upper-triangular
    couplings and a constant offset."""

    h: np.ndarray
    couplings: dict[tuple[int, int], float]
    offset: float

    def energy(self, spins: np.ndarray) -> float:
        spins = np.asarray(spins, dtype=float)
        total = self.offset + float(np.dot(self.h, spins))
        for (i, j), v in self.couplings.items():
            total += v * spins[i] * spins[j]
        return float(total)


def qubo_to_ising(model: QuboModel) -> IsingModel:
    """Substitute bit = (spin + 1) / 2; energies agree for every state."""
    n = model.num_variables
    h = np.zeros(n)
    couplings: dict[tuple[int, int], float] = {}
    offset = model.offset
    for (i, j), v in model.terms.items():
        if i == j:
            h[i] += v / 2.0
            offset += v / 2.0
        else:
            couplings[(i, j)] = couplings.get((i, j), 0.0) + v / 4.0
            h[i] += v / 4.0
            h[j] += v / 4.0
            offset += v / 4.0
    couplings = {k: v for k, v in couplings.items() if v != 0.0}
    return IsingModel(h=h, couplings=couplings, offset=offset)


def ising_to_qubo(model: IsingModel) -> QuboModel:
    """Inverse substitution spin = 2*bit - 1."""
    n = len(model.h)
    terms: dict[tuple[int, int], float] = {}
    offset = model.offset
    for i, hi in enumerate(model.h):
        if hi:
            terms[(i, i)] = terms.get((i, i), 0.0) + 2.0 * hi
            offset -= hi
    for (i, j), v in model.couplings.items():
        terms[(i, j)] = terms.get((i, j), 0.0) + 4.0 * v
        terms[(i, i)] = terms.get((i, i), 0.0) - 2.0 * v
        terms[(j, j)] = terms.get((j, j), 0.0) - 2.0 * v
        offset += v
    terms = {k: v for k, v in terms.items() if v != 0.0}
    names = [f"x[{i}]" for i in range(n)]
    return QuboModel(variables=names, index={s: i for i, s in enumerate(names)},
                     terms=terms, offset=offset, penalties={})


# ---------------------------------------------------------------------------
# Exact backend


@dataclass(frozen=True)
class ExactMasterResult:
    assignment: Assignment
    mu: float
    n_feasible: int
    n_screened: int


def solve_master_exact(master: MasterModel, *, energy_screen: bool = False,
                       cap: int = 2 ** 20) -> ExactMasterResult:
    """Minimize the cut envelope by enumerating feasible assignments.

    Options are enumerated per user (AP index ascending, cloud before
    onboard), so ties resolve to the lexicographically first assignment.
    Capacity screens drop assignments whose floors overflow; the optional
    energy screen additionally drops those that cannot meet the per-slot caps.
    """
    if not master.cuts:
        raise ValueError("master needs at least one cut")
    users = list(master.active_users)
    options = [master.user_options(u) for u in users]
    if not users:
        raise ValueError("no active users to assign")
    total = 1
    for opts in options:
        if not opts:
            raise ValueError("an active user has no feasible option")
        total *= len(opts)
        if total > cap:
            raise SizeCapExceeded(f"{total} assignments exceed cap {cap}")
    shape = tuple(len(o) for o in options)

    def spread(vals: np.ndarray, axis: int) -> np.ndarray:
        form = [1] * len(shape)
        form[axis] = shape[axis]
        return vals.reshape(form)

    feasible = np.ones(shape, dtype=bool)
    for m in range(master.num_aps):
        assoc = np.zeros(shape)
        local = np.zeros(shape)
        for ui, opts in enumerate(options):
            assoc = assoc + spread(np.array([1.0 if mm == m else 0.0
                                             for mm, _ in opts]), ui)
            local = local + spread(np.array([1.0 if (mm == m and zz) else 0.0
                                             for mm, zz in opts]), ui)
        feasible &= (assoc <= master.assoc_cap[m]) & (local <= master.local_cap[m])
        if energy_screen:
            e_min = np.zeros(shape)
            for ui, opts in enumerate(options):
                u = users[ui]
                vals = np.array([
                    (master.min_local_energy_j[u, m] if zz
                     else master.relay_energy_j[u, m]) if mm == m else 0.0
                    for mm, zz in opts])
                e_min = e_min + spread(vals, ui)
            feasible &= e_min <= master.budgets_j[m] + 1e-9

    n_feasible = int(feasible.sum())
    if n_feasible == 0:
        raise ValueError("no feasible assignment under the screens")
    mu = np.full(shape, -np.inf)
    for cut in master.cuts:
        val = np.full(shape, cut.constant)
        for ui, opts in enumerate(options):
            u = users[ui]
            vals = np.array([cut.a[u, mm] + (cut.b[u, mm] + cut.q[u, mm]) * zz
                             for mm, zz in opts])
            val = val + spread(vals, ui)
        np.maximum(mu, val, out=mu)
    mu = np.where(feasible, mu, np.inf)
    best = int(np.argmin(mu.reshape(-1)))
    idx = np.unravel_index(best, shape)
    choice = {users[ui]: options[ui][oi] for ui, oi in enumerate(idx)}
    assignment = make_assignment(master.num_users, master.num_aps, choice)
    return ExactMasterResult(assignment=assignment,
                             mu=float(mu.reshape(-1)[best]),
                             n_feasible=n_feasible,
                             n_screened=int(total - n_feasible))


def cut_envelope(master: MasterModel, assignment: Assignment) -> float:
    """Exact epigraph value of an assignment: the largest cut value."""
    return max(c.value(assignment.alpha, assignment.z) for c in master.cuts)


# ---------------------------------------------------------------------------
# Text export


def export_qubo(model: QuboModel, path: str | Path) -> None:
    """Write ``p qubo <vars> <terms> <offset>`` plus one ``i j coeff`` line per
    term, lexicographic; the variable registry lands in an adjacent JSON."""
    path = Path(path)
    lines = [f"p qubo {model.num_variables} {len(model.terms)} {model.offset!r}"]
    for (i, j) in sorted(model.terms):
        lines.append(f"{i} {j} {model.terms[(i, j)]!r}")
    path.write_text("\n".join(lines) + "\n")
    registry = {"variables": model.variables, "penalties": model.penalties}
    path.with_suffix(path.suffix + ".registry.json").write_text(
        json.dumps(registry, indent=2) + "\n")


def import_qubo(path: str | Path) -> QuboModel:
    path = Path(path)
    lines = path.read_text().strip().splitlines()
    head = lines[0].split()
    if head[:2] != ["p", "qubo"]:
        raise ValueError("not a qubo export file")
    n, n_terms, offset = int(head[2]), int(head[3]), float(head[4])
    terms: dict[tuple[int, int], float] = {}
    for line in lines[1:]:
        i, j, v = line.split()
        terms[(int(i), int(j))] = float(v)
    if len(terms) != n_terms:
        raise ValueError("term count does not match the header")
    reg_path = path.with_suffix(path.suffix + ".registry.json")
    if reg_path.exists():
        registry = json.loads(reg_path.read_text())
        names = registry["variables"]
        penalties = registry.get("penalties", {})
    else:
        names = [f"x[{i}]" for i in range(n)]
        penalties = {}
    return QuboModel(variables=names, index={s: i for i, s in enumerate(names)},
                     terms=terms, offset=offset, penalties=penalties)
