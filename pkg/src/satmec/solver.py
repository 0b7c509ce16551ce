"""Iterative master/subproblem solver for one slot.

Each iteration solves the continuous subproblem at the current seed
assignments, adds the resulting cuts, and re-solves the binary master either
exactly (enumeration) or by sampling the compiled quadratic model.  Upper
bounds come from subproblem values, lower bounds from the master; the loop
stops when the relative gap closes or the iteration budget runs out.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .annealer import (AnnealParams, NoFeasibleSample, Sampler,
                       SimulatedAnnealingSampler, best_multiplicity,
                       top_feasible, violated_families)
from .assignment import (Allocation, Assignment, InvalidAssignment,
                         max_snr_assignment, random_feasible_assignment)
from .lyapunov import ControlParams, QueueState
from .master import (MasterModel, MuEncoding, build_master, compile_qubo,
                     cut_envelope, default_penalties, solve_master_exact)
from .scenario import Scenario, SlotState
from .subproblem import SubproblemSolution, make_cut, solve_subproblem


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    ub: float
    lb: float
    gap: float
    cuts_added: int
    master_ms: float
    sub_ms: float


@dataclass
class SolveTrace:
    """Per-iteration bound history and the reason the loop ended."""

    iterations: list[IterationRecord] = field(default_factory=list)
    termination: str = "max_iterations"

    @property
    def final_ub(self) -> float:
        return self.iterations[-1].ub if self.iterations else float("inf")

    @property
    def final_lb(self) -> float:
        return self.iterations[-1].lb if self.iterations else float("-inf")

    @property
    def final_gap(self) -> float:
        return self.iterations[-1].gap if self.iterations else float("inf")

    @property
    def num_iterations(self) -> int:
        return len(self.iterations)

    def csv_rows(self) -> list[str]:
        rows = ["iteration,ub,lb,gap,cuts,master_ms,sub_ms"]
        for r in self.iterations:
            rows.append(f"{r.iteration},{r.ub!r},{r.lb!r},{r.gap!r},"
                        f"{r.cuts_added},{r.master_ms:.3f},{r.sub_ms:.3f}")
        return rows


@dataclass(frozen=True)
class SlotResult:
    assignment: Assignment
    allocation: Allocation
    trace: SolveTrace
    solution: SubproblemSolution
    master: MasterModel

    @property
    def phi(self) -> float:
        return self.solution.phi


def _gap(ub: float, lb: float) -> float:
    return abs(ub - lb) / max(abs(ub), 1e-12)


def _derive_anneal(anneal: AnnealParams, seed: int, iteration: int,
                   attempt: int) -> AnnealParams:
    mixed = int(np.random.SeedSequence((seed, 3, iteration, attempt))
                .generate_state(1, dtype=np.uint32)[0])
    return replace(anneal, seed=mixed)


def _solve_sampled_master(master, sampler, anneal, penalties, lb, ub, rho,
                          seed, iteration, mu_frac_bits, escalations):
    """Compile, sample, decode; escalate penalties on infeasible optima."""
    lo = lb if np.isfinite(lb) else min(c.interval_min() for c in master.cuts)
    hi = ub if np.isfinite(ub) else 0.0
    enc = MuEncoding.for_range(lo - 2.0 ** (1 - mu_frac_bits),
                               hi + 2.0 ** (-mu_frac_bits), n_frac=mu_frac_bits)
    if penalties.get("_range") != (lo, hi):
        base = default_penalties(enc, lo, hi)
        mult = penalties.get("_mult", {f: 1.0 for f in base})
        penalties.update({f: base[f] * mult[f] for f in base})
        penalties["_range"] = (lo, hi)
        penalties["_mult"] = mult
    for attempt in range(escalations + 1):
        fams = {f: w for f, w in penalties.items() if not f.startswith("_")}
        model = compile_qubo(master, enc, fams, value_range=(lo, hi))
        samples = sampler.sample(model, _derive_anneal(anneal, seed, iteration,
                                                       attempt))
        try:
            top = top_feasible(samples, model, rho)
            return model, samples, top
        except NoFeasibleSample:
            if attempt == escalations:
                raise
            for fam in violated_families(samples, model):
                penalties["_mult"][fam] *= 10.0
                penalties[fam] *= 10.0
    raise NoFeasibleSample("penalty escalation exhausted")  # pragma: no cover


def solve_slot(scn: Scenario, slot: SlotState, queue: QueueState,
               params: ControlParams, *, rho: int = 1,
               master_backend: str = "sampler",
               sampler: Sampler | None = None,
               anneal: AnnealParams | None = None,
               energy_cap: np.ndarray | None = None,
               seed: int = 0, mu_frac_bits: int = 6,
               escalations: int = 3) -> SlotResult:
    """Run the cut-generation loop for one slot and return the incumbent.

    ``rho`` controls how many seed assignments feed subproblems per iteration
    (cuts are deduplicated by assignment, so repeated seeds are free).  The
    sampled master evaluates the lower bound as the exact cut envelope of the
    decoded assignment rather than trusting the quantized register, and only
    declares gap convergence once the best state was reproduced by three
    independent reads.
    """
    if not slot.active_users:
        raise ValueError("slot has no active users to serve")
    if master_backend not in ("sampler", "exact"):
        raise ValueError(f"unknown master backend {master_backend!r}")
    if sampler is None:
        sampler = SimulatedAnnealingSampler()
    if anneal is None:
        anneal = AnnealParams()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))

    master = build_master(scn, slot)
    penalties: dict = {}
    trace = SolveTrace()
    cut_keys: dict[bytes, int | None] = {}
    incumbent: SubproblemSolution | None = None
    ub, lb = float("inf"), float("-inf")
    seeds = [max_snr_assignment(scn, slot)]
    for _ in range(rho - 1):
        seeds.append(random_feasible_assignment(scn, slot, rng))
    exhausted = False

    for it in range(1, params.l_max + 1):
        t0 = time.perf_counter()
        cuts_added = 0
        for cand in seeds:
            key = cand.key()
            if key in cut_keys:
                continue
            try:
                sol = solve_subproblem(scn, slot, cand, queue, params,
                                       energy_cap=energy_cap)
            except InvalidAssignment:
                cut_keys[key] = None
                continue
            master.add_cut(make_cut(scn, slot, sol, params))
            cut_keys[key] = len(master.cuts) - 1
            cuts_added += 1
            if sol.phi < ub:
                ub = sol.phi
                incumbent = sol
        if not master.cuts:
            # Every seed screened out; retry with fresh random assignments.
            seeds = [random_feasible_assignment(scn, slot, rng)
                     for _ in range(max(rho, 2))]
            if all(s.key() in cut_keys for s in seeds):
                raise InvalidAssignment("no seed assignment survives screening")
            continue
        sub_ms = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        model = samples = None
        if master_backend == "exact":
            res = solve_master_exact(master, energy_screen=energy_cap is not None)
            decoded_best = res.assignment
            lb_new = res.mu
            next_seeds = [res.assignment]
        else:
            model, samples, top = _solve_sampled_master(
                master, sampler, anneal, penalties, lb, ub, max(rho, 3),
                seed, it, mu_frac_bits, escalations)
            decoded_best = top[0].assignment
            lb_new = min(cut_envelope(master, d.assignment) for d in top[:rho])
            next_seeds = [d.assignment for d in top
                          if d.assignment.key() not in cut_keys][:rho]
            if not next_seeds:
                refill = []
                for _ in range(20 * rho):
                    cand = random_feasible_assignment(scn, slot, rng)
                    if cand.key() not in cut_keys and cand not in refill:
                        refill.append(cand)
                    if len(refill) >= rho:
                        break
                next_seeds = refill
                if not next_seeds:
                    exhausted = True
        master_ms = (time.perf_counter() - t0) * 1e3

        lb = max(lb, lb_new)
        gap = _gap(ub, lb)
        trace.iterations.append(IterationRecord(
            iteration=it, ub=ub, lb=lb, gap=gap, cuts_added=cuts_added,
            master_ms=master_ms, sub_ms=sub_ms))

        if gap <= params.eps:
            if master_backend == "exact":
                trace.termination = "gap"
                break
            need = min(3, anneal.num_reads)
            mult = best_multiplicity(samples, _best_bits(samples, model,
                                                         decoded_best))
            retries = 0
            while mult < need and retries < 2:
                retries += 1
                extra = sampler.sample(model, _derive_anneal(
                    anneal, seed, it, 100 + retries))
                samples = sorted(samples + extra, key=lambda s: (s.energy, s.read))
                mult = best_multiplicity(samples, _best_bits(samples, model,
                                                             decoded_best))
            trace.termination = "gap"
            break
        if exhausted:
            trace.termination = "exhausted"
            break
        seeds = next_seeds
    if incumbent is None:
        raise InvalidAssignment("no feasible assignment was ever solved")
    return SlotResult(assignment=incumbent.assignment,
                      allocation=incumbent.allocation, trace=trace,
                      solution=incumbent, master=master)


def _best_bits(samples, model, assignment: Assignment) -> np.ndarray:
    """Bits of the lowest-energy sample decoding to the given assignment."""
    from .master import decode_sample

    key = assignment.key()
    for s in samples:
        if decode_sample(model, s.bits).assignment.key() == key:
            return s.bits
    return samples[0].bits


def solve_slot_single_cut(scn, slot, queue, params, **kw) -> SlotResult:
    """Annealed master, one cut per iteration."""
    return solve_slot(scn, slot, queue, params, rho=1, **kw)


def solve_slot_multi_cut(scn, slot, queue, params, **kw) -> SlotResult:
    """Annealed master, one cut per retained sample per iteration."""
    return solve_slot(scn, slot, queue, params, rho=params.rho, **kw)


def solve_slot_exact_master(scn, slot, queue, params, **kw) -> SlotResult:
    """Reference loop with the master solved by exhaustive enumeration."""
    kw.pop("sampler", None)
    kw.pop("anneal", None)
    return solve_slot(scn, slot, queue, params, rho=1, master_backend="exact",
                      **kw)
