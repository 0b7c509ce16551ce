"""Samplers for quadratic binary models.

The workhorse is a seeded multi-read simulated annealer with single-bit-flip
Metropolis chains and incremental energy updates; an exhaustive backend with
the same interface serves as ground truth on small models, and a remote
backend stub marks where a hardware sampler would plug in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assignment import Assignment
from .master import DecodedSample, QuboModel, decode_sample

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


class NoFeasibleSample(RuntimeError):
    """No sampled state decodes to a feasible assignment."""


@dataclass(frozen=True)
class AnnealParams:
    """Multi-read schedule: geometric inverse-temperature ramp per read."""

    num_reads: int = 200
    sweeps: int = 2000
    beta_start: float = 0.1
    beta_end: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.num_reads < 1:
            raise ValueError("num_reads must be >= 1")
        if self.sweeps < 1:
            raise ValueError("sweeps must be >= 1")
        if not 0 < self.beta_start < self.beta_end:
            raise ValueError("need 0 < beta_start < beta_end")

    def schedule(self) -> np.ndarray:
        return np.geomspace(self.beta_start, self.beta_end, self.sweeps)


@dataclass(frozen=True)
class Sample:
    bits: np.ndarray
    energy: float
    read: int


_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


@njit(cache=True)
def _chain(n, diag, indptr, indices, weights, betas, seed):  # pragma: no cover
    state = np.zeros(n, dtype=np.uint8)
    s = _U64(seed)
    for i in range(n):
        s = s + _GOLDEN
        z = s
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        z = z ^ (z >> _U64(31))
        state[i] = np.uint8(z & _U64(1))
    field = diag.copy()
    for i in range(n):
        if state[i]:
            for k in range(indptr[i], indptr[i + 1]):
                field[indices[k]] += weights[k]
    for t in range(betas.shape[0]):
        beta = betas[t]
        for _ in range(n):
            s = s + _GOLDEN
            z = s
            z = (z ^ (z >> _U64(30))) * _MIX1
            z = (z ^ (z >> _U64(27))) * _MIX2
            z = z ^ (z >> _U64(31))
            i = int(z % _U64(n))
            delta = (1.0 - 2.0 * state[i]) * field[i]
            accept = delta <= 0.0
            if not accept:
                s = s + _GOLDEN
                z = s
                z = (z ^ (z >> _U64(30))) * _MIX1
                z = (z ^ (z >> _U64(27))) * _MIX2
                z = z ^ (z >> _U64(31))
                u = (z >> _U64(11)) * (1.0 / 9007199254740992.0)
                accept = u < math.exp(-beta * delta)
            if accept:
                if state[i]:
                    state[i] = 0
                    for k in range(indptr[i], indptr[i + 1]):
                        field[indices[k]] -= weights[k]
                else:
                    state[i] = 1
                    for k in range(indptr[i], indptr[i + 1]):
                        field[indices[k]] += weights[k]
    return state


def _adjacency(model: QuboModel):
    n = model.num_variables
    diag = np.zeros(n)
    rows: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for (i, j), v in model.terms.items():
        if i == j:
            diag[i] += v
        else:
            rows[i].append((j, v))
            rows[j].append((i, v))
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        indptr[i + 1] = indptr[i] + len(rows[i])
    indices = np.zeros(indptr[-1], dtype=np.int64)
    weights = np.zeros(indptr[-1])
    pos = 0
    for i in range(n):
        for j, v in rows[i]:
            indices[pos] = j
            weights[pos] = v
            pos += 1
    return diag, indptr, indices, weights


class Sampler:
    """Interchangeable low-energy sampler interface."""

    def sample(self, model: QuboModel, params: AnnealParams) -> list[Sample]:
        raise NotImplementedError


class SimulatedAnnealingSampler(Sampler):
    """Independent Metropolis chains, deterministic per (model, params, seed).

    Each read owns an rng stream derived from (seed, read); reads are
    independent and may be distributed, with the merged output sorted by
    energy and then read index.  Emitted energies are full re-evaluations, so
    incremental-update drift cannot leak into results.
    """

    def sample(self, model: QuboModel, params: AnnealParams) -> list[Sample]:
        if model.num_variables == 0:
            raise ValueError("empty model")
        diag, indptr, indices, weights = _adjacency(model)
        betas = params.schedule()
        samples = []
        for read in range(params.num_reads):
            seed = np.random.SeedSequence((params.seed, read)).generate_state(
                1, dtype=np.uint64)[0]
            bits = _chain(model.num_variables, diag, indptr, indices, weights,
                          betas, seed)
            bits = np.array(bits, dtype=np.uint8)
            bits.flags.writeable = False
            samples.append(Sample(bits=bits, energy=model.energy(bits), read=read))
        samples.sort(key=lambda s: (s.energy, s.read))
        return samples


class ExhaustiveSampler(Sampler):
    """Ground-truth backend: enumerates every state of a small model."""

    def __init__(self, max_bits: int = 24):
        self.max_bits = max_bits

    def sample(self, model: QuboModel, params: AnnealParams) -> list[Sample]:
        n = model.num_variables
        if n > self.max_bits:
            raise ValueError(f"{n} bits exceed the exhaustive limit {self.max_bits}")
        count = 1 << n
        idx = np.arange(count, dtype=np.uint64)
        states = ((idx[:, None] >> np.arange(n, dtype=np.uint64)) & 1).astype(np.uint8)
        energies = model.energies(states)
        order = np.argsort(energies, kind="stable")[:params.num_reads]
        samples = []
        for rank, k in enumerate(order):
            bits = states[k].copy()
            bits.flags.writeable = False
            samples.append(Sample(bits=bits, energy=float(energies[k]), read=rank))
        return samples


def top_feasible(samples: list[Sample], model: QuboModel,
                 rho: int) -> list[DecodedSample]:
    """Lowest-energy feasible decodes, deduplicated by assignment, at most rho.

    Feasibility means the structural assignment families are clean; the
    epigraph register is not part of the filter.
    """
    if rho < 1:
        raise ValueError("rho must be >= 1")
    seen: set[bytes] = set()
    out: list[DecodedSample] = []
    for s in samples:
        decoded = decode_sample(model, s.bits)
        if not decoded.feasible:
            continue
        key = decoded.assignment.key()
        if key in seen:
            continue
        seen.add(key)
        out.append(decoded)
        if len(out) >= rho:
            break
    if not out:
        raise NoFeasibleSample("no sampled state decodes feasibly")
    return out


def violated_families(samples: list[Sample], model: QuboModel,
                      limit: int = 20) -> set[str]:
    """Constraint families violated among the lowest-energy samples; feeds the
    penalty escalation loop."""
    fams: set[str] = set()
    for s in samples[:limit]:
        decoded = decode_sample(model, s.bits)
        fams.update(f for f, _ in decoded.violations)
    return fams


def best_multiplicity(samples: list[Sample], bits: np.ndarray) -> int:
    """How many reads reproduced the given state exactly."""
    target = np.asarray(bits)
    return sum(1 for s in samples if np.array_equal(s.bits, target))


def samples_to_jsonl(samples: list[Sample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({"bits": s.bits.tolist(),
                                 "energy": s.energy, "read": s.read}) + "\n")


def samples_from_jsonl(path: str | Path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            bits = np.array(d["bits"], dtype=np.uint8)
            bits.flags.writeable = False
            out.append(Sample(bits=bits, energy=float(d["energy"]),
                              read=int(d["read"])))
    return out


# ---------------------------------------------------------------------------
# Remote backend stub


@dataclass(frozen=True)
class AnnealRequest:
    """Wire format for submitting a model to an external annealing service."""

    num_variables: int
    terms: dict[tuple[int, int], float]
    offset: float
    params: AnnealParams


@dataclass(frozen=True)
class AnnealResponse:
    samples: list[Sample] = field(default_factory=list)


class RemoteAnnealerClient(Sampler):
    """Placeholder client so hardware backends can slot in behind the same
    interface; no transport is implemented here."""

    def __init__(self, endpoint: str):
        self.endpoint = endpoint

    def sample(self, model: QuboModel, params: AnnealParams) -> list[Sample]:
        raise NotImplementedError("remote annealing backend is a stub")
