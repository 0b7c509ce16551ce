"""Three-tier edge network scenario: configuration, per-slot randomness, link physics.

The network has ground base stations, high-altitude platforms and orbital relays
serving a fixed population of users.  Base stations and platforms carry edge
servers; orbital nodes only relay to the cloud.  All dB/dBm quantities are
converted to linear scale when a :class:`Scenario` is built; internal units are
bits, Hz, seconds, Joules and CPU cycles.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

LIGHT_SPEED_M_S = 299_792_458.0
EARTH_RADIUS_M = 6_378_137.0

TIER_BS = "bs"
TIER_HAP = "hap"
TIER_SAT = "satellite"
TIERS = (TIER_BS, TIER_HAP, TIER_SAT)


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class ApProfile:
    """Static description of one access point.

    ``position_m`` is (x, y, altitude) for ground/air nodes.  Orbital nodes are
    placed overhead at ``orbit_altitude_m`` and follow a periodic visibility
    window; ``visibility_period_s=None`` derives the period from the orbital
    altitude and ``orbit_speed_m_s``.
    """

    tier: str
    bandwidth_hz: float
    tx_power_dbm: float
    max_cpu_hz: float = 0.0
    kappa: float = 1e-28
    beta_min: float = 0.0
    beta_max: float = 1.0
    f_min_hz: float = 0.0
    f_max_hz: float = 0.0
    backhaul_bps: float = 1e8
    energy_budget_j: float = 1.0
    antenna_gain_dbi: float = 0.0
    extra_link_gain_db: float = 0.0
    carrier_freq_hz: float = 5e9
    position_m: tuple[float, float, float] = (0.0, 0.0, 30.0)
    orbit_altitude_m: float = 780e3
    orbit_speed_m_s: float = 4e3
    visibility_period_s: float | None = None
    visibility_duty: float = 1.0
    visibility_phase_s: float = 0.0
    blockage_prob: float = 0.0
    rician_k_db: float = 10.0

    @property
    def has_compute(self) -> bool:
        return self.tier != TIER_SAT


@dataclass(frozen=True)
class NetworkConfig:
    """Full experiment configuration (users, APs, radio and task statistics)."""

    user_count: int
    ap_profiles: tuple[ApProfile, ...]
    noise_dbm_per_hz: float = -174.0
    user_tx_power_dbm: float = 30.0
    slot_duration_s: float = 5.0
    horizon_slots: int = 500
    cloud_cpu_hz: float = 2e9
    rng_seed: int = 0
    area_side_m: float = 1000.0
    task_bits_range: tuple[float, float] = (1e6, 6e6)
    cycles_per_bit_range: tuple[float, float] = (100.0, 500.0)


def _check(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def validate_config(cfg: NetworkConfig) -> None:
    _check(cfg.user_count >= 1, "user_count", "must be >= 1")
    _check(cfg.horizon_slots >= 1, "horizon_slots", "must be >= 1")
    _check(cfg.slot_duration_s > 0, "slot_duration_s", "must be > 0")
    _check(cfg.cloud_cpu_hz > 0, "cloud_cpu_hz", "must be > 0")
    _check(math.isfinite(cfg.user_tx_power_dbm), "user_tx_power_dbm", "must be finite")
    _check(len(cfg.ap_profiles) >= 1, "ap_profiles", "need at least one access point")
    lo, hi = cfg.task_bits_range
    _check(0 < lo <= hi, "task_bits_range", "need 0 < lo <= hi")
    lo, hi = cfg.cycles_per_bit_range
    _check(0 < lo <= hi, "cycles_per_bit_range", "need 0 < lo <= hi")

    # Tiers must appear as contiguous blocks: ground, then air, then orbit.
    order = {TIER_BS: 0, TIER_HAP: 1, TIER_SAT: 2}
    last = -1
    for i, ap in enumerate(cfg.ap_profiles):
        path = f"ap_profiles[{i}]"
        _check(ap.tier in TIERS, f"{path}.tier", f"unknown tier {ap.tier!r}")
        _check(order[ap.tier] >= last, f"{path}.tier",
               "tiers must be ordered bs, hap, satellite")
        last = order[ap.tier]
        _check(ap.bandwidth_hz > 0, f"{path}.bandwidth_hz", "must be > 0")
        _check(math.isfinite(ap.tx_power_dbm), f"{path}.tx_power_dbm", "must be finite")
        _check(0.0 <= ap.beta_min <= ap.beta_max <= 1.0, f"{path}.beta_min",
               "need 0 <= beta_min <= beta_max <= 1")
        _check(ap.energy_budget_j > 0, f"{path}.energy_budget_j", "must be > 0")
        _check(ap.backhaul_bps > 0, f"{path}.backhaul_bps", "must be > 0")
        _check(ap.carrier_freq_hz > 0, f"{path}.carrier_freq_hz", "must be > 0")
        _check(0.0 <= ap.blockage_prob <= 1.0, f"{path}.blockage_prob", "must be in [0, 1]")
        if ap.has_compute:
            _check(ap.max_cpu_hz > 0, f"{path}.max_cpu_hz", "must be > 0 for compute tiers")
            _check(0.0 <= ap.f_min_hz <= ap.f_max_hz <= ap.max_cpu_hz, f"{path}.f_min_hz",
                   "need 0 <= f_min <= f_max <= max_cpu")
            _check(ap.kappa >= 0, f"{path}.kappa", "must be >= 0")
        else:
            _check(0.0 <= ap.visibility_duty <= 1.0, f"{path}.visibility_duty",
                   "must be in [0, 1]")
            if ap.visibility_period_s is not None:
                _check(ap.visibility_period_s > 0, f"{path}.visibility_period_s",
                       "must be > 0")


@dataclass(frozen=True)
class SlotState:
    """Realized randomness of one time slot.

    ``available[u, m]`` marks reachable APs, ``gain[u, m]`` is the linear channel
    gain (only meaningful where available), and each user carries a task of
    ``task_bits[u]`` bits at ``cycles_per_bit[u]`` cycles per bit.  Users with no
    reachable AP are listed in ``infeasible_users`` and the slot is flagged.
    """

    t: int
    available: np.ndarray      # (U, M) uint8
    gain: np.ndarray           # (U, M) float64
    task_bits: np.ndarray      # (U,)
    cycles_per_bit: np.ndarray  # (U,)
    infeasible_users: tuple[int, ...] = ()

    @property
    def feasible(self) -> bool:
        return not self.infeasible_users

    @property
    def active_users(self) -> tuple[int, ...]:
        dead = set(self.infeasible_users)
        return tuple(u for u in range(self.available.shape[0]) if u not in dead)


class Scenario:
    """Validated configuration with derived linear-scale quantities.

    Per-slot sampling is a pure function of ``(config, t, rng_seed)``; slots may
    be generated out of order or in parallel.
    """

    def __init__(self, cfg: NetworkConfig):
        validate_config(cfg)
        self.cfg = cfg
        self.num_users = cfg.user_count
        self.num_aps = len(cfg.ap_profiles)
        self.tiers = tuple(ap.tier for ap in cfg.ap_profiles)
        self.compute_ok = np.array([ap.has_compute for ap in cfg.ap_profiles])
        self.user_power_w = dbm_to_watt(cfg.user_tx_power_dbm)
        self.noise_w_per_hz = dbm_to_watt(cfg.noise_dbm_per_hz)
        self.bandwidth_hz = np.array([ap.bandwidth_hz for ap in cfg.ap_profiles])
        self.noise_w = self.noise_w_per_hz * self.bandwidth_hz
        self.ap_power_w = np.array([dbm_to_watt(ap.tx_power_dbm) for ap in cfg.ap_profiles])
        self.backhaul_bps = np.array([ap.backhaul_bps for ap in cfg.ap_profiles])
        self.energy_budget_j = np.array([ap.energy_budget_j for ap in cfg.ap_profiles])
        self.kappa = np.array([ap.kappa for ap in cfg.ap_profiles])
        self.max_cpu_hz = np.array([ap.max_cpu_hz for ap in cfg.ap_profiles])
        self.f_min_hz = np.array([ap.f_min_hz for ap in cfg.ap_profiles])
        self.f_max_hz = np.array([ap.f_max_hz for ap in cfg.ap_profiles])
        self.beta_min = np.array([ap.beta_min for ap in cfg.ap_profiles])
        self.beta_max = np.array([ap.beta_max for ap in cfg.ap_profiles])

        geo_rng = np.random.default_rng(
            np.random.SeedSequence(cfg.rng_seed, spawn_key=(0,)))
        self.user_xy = geo_rng.uniform(0.0, cfg.area_side_m, size=(self.num_users, 2))
        self.path_gain = self._static_path_gain()

    def _static_path_gain(self) -> np.ndarray:
        """Free-space loss times antenna and link gains, per (user, AP)."""
        gains = np.zeros((self.num_users, self.num_aps))
        for m, ap in enumerate(self.cfg.ap_profiles):
            if ap.tier == TIER_SAT:
                # Overhead relay: slant range equals the orbital altitude.
                dist = np.full(self.num_users, ap.orbit_altitude_m)
            else:
                dx = self.user_xy[:, 0] - ap.position_m[0]
                dy = self.user_xy[:, 1] - ap.position_m[1]
                dist = np.sqrt(dx * dx + dy * dy + ap.position_m[2] ** 2)
            dist = np.maximum(dist, 1.0)
            wavelength = LIGHT_SPEED_M_S / ap.carrier_freq_hz
            fspl = (wavelength / (4.0 * math.pi * dist)) ** 2
            gains[:, m] = fspl * db_to_linear(ap.antenna_gain_dbi + ap.extra_link_gain_db)
        return gains

    def satellite_visible(self, ap: ApProfile, t: int) -> bool:
        period = ap.visibility_period_s
        if period is None:
            radius = EARTH_RADIUS_M + ap.orbit_altitude_m
            period = 2.0 * math.pi * radius / ap.orbit_speed_m_s
        if ap.visibility_duty >= 1.0:
            return True
        if ap.visibility_duty <= 0.0:
            return False
        phase = (t * self.cfg.slot_duration_s + ap.visibility_phase_s) % period
        return phase < ap.visibility_duty * period

    def snr(self, slot: SlotState) -> np.ndarray:
        """Linear receive SNR per (user, AP) for the slot's channel draw."""
        return self.user_power_w * slot.gain / self.noise_w[None, :]

    def config_hash(self) -> str:
        blob = json.dumps(config_to_dict(self.cfg), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_scenario(cfg: NetworkConfig) -> Scenario:
    return Scenario(cfg)


def sample_slot(scn: Scenario, t: int) -> SlotState:
    """Draw connectivity, fading and tasks for slot ``t``.

    Deterministic given (config, t, seed): every slot owns an independent
    substream keyed by the slot index.  Base-station links fade Rayleigh,
    air/orbit links Rician; availability is an independent blockage draw per
    link for ground/air tiers and a shared periodic visibility window for the
    orbital tier.
    """
    cfg = scn.cfg
    if not 0 <= t < cfg.horizon_slots:
        raise ValueError(f"slot index {t} outside horizon [0, {cfg.horizon_slots})")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.rng_seed, spawn_key=(1, t)))
    U, M = scn.num_users, scn.num_aps
    avail = np.zeros((U, M), dtype=np.uint8)
    gain = np.zeros((U, M))
    for m, ap in enumerate(cfg.ap_profiles):
        if ap.tier == TIER_BS:
            fade = rng.exponential(1.0, size=U)
        else:
            k = db_to_linear(ap.rician_k_db)
            los = math.sqrt(k / (k + 1.0))
            sigma = math.sqrt(1.0 / (2.0 * (k + 1.0)))
            re = rng.normal(los, sigma, size=U)
            im = rng.normal(0.0, sigma, size=U)
            fade = re * re + im * im
        fade = np.maximum(fade, 1e-12)
        gain[:, m] = scn.path_gain[:, m] * fade
        if ap.tier == TIER_SAT:
            avail[:, m] = 1 if scn.satellite_visible(ap, t) else 0
        else:
            avail[:, m] = (rng.random(U) >= ap.blockage_prob).astype(np.uint8)
    lo, hi = cfg.task_bits_range
    task_bits = rng.uniform(lo, hi, size=U)
    lo, hi = cfg.cycles_per_bit_range
    cycles = rng.uniform(lo, hi, size=U)
    dead = tuple(int(u) for u in np.flatnonzero(avail.sum(axis=1) == 0))
    avail.flags.writeable = False
    gain.flags.writeable = False
    task_bits.flags.writeable = False
    cycles.flags.writeable = False
    return SlotState(t=t, available=avail, gain=gain, task_bits=task_bits,
                     cycles_per_bit=cycles, infeasible_users=dead)


def data_rate(beta: float, ap: ApProfile, gain: float, cfg: NetworkConfig) -> float:
    """Uplink rate in bit/s for a bandwidth fraction ``beta`` on one link."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if gain < 0.0:
        raise ValueError("gain must be >= 0")
    noise_w = dbm_to_watt(cfg.noise_dbm_per_hz) * ap.bandwidth_hz
    snr = dbm_to_watt(cfg.user_tx_power_dbm) * gain / noise_w
    return beta * ap.bandwidth_hz * math.log2(1.0 + snr)


class AllocationError(ValueError):
    """Allocation inconsistent with the binary decisions it claims to support."""


@dataclass(frozen=True)
class ServiceMetrics:
    user_delay_s: np.ndarray   # (U,)
    pair_energy_j: np.ndarray  # (U, M)

    @property
    def total_delay_s(self) -> float:
        return float(self.user_delay_s.sum())

    @property
    def ap_energy_j(self) -> np.ndarray:
        return self.pair_energy_j.sum(axis=0)


def service_delay(scn: Scenario, slot: SlotState, assignment, allocation) -> ServiceMetrics:
    """Per-user service delay and per-AP energy for a given allocation.

    The delay of a user is the sum of its uplink, onboard-compute, backhaul and
    cloud-compute times over all APs.  AP-side energy charges backhaul
    transmission at the AP transmit power plus onboard compute at
    ``kappa * f^2 * bits * cycles_per_bit`` for locally processed tasks.
    Allocations whose bandwidth or CPU shares are positive outside the support
    of the association / compute decisions are rejected.
    """
    alpha = assignment.alpha
    z = assignment.z
    if np.any((allocation.beta > 0) & (alpha == 0)):
        raise AllocationError("bandwidth assigned outside association support")
    if np.any((allocation.f > 0) & (z == 0)):
        raise AllocationError("CPU assigned outside compute support")
    delays = (allocation.tau_tx + allocation.tau_cp
              + allocation.tau_txc + allocation.tau_cpc).sum(axis=1)
    work = slot.task_bits * slot.cycles_per_bit
    compute_e = scn.kappa[None, :] * allocation.f ** 2 * work[:, None] * z
    relay_e = scn.ap_power_w[None, :] * allocation.tau_txc
    energy = relay_e + compute_e
    return ServiceMetrics(user_delay_s=delays, pair_energy_j=energy)


# ---------------------------------------------------------------------------
# JSON serialization


def config_to_dict(cfg: NetworkConfig) -> dict:
    d = asdict(cfg)
    d["ap_profiles"] = [asdict(ap) for ap in cfg.ap_profiles]
    return d


def config_from_dict(d: dict) -> NetworkConfig:
    try:
        aps = []
        for i, raw in enumerate(d.get("ap_profiles", [])):
            try:
                raw = dict(raw)
                if "position_m" in raw:
                    raw["position_m"] = tuple(raw["position_m"])
                aps.append(ApProfile(**raw))
            except TypeError as exc:
                raise ConfigError(f"ap_profiles[{i}]: {exc}") from exc
        top = {k: v for k, v in d.items() if k != "ap_profiles"}
        for key in ("task_bits_range", "cycles_per_bit_range"):
            if key in top:
                top[key] = tuple(top[key])
        cfg = NetworkConfig(ap_profiles=tuple(aps), **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> NetworkConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: NetworkConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


def slot_to_dict(slot: SlotState) -> dict:
    return {
        "t": slot.t,
        "available": slot.available.tolist(),
        "gain": slot.gain.tolist(),
        "task_bits": slot.task_bits.tolist(),
        "cycles_per_bit": slot.cycles_per_bit.tolist(),
        "infeasible_users": list(slot.infeasible_users),
    }


def slot_from_dict(d: dict) -> SlotState:
    avail = np.array(d["available"], dtype=np.uint8)
    gain = np.array(d["gain"], dtype=float)
    if np.any((avail == 1) & (gain <= 0)):
        raise ConfigError("gain: must be > 0 on available links")
    return SlotState(
        t=int(d["t"]),
        available=avail,
        gain=gain,
        task_bits=np.array(d["task_bits"], dtype=float),
        cycles_per_bit=np.array(d["cycles_per_bit"], dtype=float),
        infeasible_users=tuple(d.get("infeasible_users", [])),
    )


# ---------------------------------------------------------------------------
# Ready-made configurations


def desk_config(users: int = 6, n_bs: int = 2, n_hap: int = 1, n_sat: int = 1,
                seed: int = 0, horizon: int = 500, **overrides) -> NetworkConfig:
    """Small configuration sized for exhaustive verification and quick runs."""
    side = 1000.0
    corners = [(0.0, 0.0), (side, side), (0.0, side), (side, 0.0)]
    aps: list[ApProfile] = []
    for i in range(n_bs):
        x, y = corners[i % 4]
        aps.append(ApProfile(
            tier=TIER_BS, bandwidth_hz=10e6, tx_power_dbm=41.0, max_cpu_hz=6e9,
            kappa=1e-28, beta_min=0.05, beta_max=1.0, f_min_hz=2e8, f_max_hz=4e9,
            backhaul_bps=2e8, energy_budget_j=1.0, antenna_gain_dbi=10.0,
            carrier_freq_hz=5e9, position_m=(x, y, 30.0), blockage_prob=0.2))
    for i in range(n_hap):
        x = 0.2 * side if i % 2 == 0 else 0.8 * side
        aps.append(ApProfile(
            tier=TIER_HAP, bandwidth_hz=400e6, tx_power_dbm=41.0, max_cpu_hz=4e9,
            kappa=1e-28, beta_min=0.02, beta_max=1.0, f_min_hz=2e8, f_max_hz=2.5e9,
            backhaul_bps=1.5e8, energy_budget_j=0.6, antenna_gain_dbi=15.0,
            extra_link_gain_db=45.0, carrier_freq_hz=38e9,
            position_m=(x, side - x, 20e3), blockage_prob=0.1, rician_k_db=10.0))
    for _ in range(n_sat):
        aps.append(ApProfile(
            tier=TIER_SAT, bandwidth_hz=800e6, tx_power_dbm=42.0,
            backhaul_bps=5e8, energy_budget_j=0.4, antenna_gain_dbi=50.0,
            extra_link_gain_db=40.0, carrier_freq_hz=30e9,
            orbit_altitude_m=780e3, orbit_speed_m_s=4e3,
            visibility_period_s=300.0, visibility_duty=0.7, rician_k_db=10.0))
    base = dict(user_count=users, ap_profiles=tuple(aps), rng_seed=seed,
                horizon_slots=horizon, slot_duration_s=5.0, cloud_cpu_hz=2e9)
    base.update(overrides)
    return NetworkConfig(**base)


def table_scale_config(seed: int = 0) -> NetworkConfig:
    """Reference-scale configuration: 35 users, 4 ground stations, 2 platforms,
    one orbital relay, 500 slots of 5 s."""
    return desk_config(users=35, n_bs=4, n_hap=2, n_sat=1, seed=seed, horizon=500)
