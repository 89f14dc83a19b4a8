"""Simulation configuration: every protocol, timing, channel and motion knob.

Durations are kiloticks (1 kt = 1/31 s); lengths are millimeters. Any ``*_kt``
key may also be given in seconds through the matching ``*_s`` key.
"""
from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..geometry import ShapeKind, make_arena
from ..protocol import ProtocolParams

KT_PER_S = 31


def kt_to_s(kt: float) -> float:
    return kt / KT_PER_S


def s_to_kt(s: float) -> int:
    return int(round(s * KT_PER_S))


class ConfigError(ValueError):
    pass


class Placement(str, enum.Enum):
    DISPERSION = "dispersion"  # packed at the center, then run-and-tumble
    RANDOM = "random"  # immobile, i.i.d. uniform positions
    UNIFORM = "uniform"  # immobile, near-equidistant positions

    @classmethod
    def parse(cls, name) -> "Placement":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "").replace("-", "")
        aliases = {"dispersion": cls.DISPERSION, "packedcenterthendisperse": cls.DISPERSION,
                   "random": cls.RANDOM, "uniform": cls.UNIFORM}
        if key not in aliases:
            raise ConfigError(f"unknown placement: {name!r}")
        return aliases[key]


# (units, help) per key; used for validation messages and CLI --help
FIELD_DOCS = {
    "shape": ("-", "arena kind: Disk, Square, Arrow, Star, Triangle, Stop, Annulus"),
    "surface": ("mm^2", "arena area S"),
    "n_agents": ("count", "number of agents N"),
    "sigma": ("mm", "communication range"),
    "placement": ("-", "dispersion | random | uniform"),
    "c": ("1/s", "diffusion rate"),
    "tau": ("s", "time step inside the diffusion update"),
    "P": ("count", "parallel diffusion sessions"),
    "I": ("count", "iterations"),
    "seeding_kt": ("kt", "initial dispersion duration"),
    "waiting_kt": ("kt", "idle time at the start of each iteration"),
    "short_walk_kt": ("kt", "per-iteration dispersion duration"),
    "handshake_rounds": ("count", "handshake rounds"),
    "handshake_round_kt": ("kt", "duration of one handshake round"),
    "handshake_slots": ("count", "broadcast slots per handshake round (null = enough to confirm every neighbor)"),
    "handshake_quorum": ("fraction", "share of rounds a confirmation must appear in"),
    "step_kt": ("kt", "duration of one diffusion step"),
    "diffusion_kt": ("kt", "duration of one diffusion (and pre-diffusion) session"),
    "burn_in_kt": ("kt", "initial diffusion time ignored by the fit"),
    "consensus_step_kt": ("kt", "duration of one consensus round"),
    "consensus_kt": ("kt", "duration of the consensus stage"),
    "msg_success_prob": ("probability", "independent delivery probability per message"),
    "tx_period_kt": ("kt", "interval between repeated broadcasts of a value within a diffusion or consensus step"),
    "per_step_msg_budget": ("count", "messages an agent can receive per step (null = unlimited)"),
    "asym_link_jitter": ("mm", "std of the per directed link range perturbation"),
    "clock_skew_max": ("steps", "max per-agent diffusion lag"),
    "max_neighbors": ("count", "capacity of the handshake neighbor list (null = unlimited)"),
    "agent_radius": ("mm", "agent body radius"),
    "agent_speed": ("mm/s", "straight-line speed during runs"),
    "motion_step_kt": ("kt", "motion integration step"),
    "run_kt": ("kt", "run duration"),
    "tumble_mean_kt": ("kt", "mean tumble duration"),
    "tumble_std_kt": ("kt", "tumble duration std"),
    "tumble_max_kt": ("kt", "tumble duration upper clamp"),
    "mse_guard": ("bool", "pick the lowest-MSE fit window"),
    "fit_min_window": ("fraction", "shortest fit window the guard may pick, as a share of steps B..T"),
    "divergence_threshold": ("fraction", "divergent fits share above which a run is divergent"),
    "seed": ("int", "64-bit RNG seed"),
}


@dataclass(frozen=True)
class SimConfig:
    shape: str = "Disk"
    surface: float = 500000.0
    n_agents: int = 300
    sigma: float = 85.0
    placement: str = "dispersion"
    c: float = 1.0
    tau: float = 1.0 / 15.0
    P: int = 3
    I: int = 30
    seeding_kt: int = 46500
    waiting_kt: int = 930
    short_walk_kt: int = 6200
    handshake_rounds: int = 10
    handshake_round_kt: int = 31
    handshake_slots: int | None = None
    handshake_quorum: float = 1.0
    step_kt: int = 31
    diffusion_kt: int = 13950
    burn_in_kt: int = 5000
    consensus_step_kt: int = 31
    consensus_kt: int = 620
    msg_success_prob: float = 1.0
    tx_period_kt: int = 16
    per_step_msg_budget: int | None = None
    asym_link_jitter: float = 0.0
    clock_skew_max: int = 0
    max_neighbors: int | None = None
    agent_radius: float = 16.5
    agent_speed: float = 10.0
    motion_step_kt: int = 15
    run_kt: int = 19
    tumble_mean_kt: float = 93.0
    tumble_std_kt: float = 31.0
    tumble_max_kt: float = 124.0
    mse_guard: bool = True
    fit_min_window: float = 0.75
    divergence_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "shape", ShapeKind.parse(self.shape).value)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        object.__setattr__(self, "placement", Placement.parse(self.placement).value)
        if self.n_agents < 2:
            raise ConfigError("n_agents must be >= 2")
        if not self.sigma > 0 or not self.surface > 0:
            raise ConfigError("sigma and surface must be positive")
        if not 0.0 <= self.msg_success_prob <= 1.0:
            raise ConfigError("msg_success_prob must be in [0, 1]")
        if not 0.0 < self.handshake_quorum <= 1.0:
            raise ConfigError("handshake_quorum must be in (0, 1]")
        for f in fields(self):
            if f.name.endswith("_kt") and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0")
        for name in ("step_kt", "consensus_step_kt", "motion_step_kt", "tx_period_kt"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.per_step_msg_budget is not None and self.per_step_msg_budget < 0:
            raise ConfigError("per_step_msg_budget must be >= 0")
        if self.handshake_rounds < 1 or (self.handshake_slots is not None and self.handshake_slots < 1):
            raise ConfigError("handshake needs at least one round and one slot")
        if self.diffusion_kt < self.step_kt:
            raise ConfigError("diffusion_kt must cover at least one step")
        try:
            self.protocol
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # --- derived ---
    @property
    def T(self) -> int:
        return self.diffusion_kt // self.step_kt

    @property
    def B(self) -> int:
        return math.ceil(self.burn_in_kt / self.step_kt)

    @property
    def C(self) -> int:
        return self.consensus_kt // self.consensus_step_kt

    @property
    def diffusion_repeats(self) -> int:
        """Broadcasts of the same value per diffusion step."""
        return max(1, self.step_kt // self.tx_period_kt)

    @property
    def consensus_repeats(self) -> int:
        return max(1, self.consensus_step_kt // self.tx_period_kt)

    @property
    def protocol(self) -> ProtocolParams:
        return ProtocolParams(c=self.c, tau=self.tau, T=self.T, B=self.B, C=self.C, P=self.P, I=self.I,
                              mse_guard=self.mse_guard, fit_min_window=self.fit_min_window)

    @property
    def arena(self):
        return make_arena(self.shape, self.surface)

    @property
    def alpha(self) -> float:
        return self.n_agents * math.pi * self.sigma ** 2 / self.surface

    @property
    def mobile(self) -> bool:
        return self.placement == Placement.DISPERSION.value

    @property
    def iteration_kt(self) -> int:
        """Waiting, walk, handshake, pre-diffusion, diffusion, consensus and result display."""
        walk = self.short_walk_kt if self.mobile else 0
        return (self.waiting_kt + walk + self.handshake_rounds * self.handshake_round_kt
                + 2 * self.diffusion_kt + 2 * self.consensus_kt)

    @property
    def total_kt(self) -> int:
        return (self.seeding_kt if self.mobile else 0) + self.I * self.iteration_kt

    # --- (de)serialization ---
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, overrides: dict) -> "SimConfig":
        return replace(self, **normalize_keys(overrides))

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        return cls(**normalize_keys(data))

    @classmethod
    def from_file(cls, path, base: "SimConfig | None" = None) -> "SimConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: expected a JSON object")
        profile = data.pop("profile", None)
        start = base or (profile_config(profile) if profile else cls())
        return start.with_overrides(data)


def normalize_keys(data: dict) -> dict:
    """Validate keys and convert ``*_s`` keys into their ``*_kt`` counterparts."""
    valid = {f.name for f in fields(SimConfig)}
    out = {}
    for key, value in data.items():
        name = key
        if key.endswith("_s") and key[:-2] + "_kt" in valid:
            name = key[:-2] + "_kt"
            value = s_to_kt(float(value))
        if name not in valid:
            raise ConfigError(f"unknown config key: {key}")
        out[name] = coerce(name, value)
    return out


def coerce(name: str, value):
    """Convert ``value`` (possibly a command-line string) to the type of field ``name``."""
    kind = _FIELD_TYPES[name]
    if isinstance(value, str) and kind != "str":
        text = value.strip()
        if text.lower() in ("null", "none"):
            value = None
        elif kind == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{name}: expected a boolean, got {value!r}")
            return text.lower() in ("true", "1", "yes")
        else:
            try:
                value = float(text)
            except ValueError:
                raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    if value is None:
        if "None" not in kind:
            raise ConfigError(f"{name} cannot be null")
        return None
    if kind.startswith("int"):
        if isinstance(value, bool) or float(value) != int(float(value)):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(float(value))
    if kind == "float":
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if kind == "bool":
        return bool(value)
    return value


_FIELD_TYPES = {f.name: str(f.type) for f in fields(SimConfig)}

_SIM_LARGE = dict(surface=500000.0, n_agents=300, sigma=85.0, placement="dispersion", tau=1 / 15, I=30,
                  seeding_kt=46500, short_walk_kt=6200, diffusion_kt=13950, burn_in_kt=5000)
_SIM_SMALL = dict(surface=70000.0, n_agents=25, sigma=85.0, tau=1 / 15, I=10, short_walk_kt=6200,
                  diffusion_kt=6200, burn_in_kt=620)

PROFILES = {
    "sim-large-7": dict(_SIM_LARGE),
    "sim-large-2": dict(_SIM_LARGE),
    # half the agents on a quarter of the area; lengths scaled by 1/sqrt(2) keep alpha and body coverage
    "sim-large-7-ci": dict(_SIM_LARGE, n_agents=150, surface=125000.0, sigma=85.0 / math.sqrt(2),
                           agent_radius=16.5 / math.sqrt(2), agent_speed=10.0 / math.sqrt(2)),
    "sim-small-2-dispersion": dict(_SIM_SMALL, placement="dispersion", seeding_kt=46500),
    "sim-small-2-random": dict(_SIM_SMALL, placement="random", seeding_kt=0),
    "sim-small-2-uniform": dict(_SIM_SMALL, placement="uniform", seeding_kt=0),
    "sim-2": dict(surface=70000.0, n_agents=25, sigma=85.0, placement="uniform", tau=1 / 50, I=1,
                  seeding_kt=0, short_walk_kt=0, handshake_rounds=25, handshake_round_kt=248,
                  step_kt=248, diffusion_kt=54250, burn_in_kt=10000,
                  consensus_step_kt=248, consensus_kt=15500),
}

PROFILE_SHAPES = {
    "sim-large-7": [k.value for k in ShapeKind],
    "sim-large-2": ["Disk", "Annulus"],
    "sim-large-7-ci": [k.value for k in ShapeKind],
    "sim-small-2-dispersion": ["Disk", "Annulus"],
    "sim-small-2-random": ["Disk", "Annulus"],
    "sim-small-2-uniform": ["Disk", "Annulus"],
    "sim-2": ["Disk", "Annulus"],
}


def profile_config(name: str, **overrides) -> SimConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile: {name!r} (choose from {sorted(PROFILES)})")
    data = copy.deepcopy(PROFILES[name])
    data.update(overrides)
    return SimConfig.from_dict(data)


