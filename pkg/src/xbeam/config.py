"""Configuration records and their INI persistence.

Every dimension symbol used by the simulator lives in :class:`ScenarioConfig`.
Channel statistics live in :class:`ClusteredChannelParams` and optimisation
settings in :class:`TrainConfig`. The three records are plain frozen
dataclasses so they hash, compare and serialise predictably.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError

CONFIG_ENV_VAR = "XBM_CONFIG"


@dataclass(frozen=True)
class ScenarioConfig:
    """Array geometry, OFDM grid, beam management and noise settings.

    The defaults are a desk-scale setting: an 8x8 hybrid array driven by
    16 digital ports, 64 subcarriers and 4 slots per episode.
    """

    # array
    nx_phys: int = 8
    ny_phys: int = 8
    nx_dig: int = 4
    ny_dig: int = 4
    b_phase: int = 2
    n_rx: int = 4
    # OFDM grid
    K: int = 64
    T: int = 4
    slot_s: float = 1e-3
    carrier_hz: float = 28e9
    bandwidth_hz: float = 100e6
    # SSB
    L_max: int = 16
    ssb_slots: tuple[int, ...] = (0,)
    # CSI-RS
    N_CSI: int = 16
    N_CSI_pool: int = 64
    B_g: int = 4
    N_RB: int = 24
    csirs_slot: int = 1
    # feedback
    S_B: int = 8
    L_csi: int = 4
    O_h: int = 2
    O_v: int = 2
    amp_bits: int | None = 3
    phase_bits: int | None = 3
    ri_threshold_db: float = 13.0
    # noise and users
    noise_var: float = 1e-4
    U_min: int = 4
    U_max: int = 16
    known_fraction: float = 0.8
    user_pool: int = 100_000
    # beamspace grid seen by the network
    n_x0: int = 8
    n_y0: int = 8
    # overhead accounting (resource elements of one SSB period)
    ssb_symbols: int = 4
    ssb_subcarriers: int = 240
    frame_symbols: int = 560
    frame_subcarriers: int = 3240

    def __post_init__(self):
        object.__setattr__(self, "ssb_slots", tuple(int(s) for s in self.ssb_slots))
        self.validate()

    # derived sizes -------------------------------------------------------
    @property
    def n_tx(self) -> int:
        """Number of physical transmit antennas."""
        return self.nx_phys * self.ny_phys

    @property
    def N_P(self) -> int:
        """Number of digital ports."""
        return self.nx_dig * self.ny_dig

    @property
    def n_resources(self) -> int:
        """CSI-RS resources needed to sound the active beams."""
        return math.ceil(self.N_CSI / self.B_g)

    @property
    def max_users_scheduled(self) -> int:
        return self.N_P // self.B_g

    @property
    def input_planes(self) -> int:
        """Channels of the network input tensor (re, im, count, rsrp per SSB beam)."""
        return 4 * self.L_max

    def validate(self) -> None:
        positive = ["nx_phys", "ny_phys", "nx_dig", "ny_dig", "n_rx", "K", "T",
                    "L_max", "N_CSI", "N_CSI_pool", "B_g", "S_B", "O_h",
                    "O_v", "U_min", "U_max", "n_x0", "n_y0", "user_pool"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("N_RB", "ssb_symbols", "ssb_subcarriers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0 (0 leaves it out of the overhead)")
        if self.b_phase < 1:
            raise ConfigError("b_phase must be >= 1")
        if self.L_csi < 1:
            raise ConfigError("L_csi must be >= 1")
        if self.N_P > self.n_tx:
            raise ConfigError("digital ports exceed physical antennas")
        if self.N_CSI > self.N_CSI_pool:
            raise ConfigError("N_CSI must not exceed N_CSI_pool")
        if self.B_g > self.N_P or self.N_P % self.B_g:
            raise ConfigError("B_g must divide N_P")
        if self.K % self.S_B:
            raise ConfigError("S_B must divide K")
        if self.L_csi > self.B_g:
            raise ConfigError("L_csi must not exceed B_g")
        if self.U_min > self.U_max or self.U_max > self.user_pool:
            raise ConfigError("need U_min <= U_max <= user_pool")
        if not 0.0 <= self.known_fraction <= 1.0:
            raise ConfigError("known_fraction must lie in [0, 1]")
        if self.noise_var < 0:
            raise ConfigError("noise_var must be non-negative")
        if not self.ssb_slots or any(not 0 <= s < self.T for s in self.ssb_slots):
            raise ConfigError("ssb_slots must be a nonempty subset of range(T)")
        if not 0 <= self.csirs_slot < self.T:
            raise ConfigError("csirs_slot must lie in range(T)")
        for bits in (self.amp_bits, self.phase_bits):
            if bits is not None and bits < 1:
                raise ConfigError("quantizer bit widths must be >= 1 or None")

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    @classmethod
    def paper(cls) -> "ScenarioConfig":
        """Array and beam sizes matching the full-scale system (slow)."""
        return cls(nx_phys=16, ny_phys=16, nx_dig=8, ny_dig=4, n_x0=16, n_y0=16)


@dataclass(frozen=True)
class ClusteredChannelParams:
    """Statistics of the synthetic clustered channel family.

    A site is a fixed set of user hotspots and scatterers drawn from
    ``site_seed``; user positions and clusters are then drawn per user.
    """

    n_clusters: int = 4
    paths_per_cluster: int = 5
    azimuth_spread: float = math.radians(5.0)
    elevation_spread: float = math.radians(2.0)
    delay_spread: float = 100e-9
    rician_k_db: float = 6.0
    doppler_max_hz: float = 30.0
    rx_spread: float = math.radians(10.0)
    site_seed: int = 2024
    n_hotspots: int = 4
    hotspot_spread: float = math.radians(6.0)
    hotspot_fraction: float = 0.8
    n_site_scatterers: int = 6
    site_scatter_prob: float = 0.6
    local_spread: float = math.radians(15.0)
    sector_az: float = math.radians(60.0)
    el_min: float = math.radians(-30.0)
    el_max: float = math.radians(5.0)

    def __post_init__(self):
        if self.n_clusters < 1 or self.paths_per_cluster < 1:
            raise ConfigError("n_clusters and paths_per_cluster must be >= 1")
        for name in ("azimuth_spread", "elevation_spread", "delay_spread", "rx_spread",
                     "hotspot_spread", "local_spread"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.hotspot_fraction <= 1 or not 0 <= self.site_scatter_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")

    @property
    def n_paths(self) -> int:
        """Path slots per user: one line-of-sight slot plus all cluster paths."""
        return 1 + self.n_clusters * self.paths_per_cluster

    def shifted(self) -> "ClusteredChannelParams":
        """A second environment with different site layout and richer scattering."""
        return replace(
            self,
            n_clusters=self.n_clusters + 2,
            azimuth_spread=2 * self.azimuth_spread,
            elevation_spread=2 * self.elevation_spread,
            delay_spread=1.5 * self.delay_spread,
            rician_k_db=self.rician_k_db - 6.0,
            doppler_max_hz=2 * self.doppler_max_hz,
            site_seed=self.site_seed + 7919,
            n_hotspots=self.n_hotspots + 2,
            n_site_scatterers=self.n_site_scatterers + 4,
        )


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and curriculum settings for the codebook network."""

    batch: int = 32
    steps: int = 2000
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    cycle_steps: int = 500
    tau_start: float = 1.0
    tau_end: float = 0.05
    squared_loss: bool = True
    csi_loss_weight: float = 1.0
    dataset_users: int = 4096
    seed: int = 0
    self_feed_prob: float = 0.5
    finetune_steps: int = 200
    finetune_lr: float = 1e-4
    patience: int = 0

    def __post_init__(self):
        if self.batch < 1 or self.steps < 0:
            raise ConfigError("batch must be >= 1 and steps >= 0")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError("need 0 < lr_min <= lr_max")


_SECTIONS = {"scenario": ScenarioConfig, "channel": ClusteredChannelParams,
             "train": TrainConfig}


def _coerce(f: dataclasses.Field, raw: str) -> Any:
    default = f.default
    text = raw.strip()
    if text.lower() == "none":
        return None
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(",", " ").split())
    if isinstance(default, int) and not isinstance(default, bool):
        return int(text)
    if isinstance(default, float):
        return float(text)
    # optional ints default to an int but may be None
    try:
        return int(text)
    except ValueError:
        return float(text)


def _as_text(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_overrides(cls, pairs: dict[str, str]):
    """Turn ``{field: text}`` into typed keyword arguments for ``cls``."""
    by_name = {f.name: f for f in fields(cls)}
    out = {}
    for key, raw in pairs.items():
        if key not in by_name:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        out[key] = _coerce(by_name[key], raw)
    return out


def load_config(path: str | os.PathLike | None = None):
    """Read ``(ScenarioConfig, ClusteredChannelParams, TrainConfig)`` from an INI file.

    Sections are ``[scenario]``, ``[channel]`` and ``[train]``; missing
    sections or keys keep their defaults. When ``path`` is None the
    ``XBM_CONFIG`` environment variable is consulted, and if that is unset
    too the defaults are returned.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case (K, T, L_max ...)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
    out = []
    for section, cls in _SECTIONS.items():
        pairs = dict(parser[section]) if parser.has_section(section) else {}
        try:
            out.append(cls(**parse_overrides(cls, pairs)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    return tuple(out)


def save_config(path: str | os.PathLike, cfg: ScenarioConfig,
                ch: ClusteredChannelParams | None = None,
                train: TrainConfig | None = None) -> None:
    """Write the records to an INI file readable by :func:`load_config`."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, rec in (("scenario", cfg), ("channel", ch), ("train", train)):
        if rec is None:
            continue
        parser[section] = {f.name: _as_text(getattr(rec, f.name)) for f in fields(rec)}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def to_dict(*records) -> dict:
    return {type(r).__name__: dataclasses.asdict(r) for r in records if r is not None}


def config_hash(*records) -> str:
    """Stable SHA-256 over the canonical JSON of the given records."""
    blob = json.dumps(to_dict(*records), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()
