"""Three-state time-bin alphabet, timing grid and transmitter emission pattern."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np


class ConfigError(ValueError):
    """Raised when a model or protocol parameter violates its invariants."""


class StateSymbol(enum.IntEnum):
    """The three states Alice can prepare. There is deliberately no X1."""

    Z0 = 0
    Z1 = 1
    X0 = 2

    @property
    def basis(self) -> str:
        return "X" if self is StateSymbol.X0 else "Z"


class Intensity(enum.IntEnum):
    SIGNAL = 0
    DECOY = 1


@dataclass(frozen=True)
class IntensityClass:
    label: Intensity
    mean_photon_number: float

    def __post_init__(self):
        if not self.mean_photon_number >= 0 or not math.isfinite(self.mean_photon_number):
            raise ConfigError(f"mean photon number must be finite and >= 0, got {self.mean_photon_number}")


@dataclass(frozen=True)
class TimingGrid:
    """Transmitter clock. Durations are integer picoseconds so tag arithmetic stays exact."""

    state_period_ps: int = 1680
    bin_delay_ps: int = 800
    inter_state_gap_ps: int = 880
    state_rate_hz: float = 595e6
    pattern_length: int = 4095
    frame_rate_hz: float = 145358.0

    def __post_init__(self):
        if self.state_period_ps <= 0 or self.bin_delay_ps <= 0 or self.inter_state_gap_ps < 0:
            raise ConfigError("timing durations must be positive")
        if self.bin_delay_ps >= self.state_period_ps:
            raise ConfigError("bin_delay_ps must be shorter than state_period_ps")
        if self.bin_delay_ps + self.inter_state_gap_ps != self.state_period_ps:
            raise ConfigError("bin_delay_ps + inter_state_gap_ps must equal state_period_ps")
        if self.pattern_length < 1:
            raise ConfigError("pattern_length must be >= 1")
        rel = abs(self.pattern_length * self.frame_rate_hz - self.state_rate_hz) / self.state_rate_hz
        if rel > 1e-3:
            raise ConfigError(
                f"pattern_length * frame_rate_hz differs from state_rate_hz by {rel:.2%} (> 0.1%)"
            )

    @property
    def early_center_ps(self) -> int:
        return self.inter_state_gap_ps // 2

    @property
    def late_center_ps(self) -> int:
        return self.early_center_ps + self.bin_delay_ps

    @property
    def frame_period_ps(self) -> int:
        return self.pattern_length * self.state_period_ps


@dataclass(frozen=True)
class ProtocolConfig:
    """Transmitter and protocol parameters.

    ``p_x_alice`` and ``p_x_bob`` are derived from the Z probabilities and never
    stored. ``extinction_error`` is the probability that a Z-basis pulse leaks
    into the wrong time bin at the encoder. ``mu_signal``/``mu_decoy`` defaults
    come from the shipped calibration (see :mod:`tbqkd.profiles`).
    """

    p_z_alice: float = 0.5
    p_z_bob: float = 0.5
    p_mu1: float = 0.7
    mu_signal: float = 0.48
    mu_decoy: float = 0.12
    timing: TimingGrid = field(default_factory=TimingGrid)
    n_z_block: int = 10_000_000
    eps_sec: float = 1e-12
    eps_corr: float = 1e-12
    f_ec: float = 1.16
    extinction_error: float = 5e-3
    wavelength_nm: float = 1545.32

    def __post_init__(self):
        for name in ("p_z_alice", "p_z_bob", "p_mu1"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie strictly in (0, 1), got {value}")
        if not 0.0 < self.mu_decoy < self.mu_signal:
            raise ConfigError(
                f"intensities must satisfy 0 < mu_decoy < mu_signal, got {self.mu_decoy}, {self.mu_signal}"
            )
        for name in ("eps_sec", "eps_corr"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if self.n_z_block < 1:
            raise ConfigError("n_z_block must be >= 1")
        if not 0.0 <= self.extinction_error < 0.5:
            raise ConfigError(f"extinction_error must lie in [0, 0.5), got {self.extinction_error}")
        if not self.f_ec >= 1.0:
            raise ConfigError(f"f_ec must be >= 1, got {self.f_ec}")

    @property
    def p_x_alice(self) -> float:
        return 1.0 - self.p_z_alice

    @property
    def p_x_bob(self) -> float:
        return 1.0 - self.p_z_bob

    @property
    def intensities(self) -> tuple[IntensityClass, IntensityClass]:
        return (
            IntensityClass(Intensity.SIGNAL, self.mu_signal),
            IntensityClass(Intensity.DECOY, self.mu_decoy),
        )

    @property
    def mus(self) -> tuple[float, float]:
        return (self.mu_signal, self.mu_decoy)

    @property
    def class_probs(self) -> tuple[float, float]:
        return (self.p_mu1, 1.0 - self.p_mu1)

    def with_(self, **changes) -> "ProtocolConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class EmissionPattern:
    """One frame of the transmitter's repeating state sequence.

    ``symbols`` and ``intensities`` are int8 arrays indexed by pattern position,
    holding :class:`StateSymbol` and :class:`Intensity` values respectively.
    """

    symbols: np.ndarray
    intensities: np.ndarray
    seed: int

    def __post_init__(self):
        if self.symbols.shape != self.intensities.shape or self.symbols.ndim != 1:
            raise ConfigError("symbols and intensities must be 1-D arrays of equal length")
        self.symbols.setflags(write=False)
        self.intensities.setflags(write=False)

    def __len__(self) -> int:
        return len(self.symbols)

    def __getitem__(self, i: int) -> tuple[StateSymbol, Intensity]:
        return StateSymbol(int(self.symbols[i])), Intensity(int(self.intensities[i]))

    @property
    def entries(self) -> list[tuple[StateSymbol, Intensity]]:
        return [self[i] for i in range(len(self))]

    def cell_counts(self) -> np.ndarray:
        """3x2 table of positions per (symbol, intensity)."""
        table = np.zeros((3, 2), dtype=np.int64)
        np.add.at(table, (self.symbols.astype(np.intp), self.intensities.astype(np.intp)), 1)
        return table


def generate_pattern(config: ProtocolConfig, seed: int) -> EmissionPattern:
    """Draw the frame pattern: symbol and intensity independently per position."""
    if not isinstance(config, ProtocolConfig):
        raise ConfigError("config must be a ProtocolConfig")
    rng = np.random.default_rng(seed)
    n = config.timing.pattern_length
    pz = config.p_z_alice
    symbols = rng.choice(3, size=n, p=[pz / 2, pz / 2, 1.0 - pz]).astype(np.int8)
    intensities = np.where(rng.random(n) < config.p_mu1, Intensity.SIGNAL, Intensity.DECOY).astype(np.int8)
    return EmissionPattern(symbols=symbols, intensities=intensities, seed=int(seed))


@dataclass(frozen=True)
class BinEmission:
    early_mean: float
    late_mean: float
    relative_phase: float | None


def state_waveform(symbol: StateSymbol, intensity: IntensityClass | float) -> BinEmission:
    """Mean photon number in each time bin for a prepared state."""
    mu = intensity.mean_photon_number if isinstance(intensity, IntensityClass) else float(intensity)
    symbol = StateSymbol(symbol)
    if symbol is StateSymbol.Z0:
        return BinEmission(mu, 0.0, None)
    if symbol is StateSymbol.Z1:
        return BinEmission(0.0, mu, None)
    return BinEmission(mu / 2, mu / 2, 0.0)


def _tau(probs, mus, n: int) -> float:
    if n < 0:
        raise ValueError("photon number must be >= 0")
    log_fact = math.lgamma(n + 1)
    total = 0.0
    for p, mu in zip(probs, mus):
        if mu == 0.0:
            total += p if n == 0 else 0.0
        else:
            total += p * math.exp(-mu + n * math.log(mu) - log_fact)
    return total


def tau_n(config: ProtocolConfig, n: int) -> float:
    """Probability that a state carries exactly ``n`` photons, averaged over intensity classes."""
    return _tau(config.class_probs, config.mus, n)
