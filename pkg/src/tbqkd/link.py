"""Channel, receiver and SNSPD models.

Two engines share one per-gate click model:

* :func:`expected_counts` evaluates expectations analytically;
* :func:`simulate_block` samples integer counts by Monte Carlo, and
  :func:`emit_timetags` turns the very same samples into a detector time-tag
  stream, so that count mode and tag mode agree exactly for a given seed.

Detection rules per state (one threshold detector per measurement outcome):

* Z detector, two gates (early/late). The first click within a state wins; a
  late-gate click after an early-gate click is lost to detector dead time.
* X detectors, one gate each on the central interference slot. ``X`` is the
  constructive port, ``X_ERR`` the destructive one. A state is an X detection
  if either port clicks and an X error if ``X_ERR`` clicks (double clicks count
  as errors).
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .protocol import ConfigError, EmissionPattern, Intensity, ProtocolConfig, StateSymbol, generate_pattern
from .seeding import derive_seed

DEFAULT_CHANNELS = {"Z": 1, "X": 2, "X_ERR": 3}

# outcome columns of the per-state sampling tables
Z_EARLY, Z_LATE, Z_NONE = 0, 1, 2
X_C, X_D, X_BOTH, X_NONE = 0, 1, 2, 3


class Variant(str, enum.Enum):
    PIC = "pic"
    FIBER_PLL = "fiber"


class Basis(str, enum.Enum):
    Z = "Z"
    X = "X"


@dataclass(frozen=True)
class ChannelModel:
    attenuation_db: float = 0.0

    def __post_init__(self):
        if not self.attenuation_db >= 0:
            raise ConfigError(f"attenuation_db must be >= 0, got {self.attenuation_db}")


@dataclass(frozen=True)
class DriftModel:
    """Interferometer phase stability.

    The fiber receiver uses the first three fields (random-walk phase error and
    periodic PLL recalibration); the PIC uses only ``residual_visibility_jitter``.
    ``recalibration_interval_s=None`` disables recalibration.
    """

    drift_std_rad_per_hour: float = 0.0
    recalibration_interval_s: float | None = None
    recalibration_dead_time_s: float = 0.0
    residual_visibility_jitter: float = 0.0

    def __post_init__(self):
        if self.drift_std_rad_per_hour < 0 or self.recalibration_dead_time_s < 0:
            raise ConfigError("drift parameters must be >= 0")
        if self.recalibration_interval_s is not None and self.recalibration_interval_s <= 0:
            raise ConfigError("recalibration_interval_s must be > 0 or None")
        if self.residual_visibility_jitter < 0:
            raise ConfigError("residual_visibility_jitter must be >= 0")


@dataclass(frozen=True)
class ReceiverModel:
    variant: Variant = Variant.PIC
    z_path_loss_db: float = 0.0
    imzi_insertion_loss_db: float = 2.75
    visibility: float = 0.96
    pll_noise_rate_hz: float = 0.0
    drift: DriftModel = field(default_factory=DriftModel)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not 0.0 <= self.visibility <= 1.0:
            raise ConfigError(f"visibility must lie in [0, 1], got {self.visibility}")
        if self.z_path_loss_db < 0 or self.imzi_insertion_loss_db < 0:
            raise ConfigError("receiver losses must be >= 0 dB")
        if self.pll_noise_rate_hz < 0:
            raise ConfigError("pll_noise_rate_hz must be >= 0")
        if self.variant is Variant.PIC and self.pll_noise_rate_hz != 0:
            raise ConfigError("the PIC receiver has no PLL; pll_noise_rate_hz must be 0")

    def with_(self, **changes) -> "ReceiverModel":
        return replace(self, **changes)


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.93
    dark_rate_hz: float = 400.0
    jitter_fwhm_ps: float = 40.0
    gate_width_ps: int = 400

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise ConfigError(f"efficiency must lie in (0, 1], got {self.efficiency}")
        if self.dark_rate_hz < 0 or self.jitter_fwhm_ps < 0:
            raise ConfigError("dark_rate_hz and jitter_fwhm_ps must be >= 0")
        if self.gate_width_ps <= 0:
            raise ConfigError("gate_width_ps must be > 0")

    def check_timing(self, config: ProtocolConfig) -> None:
        if self.gate_width_ps > config.timing.bin_delay_ps:
            raise ConfigError(
                f"gate_width_ps={self.gate_width_ps} exceeds bin delay {config.timing.bin_delay_ps} ps"
            )

    @property
    def dark_prob_per_gate(self) -> float:
        return self.dark_rate_hz * self.gate_width_ps * 1e-12

    @property
    def jitter_sigma_ps(self) -> float:
        return self.jitter_fwhm_ps / (2.0 * math.sqrt(2.0 * math.log(2.0)))

    @property
    def gate_acceptance(self) -> float:
        """Probability that a jittered signal photon lands inside its gate."""
        sigma = self.jitter_sigma_ps
        if sigma == 0:
            return 1.0
        return math.erf(self.gate_width_ps / 2.0 / (sigma * math.sqrt(2.0)))


@dataclass(frozen=True)
class LinkModel:
    """Channel plus receiver plus detector; the unit swept by the key-rate tools."""

    channel: ChannelModel = field(default_factory=ChannelModel)
    receiver: ReceiverModel = field(default_factory=ReceiverModel)
    detector: DetectorModel = field(default_factory=DetectorModel)

    def with_attenuation(self, attenuation_db: float) -> "LinkModel":
        return replace(self, channel=ChannelModel(attenuation_db))

    def with_receiver(self, **changes) -> "LinkModel":
        return replace(self, receiver=replace(self.receiver, **changes))

    def with_detector(self, **changes) -> "LinkModel":
        return replace(self, detector=replace(self.detector, **changes))


@dataclass(frozen=True)
class ClassCounts:
    """Counts for one intensity class. Values are floats in expectation mode."""

    n_z: float = 0
    m_z: float = 0
    n_x: float = 0
    m_x: float = 0
    sent_z: float = 0
    sent_x: float = 0

    @property
    def sent(self) -> float:
        return self.sent_z + self.sent_x

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(*(a + b for a, b in zip(astuple_cc(self), astuple_cc(other))))

    def scaled(self, factor: float) -> "ClassCounts":
        return ClassCounts(*(a * factor for a in astuple_cc(self)))


def astuple_cc(c: ClassCounts) -> tuple:
    return (c.n_z, c.m_z, c.n_x, c.m_x, c.sent_z, c.sent_x)


@dataclass(frozen=True)
class ObservedCounts:
    """Per-basis, per-intensity detections and errors for one block."""

    signal: ClassCounts
    decoy: ClassCounts
    duration_s: float

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError(f"duration_s must be > 0, got {self.duration_s}")
        for c in (self.signal, self.decoy):
            for n, m in ((c.n_z, c.m_z), (c.n_x, c.m_x)):
                if m < 0 or n < 0 or m > n * (1 + 1e-12):
                    raise ValueError(f"count invariant 0 <= m <= n violated: m={m}, n={n}")

    @property
    def classes(self) -> tuple[ClassCounts, ClassCounts]:
        return (self.signal, self.decoy)

    @property
    def n_z(self) -> float:
        return self.signal.n_z + self.decoy.n_z

    @property
    def m_z(self) -> float:
        return self.signal.m_z + self.decoy.m_z

    @property
    def n_x(self) -> float:
        return self.signal.n_x + self.decoy.n_x

    @property
    def m_x(self) -> float:
        return self.signal.m_x + self.decoy.m_x

    @property
    def qber_z(self) -> float:
        return self.m_z / self.n_z if self.n_z > 0 else 0.0

    @property
    def qber_x(self) -> float:
        return self.m_x / self.n_x if self.n_x > 0 else 0.0

    def __add__(self, other: "ObservedCounts") -> "ObservedCounts":
        return ObservedCounts(self.signal + other.signal, self.decoy + other.decoy,
                              self.duration_s + other.duration_s)

    def scaled(self, factor: float) -> "ObservedCounts":
        return ObservedCounts(self.signal.scaled(factor), self.decoy.scaled(factor),
                              self.duration_s * factor)

    def to_dict(self) -> dict:
        return {"signal": asdict(self.signal), "decoy": asdict(self.decoy), "duration_s": self.duration_s}

    @classmethod
    def from_dict(cls, data: dict) -> "ObservedCounts":
        return cls(ClassCounts(**data["signal"]), ClassCounts(**data["decoy"]), float(data["duration_s"]))


def total_transmittance(channel: ChannelModel, receiver: ReceiverModel, detector: DetectorModel,
                        path: Basis | str, p_z_bob: float = 0.5) -> float:
    """End-to-end detection probability of a single photon on the given path.

    The X path includes the interferometer insertion loss and the factor 1/2 for
    post-selecting the central interference slot.
    """
    path = Basis(path)
    if path is Basis.Z:
        loss_db = channel.attenuation_db + receiver.z_path_loss_db
        split = p_z_bob
    else:
        loss_db = channel.attenuation_db + receiver.imzi_insertion_loss_db
        split = (1.0 - p_z_bob) * 0.5
    return 10.0 ** (-loss_db / 10.0) * split * detector.efficiency


def click_probability(mean_photon, eta, p_dark_gate):
    """Threshold-detector click probability for a coherent pulse in one gate."""
    return 1.0 - (1.0 - p_dark_gate) * np.exp(-np.multiply(mean_photon, eta))


def qber_x_from_visibility(vis):
    if np.any(np.asarray(vis) < 0) or np.any(np.asarray(vis) > 1):
        raise ValueError("visibility must lie in [0, 1]")
    return (1.0 - np.asarray(vis, dtype=float)) / 2.0 if np.ndim(vis) else (1.0 - float(vis)) / 2.0


@dataclass(frozen=True)
class _GateModel:
    eta_z: float
    eta_x: float
    p_dark: float
    p_bg_x: float


def _gate_model(config: ProtocolConfig, channel, receiver, detector) -> _GateModel:
    detector.check_timing(config)
    acc = detector.gate_acceptance
    eta_z = total_transmittance(channel, receiver, detector, Basis.Z, config.p_z_bob) * acc
    eta_x = total_transmittance(channel, receiver, detector, Basis.X, config.p_z_bob) * acc
    p_dark = detector.dark_prob_per_gate
    p_pll = receiver.pll_noise_rate_hz * detector.gate_width_ps * 1e-12
    p_bg_x = 1.0 - (1.0 - p_dark) * (1.0 - p_pll)
    return _GateModel(eta_z, eta_x, p_dark, p_bg_x)


def _outcome_tables(config: ProtocolConfig, gm: _GateModel, visibility: float):
    """Per (symbol, intensity) outcome probabilities.

    Returns ``z`` of shape (3, 2, 3) over (early, late, none) and ``x`` of shape
    (3, 2, 4) over (constructive only, destructive only, both, none).
    """
    e = config.extinction_error
    z = np.zeros((3, 2, 3))
    x = np.zeros((3, 2, 4))
    for k, mu in enumerate(config.mus):
        for s in StateSymbol:
            if s is StateSymbol.Z0:
                early, late = mu * (1 - e), mu * e
            elif s is StateSymbol.Z1:
                early, late = mu * e, mu * (1 - e)
            else:
                early = late = mu / 2
            p_e = click_probability(early, gm.eta_z, gm.p_dark)
            p_l = click_probability(late, gm.eta_z, gm.p_dark)
            z[s, k] = (p_e, (1 - p_e) * p_l, (1 - p_e) * (1 - p_l))

            central = mu * gm.eta_x
            if s is StateSymbol.X0:
                c_mean, d_mean = central * (1 + visibility) / 2, central * (1 - visibility) / 2
            else:
                c_mean = d_mean = central / 2
            p_c = click_probability(c_mean, 1.0, gm.p_bg_x)
            p_d = click_probability(d_mean, 1.0, gm.p_bg_x)
            x[s, k] = (p_c * (1 - p_d), p_d * (1 - p_c), p_c * p_d, (1 - p_c) * (1 - p_d))
    return z, x


def _fold_counts(z_out: np.ndarray, x_out: np.ndarray, states: np.ndarray, duration_s: float) -> ObservedCounts:
    """Reduce (symbol, intensity, outcome) tables to ObservedCounts."""
    classes = []
    for k in (Intensity.SIGNAL, Intensity.DECOY):
        z0, z1, x0 = z_out[StateSymbol.Z0, k], z_out[StateSymbol.Z1, k], x_out[StateSymbol.X0, k]
        classes.append(ClassCounts(
            n_z=z0[Z_EARLY] + z0[Z_LATE] + z1[Z_EARLY] + z1[Z_LATE],
            m_z=z0[Z_LATE] + z1[Z_EARLY],
            n_x=x0[X_C] + x0[X_D] + x0[X_BOTH],
            m_x=x0[X_D] + x0[X_BOTH],
            sent_z=states[StateSymbol.Z0, k] + states[StateSymbol.Z1, k],
            sent_x=states[StateSymbol.X0, k],
        ))
    if z_out.dtype.kind in "iu":
        classes = [ClassCounts(*(int(v) for v in astuple_cc(c))) for c in classes]
    else:
        classes = [ClassCounts(*(float(v) for v in astuple_cc(c))) for c in classes]
    return ObservedCounts(classes[0], classes[1], duration_s)


def _positions_in_range(s0: int, s1: int, length: int) -> np.ndarray:
    """Number of global state indices in [s0, s1) at each pattern position."""
    n = s1 - s0
    base = np.full(length, n // length, dtype=np.int64)
    rem = n % length
    first = s0 % length
    idx = (first + np.arange(rem)) % length
    base[idx] += 1
    return base


def expected_counts(config: ProtocolConfig, channel: ChannelModel, receiver: ReceiverModel,
                    detector: DetectorModel, duration_s: float, *,
                    pattern: EmissionPattern | None = None) -> ObservedCounts:
    """Analytic expectation of a block's counts.

    Without ``pattern`` the states are distributed by the configured
    probabilities. With ``pattern`` the expectation is conditioned on the actual
    repeating frame, which is what :func:`simulate_block` samples from.
    """
    gm = _gate_model(config, channel, receiver, detector)
    z, x = _outcome_tables(config, gm, receiver.visibility)
    if pattern is None:
        gates = config.timing.state_rate_hz * duration_s
        sym_p = np.array([config.p_z_alice / 2, config.p_z_alice / 2, config.p_x_alice])
        states = gates * np.outer(sym_p, config.class_probs)
    else:
        n_states = int(round(duration_s * config.timing.state_rate_hz))
        per_pos = _positions_in_range(0, n_states, len(pattern)).astype(float)
        states = np.zeros((3, 2))
        np.add.at(states, (pattern.symbols.astype(np.intp), pattern.intensities.astype(np.intp)), per_pos)
    return _fold_counts(states[:, :, None] * z, states[:, :, None] * x, states, duration_s)


@dataclass
class _Segment:
    start: int
    stop: int
    per_pos: np.ndarray
    z_out: np.ndarray  # (L, 3)
    x_out: np.ndarray  # (L, 4)
    z_probs: np.ndarray
    x_probs: np.ndarray


def _sample_segments(config, channel, receiver, detector, pattern, n_states, rng, visibility_segments):
    gm = _gate_model(config, channel, receiver, detector)
    L = len(pattern)
    sym = pattern.symbols.astype(np.intp)
    inten = pattern.intensities.astype(np.intp)
    if visibility_segments is None:
        visibility_segments = [(n_states, receiver.visibility)]
    segments = []
    start = 0
    for n_seg, vis in visibility_segments:
        stop = min(n_states, start + int(n_seg))
        if stop <= start:
            continue
        z_tab, x_tab = _outcome_tables(config, gm, vis)
        zp, xp = z_tab[sym, inten], x_tab[sym, inten]
        per_pos = _positions_in_range(start, stop, L)
        z_out = rng.multinomial(per_pos, zp)
        x_out = rng.multinomial(per_pos, xp)
        segments.append(_Segment(start, stop, per_pos, z_out, x_out, zp, xp))
        start = stop
    if start != n_states:
        raise ValueError("visibility segments must cover all n_states")
    return gm, segments


def _segments_to_counts(pattern, segments, duration_s) -> ObservedCounts:
    z_cells = np.zeros((3, 2, 3), dtype=np.int64)
    x_cells = np.zeros((3, 2, 4), dtype=np.int64)
    states = np.zeros((3, 2), dtype=np.int64)
    idx = (pattern.symbols.astype(np.intp), pattern.intensities.astype(np.intp))
    for seg in segments:
        np.add.at(z_cells, idx, seg.z_out)
        np.add.at(x_cells, idx, seg.x_out)
        np.add.at(states, idx, seg.per_pos)
    return _fold_counts(z_cells, x_cells, states, duration_s)


def block_duration(config: ProtocolConfig, n_states: int) -> float:
    return n_states / config.timing.state_rate_hz


def simulate_block(config: ProtocolConfig, channel: ChannelModel, receiver: ReceiverModel,
                   detector: DetectorModel, seed: int, n_states: int, *,
                   pattern: EmissionPattern | None = None) -> ObservedCounts:
    """Monte Carlo block of ``n_states`` emissions of the repeating frame pattern.

    The pattern is drawn from ``derive_seed(seed, "pattern")`` unless given and
    clicks from ``derive_seed(seed, "clicks")``.
    """
    if n_states < 1:
        raise ValueError("n_states must be >= 1")
    if pattern is None:
        pattern = generate_pattern(config, derive_seed(seed, "pattern"))
    rng = np.random.default_rng(derive_seed(seed, "clicks"))
    _, segments = _sample_segments(config, channel, receiver, detector, pattern, n_states, rng, None)
    return _segments_to_counts(pattern, segments, block_duration(config, n_states))


@dataclass(frozen=True)
class TagStream:
    """In-memory detector stream: parallel arrays sorted by timestamp."""

    channels: np.ndarray  # uint8
    timestamps_ps: np.ndarray  # uint64
    span_ps: int
    counts: ObservedCounts
    pattern: EmissionPattern

    def __len__(self) -> int:
        return len(self.timestamps_ps)


def _distinct_frames(rng, n_per_pos: np.ndarray, k_per_pos: np.ndarray):
    """Draw ``k`` distinct frame indices below ``n`` for every pattern position.

    Returns ``(position, rank within position, frame)`` arrays grouped by
    position. Collisions are redrawn, so the result is a uniform sample
    without replacement.
    """
    k_per_pos = np.asarray(k_per_pos, dtype=np.int64)
    pos = np.repeat(np.arange(len(k_per_pos)), k_per_pos)
    starts = np.cumsum(k_per_pos) - k_per_pos
    rank = np.arange(len(pos)) - starts[pos]
    n = np.asarray(n_per_pos, dtype=np.int64)[pos]
    frames = np.floor(rng.random(len(pos)) * n).astype(np.int64)
    # dense groups are cheaper to permute than to resample
    dense = np.flatnonzero(2 * k_per_pos > np.asarray(n_per_pos))
    for i in dense:
        sel = pos == i
        frames[sel] = rng.permutation(int(n_per_pos[i]))[: int(k_per_pos[i])]
    redo = np.ones(len(pos), dtype=bool)
    while redo.any():
        key = pos * (int(n.max()) + 1 if len(n) else 1) + frames
        order = np.argsort(key, kind="stable")
        dup = np.zeros(len(pos), dtype=bool)
        dup[order[1:]] = key[order[1:]] == key[order[:-1]]
        redo = dup
        if redo.any():
            frames[redo] = np.floor(rng.random(int(redo.sum())) * n[redo]).astype(np.int64)
    return pos, rank, frames


def _in_gate_offsets(rng, n, center, half, sigma, dark_frac):
    """Arrival offsets (ps, relative to state start) for n in-gate clicks."""
    lo, hi = center - half, center + half
    out = np.floor(rng.uniform(lo, hi, size=n))
    signal = rng.random(n) >= dark_frac
    if sigma > 0 and signal.any():
        jit = rng.normal(0.0, sigma, size=int(signal.sum()))
        bad = np.abs(jit) >= half
        while bad.any():
            jit[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
            bad = np.abs(jit) >= half
        out[signal] = np.rint(center + jit)
    elif signal.any():
        out[signal] = center
    return np.clip(out, lo, hi - 1).astype(np.int64)


def _out_of_gate_offsets(rng, n, period, gates):
    """Uniform offsets within [0, period) avoiding the given [lo, hi) gates."""
    edges = [0]
    for lo, hi in sorted(gates):
        edges += [lo, hi]
    edges.append(period)
    free = [(edges[i], edges[i + 1]) for i in range(0, len(edges), 2) if edges[i + 1] > edges[i]]
    widths = np.array([b - a for a, b in free], dtype=float)
    which = rng.choice(len(free), size=n, p=widths / widths.sum())
    starts = np.array([a for a, _ in free])[which]
    return starts + np.floor(rng.random(n) * widths[which]).astype(np.int64)


def emit_timetags(config: ProtocolConfig, channel: ChannelModel, receiver: ReceiverModel,
                  detector: DetectorModel, seed: int, n_states: int, *, offset_ps: int = 0,
                  channel_map: dict[str, int] | None = None,
                  visibility_segments: list[tuple[int, float]] | None = None,
                  pattern: EmissionPattern | None = None) -> TagStream:
    """Simulate a block and render it as a time-tag stream.

    Click counts come from exactly the same random draws as
    :func:`simulate_block`; timing within a gate and out-of-gate background use
    the separate ``"tags"`` sub-seed. ``visibility_segments`` is an optional list
    of ``(n_states, visibility)`` pieces used to inject interferometer drift.
    """
    if n_states < 1:
        raise ValueError("n_states must be >= 1")
    channel_map = dict(DEFAULT_CHANNELS if channel_map is None else channel_map)
    if pattern is None:
        pattern = generate_pattern(config, derive_seed(seed, "pattern"))
    rng = np.random.default_rng(derive_seed(seed, "clicks"))
    gm, segments = _sample_segments(config, channel, receiver, detector, pattern, n_states, rng,
                                    visibility_segments)
    counts = _segments_to_counts(pattern, segments, block_duration(config, n_states))

    trng = np.random.default_rng(derive_seed(seed, "tags"))
    timing = config.timing
    L, period = len(pattern), timing.state_period_ps
    half = detector.gate_width_ps // 2
    sigma = detector.jitter_sigma_ps
    e_c, l_c = timing.early_center_ps, timing.late_center_ps
    pd_z, pb_x = gm.p_dark, gm.p_bg_x

    state_chunks, offset_chunks, chan_chunks = [], [], []

    def add(states, offsets, ch):
        state_chunks.append(states)
        offset_chunks.append(offsets)
        chan_chunks.append(np.full(len(states), ch, dtype=np.uint8))

    for seg in segments:
        first = seg.start + (np.arange(L) - seg.start) % L
        tiny = 1e-300

        # Z detector: per position, k_early + k_late distinct frames; early ones first
        k_e, k_l = seg.z_out[:, Z_EARLY], seg.z_out[:, Z_LATE]
        pos, rank, frames = _distinct_frames(trng, seg.per_pos, k_e + k_l)
        states = first[pos] + frames * L
        early = rank < k_e[pos]
        p_e = seg.z_probs[:, Z_EARLY]
        p_l = seg.z_probs[:, Z_LATE] / np.maximum(1 - p_e, tiny)
        add(states[early], _in_gate_offsets(trng, int(early.sum()), e_c, half, sigma,
                                            np.minimum(1.0, pd_z / np.maximum(p_e, tiny))[pos[early]]),
            channel_map["Z"])
        add(states[~early], _in_gate_offsets(trng, int((~early).sum()), l_c, half, sigma,
                                             np.minimum(1.0, pd_z / np.maximum(p_l, tiny))[pos[~early]]),
            channel_map["Z"])

        # X detectors: constructive only, destructive only, both
        k_c, k_d, k_b = seg.x_out[:, X_C], seg.x_out[:, X_D], seg.x_out[:, X_BOTH]
        pos, rank, frames = _distinct_frames(trng, seg.per_pos, k_c + k_d + k_b)
        states = first[pos] + frames * L
        c_fire = (rank < k_c[pos]) | (rank >= (k_c + k_d)[pos])
        d_fire = rank >= k_c[pos]
        p_c = seg.x_probs[:, X_C] + seg.x_probs[:, X_BOTH]
        p_d = seg.x_probs[:, X_D] + seg.x_probs[:, X_BOTH]
        add(states[c_fire], _in_gate_offsets(trng, int(c_fire.sum()), l_c, half, sigma,
                                             np.minimum(1.0, pb_x / np.maximum(p_c, tiny))[pos[c_fire]]),
            channel_map["X"])
        add(states[d_fire], _in_gate_offsets(trng, int(d_fire.sum()), l_c, half, sigma,
                                             np.minimum(1.0, pb_x / np.maximum(p_d, tiny))[pos[d_fire]]),
            channel_map["X_ERR"])

    # background outside the acceptance gates, rejected downstream
    z_gates = [(e_c - half, e_c + half), (l_c - half, l_c + half)]
    x_gates = [(l_c - half, l_c + half)]
    x_rate = detector.dark_rate_hz + receiver.pll_noise_rate_hz
    for role, rate, gates in (("Z", detector.dark_rate_hz, z_gates), ("X", x_rate, x_gates),
                              ("X_ERR", x_rate, x_gates)):
        free_ps = period - sum(hi - lo for lo, hi in gates)
        n_bg = trng.poisson(rate * n_states * free_ps * 1e-12)
        add(trng.integers(0, n_states, size=n_bg), _out_of_gate_offsets(trng, n_bg, period, gates),
            channel_map[role])

    states = np.concatenate(state_chunks) if state_chunks else np.zeros(0, dtype=np.int64)
    offsets = np.concatenate(offset_chunks) if offset_chunks else np.zeros(0, dtype=np.int64)
    chans = np.concatenate(chan_chunks) if chan_chunks else np.zeros(0, dtype=np.uint8)
    times = (int(offset_ps) + states.astype(np.int64) * period + offsets).astype(np.uint64)
    order = np.argsort(times, kind="stable")
    return TagStream(chans[order], times[order], int(offset_ps) + n_states * period, counts, pattern)


@dataclass(frozen=True)
class TaggedTruth:
    """Photon-number-resolved event totals known only to the simulator."""

    s_z0: int
    s_z1: int
    s_x0: int
    s_x1: int
    v_x1: int


def simulate_tagged_block(config: ProtocolConfig, channel: ChannelModel, receiver: ReceiverModel,
                          detector: DetectorModel, seed: int, n_states: int,
                          max_photons: int = 25) -> tuple[ObservedCounts, TaggedTruth]:
    """Monte Carlo with per-state photon numbers exposed.

    Symbols and intensities are drawn independently per state (not from a
    repeating frame) so that the decoy assumptions hold exactly. Photon numbers
    above ``max_photons`` are folded into the last bin.
    """
    from scipy.stats import poisson

    gm = _gate_model(config, channel, receiver, detector)
    rng = np.random.default_rng(derive_seed(seed, "tagged"))
    sym_p = np.array([config.p_z_alice / 2, config.p_z_alice / 2, config.p_x_alice])
    cell_p = np.outer(sym_p, config.class_probs)
    states = rng.multinomial(n_states, cell_p.ravel()).reshape(3, 2)

    ns = np.arange(max_photons + 1)
    e, v = config.extinction_error, receiver.visibility
    z_out = np.zeros((3, 2, 3), dtype=np.int64)
    x_out = np.zeros((3, 2, 4), dtype=np.int64)
    truth = dict(s_z0=0, s_z1=0, s_x0=0, s_x1=0, v_x1=0)
    for k, mu in enumerate(config.mus):
        pmf = poisson.pmf(ns, mu)
        pmf[-1] += poisson.sf(max_photons, mu)
        for s in StateSymbol:
            photons = rng.multinomial(states[s, k], pmf)
            if s is StateSymbol.X0:
                qc, qd = gm.eta_x * (1 + v) / 2, gm.eta_x * (1 - v) / 2
                no_c = (1 - gm.p_bg_x) * (1 - qc) ** ns
                no_d = (1 - gm.p_bg_x) * (1 - qd) ** ns
                none = (1 - gm.p_bg_x) ** 2 * (1 - qc - qd) ** ns
                probs = np.stack([no_d - none, no_c - none, 1 - no_c - no_d + none, none], axis=1)
                out = rng.multinomial(photons, np.clip(probs, 0, None))
                x_out[s, k] = out.sum(0)
                det = out[:, :X_NONE].sum(1)
                err = out[:, X_D] + out[:, X_BOTH]
                truth["s_x0"] += int(det[0])
                truth["s_x1"] += int(det[1])
                truth["v_x1"] += int(err[1])
            else:
                p_first = gm.eta_z * ((1 - e) if s is StateSymbol.Z0 else e)
                no_first = (1 - gm.p_dark) * (1 - p_first) ** ns
                none = (1 - gm.p_dark) ** 2 * (1 - gm.eta_z) ** ns
                probs = np.stack([1 - no_first, no_first - none, none], axis=1)
                out = rng.multinomial(photons, np.clip(probs, 0, None))
                z_out[s, k] = out.sum(0)
                det = out[:, Z_EARLY] + out[:, Z_LATE]
                truth["s_z0"] += int(det[0])
                truth["s_z1"] += int(det[1])
    counts = _fold_counts(z_out, x_out, states, block_duration(config, n_states))
    return counts, TaggedTruth(**truth)


@dataclass(frozen=True)
class DriftSeries:
    times_s: np.ndarray
    visibility: np.ndarray
    qber_x: np.ndarray
    recalibrations: int
    sample_interval_s: float

    @property
    def gaps(self) -> int:
        """Number of spacings longer than the nominal sample interval."""
        if len(self.times_s) < 2:
            return 0
        return int(np.sum(np.diff(self.times_s) > self.sample_interval_s * (1 + 1e-9)))


def drift_series(receiver: ReceiverModel, duration_s: float, sample_interval_s: float, seed: int) -> DriftSeries:
    """Interferometer visibility and QBER_X sampled over a long acquisition.

    PIC: stationary, Gaussian jitter of ``residual_visibility_jitter`` around the
    nominal visibility. Fiber/PLL: the residual phase error performs a random
    walk and scales visibility by ``|cos(phase)|``; every
    ``recalibration_interval_s`` the PLL re-locks, resetting the phase and
    producing no samples for ``recalibration_dead_time_s``.
    """
    if not duration_s > 0 or not sample_interval_s > 0:
        raise ValueError("duration_s and sample_interval_s must be > 0")
    rng = np.random.default_rng(seed)
    v0, d = receiver.visibility, receiver.drift
    if receiver.variant is Variant.PIC:
        times = np.arange(0.0, duration_s, sample_interval_s)
        vis = np.clip(v0 + d.residual_visibility_jitter * rng.standard_normal(len(times)), 0.0, 1.0)
        return DriftSeries(times, vis, (1 - vis) / 2, 0, sample_interval_s)

    step = d.drift_std_rad_per_hour * math.sqrt(sample_interval_s / 3600.0)
    times, vis = [], []
    phase, seg_start, j, recals = 0.0, 0.0, 0, 0
    interval = d.recalibration_interval_s
    while True:
        t = seg_start + j * sample_interval_s
        if t >= duration_s:
            break
        if interval is not None and t - seg_start >= interval:
            if t + d.recalibration_dead_time_s >= duration_s:
                break
            recals += 1
            phase, seg_start, j = 0.0, t + d.recalibration_dead_time_s, 0
            continue
        times.append(t)
        vis.append(v0 * abs(math.cos(phase)))
        phase += step * rng.standard_normal()
        j += 1
    times_a, vis_a = np.array(times), np.array(vis)
    return DriftSeries(times_a, vis_a, (1 - vis_a) / 2, recals, sample_interval_s)
