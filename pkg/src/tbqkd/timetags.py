"""Time-tag streams: parsing, frame alignment, gate classification and sifting.

Stream formats
--------------
Text::

    # QTT1
    # channels=1,2,3
    # span_ps=6879600000
    3 1234567890

``#`` lines are headers (``key=value`` pairs are recognised, anything else is a
comment); each record is ``channel<SP>timestamp_ps``.

Binary: a 16-byte little-endian header ``b"QTT1"``, ``uint16`` version (1),
``uint16`` channel count, ``uint64`` span in ps (0 if unknown), followed by
9-byte records: ``uint8`` channel, ``uint64`` timestamp in ps. Valid channel
ids are ``0 .. channel_count - 1``.

``span_ps`` is the time from the stream epoch to the end of the acquisition.
Timestamps must be nondecreasing; 64-bit picoseconds cover ~213 days so no
rollover handling is attempted.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator

import numpy as np

from .link import DEFAULT_CHANNELS, ObservedCounts, _fold_counts, _positions_in_range
from .protocol import EmissionPattern, Intensity, ProtocolConfig, StateSymbol, TimingGrid

MAGIC = b"QTT1"
VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
_RECORD = np.dtype([("channel", "u1"), ("timestamp", "<u8")])
assert _RECORD.itemsize == 9


class TimetagError(Exception):
    """Base class for stream and alignment failures."""


class ParseError(TimetagError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class OrderingError(ParseError):
    pass


class ChannelError(TimetagError):
    def __init__(self, channel: int, declared, offset: int):
        declared = sorted(declared)
        super().__init__(f"unknown channel {channel} at byte offset {offset}; declared channels: {declared}")
        self.channel, self.declared, self.offset = channel, declared, offset


class AlignmentError(TimetagError):
    """Raised when the stream shows no usable frame structure."""


class EstimationError(TimetagError):
    """Raised when the stream is too short to estimate the frame offset."""


@dataclass(frozen=True)
class TimeTag:
    channel: int
    timestamp_ps: int


@dataclass
class StreamHeader:
    format: str
    version: int = VERSION
    channel_count: int | None = None
    channels: tuple[int, ...] | None = None
    span_ps: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def declared_channels(self) -> set[int] | None:
        if self.channels is not None:
            return set(self.channels)
        if self.channel_count is not None:
            return set(range(self.channel_count))
        return None


def _open(stream) -> tuple[BinaryIO, bool]:
    if isinstance(stream, (str, os.PathLike)):
        return open(stream, "rb"), True
    if isinstance(stream, (bytes, bytearray)):
        return io.BytesIO(stream), True
    return stream, False


class TimetagReader:
    """Streaming reader over either format; memory use is bounded by ``chunk_records``.

    Iterating yields :class:`TimeTag`; :meth:`chunks` yields ``(channels,
    timestamps)`` array pairs for vectorised consumers.
    """

    def __init__(self, stream, channels=None, chunk_records: int = 1 << 16):
        self._fh, self._owns = _open(stream)
        self._chunk = chunk_records
        head = self._fh.read(4)
        if head == MAGIC:
            rest = self._fh.read(_HEADER.size - 4)
            if len(rest) != _HEADER.size - 4:
                raise ParseError("truncated binary header", len(head) + len(rest))
            _, version, count, span = _HEADER.unpack(head + rest)
            if version != VERSION:
                raise ParseError(f"unsupported binary version {version}", 4)
            self.header = StreamHeader("binary", version, count, None, span)
            self._pos = _HEADER.size
            self._pending = b""
        else:
            self.header = StreamHeader("text")
            self._pos = 0
            self._pending = head
            self._read_text_header()
        if channels is not None:
            self.header.channels = tuple(sorted(set(int(c) for c in channels)))
        self._declared = self.header.declared_channels
        self._last_ts = -1

    def _read_text_header(self):
        # consume leading '#' lines; the first data line stays pending
        buf = self._pending
        while True:
            while b"\n" not in buf:
                more = self._fh.read(4096)
                if not more:
                    break
                buf += more
            if not buf.startswith(b"#"):
                break
            line, sep, buf = buf.partition(b"\n")
            self._pos += len(line) + len(sep)
            text = line[1:].decode("utf-8", "replace").strip()
            if "=" in text:
                key, value = (s.strip() for s in text.split("=", 1))
                if key == "channels":
                    self.header.channels = tuple(int(c) for c in value.split(",") if c.strip())
                elif key == "span_ps":
                    self.header.span_ps = int(value)
                elif key == "version":
                    self.header.version = int(value)
                else:
                    self.header.extra[key] = value
            if not sep:
                break
        self._pending = buf

    def close(self):
        if self._owns:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _check(self, ch: np.ndarray, ts: np.ndarray, offsets: np.ndarray):
        if self._declared is not None and len(ch):
            bad = ~np.isin(ch, list(self._declared))
            if bad.any():
                i = int(np.argmax(bad))
                raise ChannelError(int(ch[i]), self._declared, int(offsets[i]))
        if len(ts):
            ts_i = ts.astype(np.uint64)
            if self._last_ts >= 0 and int(ts_i[0]) < self._last_ts:
                raise OrderingError(f"timestamp {int(ts_i[0])} < previous {self._last_ts}", int(offsets[0]))
            regress = ts_i[1:] < ts_i[:-1]
            if regress.any():
                i = int(np.argmax(regress)) + 1
                raise OrderingError(f"timestamp {int(ts_i[i])} < previous {int(ts_i[i - 1])}", int(offsets[i]))
            self._last_ts = int(ts_i[-1])

    def chunks(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        try:
            if self.header.format == "binary":
                yield from self._binary_chunks()
            else:
                yield from self._text_chunks()
        finally:
            self.close()

    def _binary_chunks(self):
        size = _RECORD.itemsize
        while True:
            data = self._fh.read(self._chunk * size)
            if not data:
                return
            n_full = len(data) // size
            offsets = self._pos + size * np.arange(n_full)
            rec = np.frombuffer(data[: n_full * size], dtype=_RECORD)
            ch, ts = rec["channel"].copy(), rec["timestamp"].copy()
            self._check(ch, ts, offsets)
            if len(data) % size:
                raise ParseError(f"truncated record ({len(data) % size} of {size} bytes)", self._pos + n_full * size)
            self._pos += len(data)
            yield ch, ts

    def _text_chunks(self):
        buf = self._pending
        eof = False
        while not eof or buf:
            if not eof and buf.count(b"\n") < self._chunk:
                more = self._fh.read(1 << 20)
                if more:
                    buf += more
                    continue
                eof = True
            lines = buf.split(b"\n")
            if not eof:
                buf = lines.pop()
            else:
                buf = b""
            chans, stamps, offs = [], [], []
            for raw in lines:
                start = self._pos
                self._pos += len(raw) + 1
                line = raw.strip()
                if not line or line.startswith(b"#"):
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ParseError(f"expected 'channel timestamp_ps', got {raw.decode(errors='replace')!r}", start)
                try:
                    ch = int(parts[0])
                except ValueError:
                    raise ParseError(f"bad channel token {parts[0].decode(errors='replace')!r}", start) from None
                try:
                    ts = int(parts[1])
                except ValueError:
                    raise ParseError(f"bad timestamp token {parts[1].decode(errors='replace')!r}",
                                     start + raw.index(parts[1])) from None
                if not 0 <= ch <= 255:
                    raise ParseError(f"channel {ch} outside 0..255", start)
                if not 0 <= ts < 1 << 64:
                    raise ParseError(f"timestamp {ts} outside unsigned 64-bit range", start)
                chans.append(ch)
                stamps.append(ts)
                offs.append(start)
            if chans:
                ch_a, ts_a = np.array(chans, dtype=np.uint8), np.array(stamps, dtype=np.uint64)
                self._check(ch_a, ts_a, np.array(offs))
                yield ch_a, ts_a

    def __iter__(self) -> Iterator[TimeTag]:
        for ch, ts in self.chunks():
            for c, t in zip(ch.tolist(), ts.tolist()):
                yield TimeTag(c, t)


def parse_timetags(stream, channels=None) -> Iterator[TimeTag]:
    """Yield tags in stream order from a path, bytes or binary file object."""
    return iter(TimetagReader(stream, channels))


def load_timetags(stream, channels=None) -> tuple[np.ndarray, np.ndarray, StreamHeader]:
    reader = TimetagReader(stream, channels)
    parts = list(reader.chunks())
    ch = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.uint8)
    ts = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.uint64)
    return ch, ts, reader.header


def write_timetags(target, channels, timestamps, *, fmt: str = "binary", span_ps: int = 0,
                   declared_channels=None) -> None:
    """Serialise tags to ``target`` (path or writable binary file)."""
    ch = np.asarray(channels, dtype=np.uint8)
    ts = np.asarray(timestamps, dtype=np.uint64)
    declared = sorted(set(declared_channels if declared_channels is not None else ch.tolist()))
    fh, owns = (open(target, "wb"), True) if isinstance(target, (str, os.PathLike)) else (target, False)
    try:
        if fmt == "binary":
            count = (max(declared) + 1) if declared else 0
            fh.write(_HEADER.pack(MAGIC, VERSION, count, int(span_ps)))
            rec = np.empty(len(ch), dtype=_RECORD)
            rec["channel"], rec["timestamp"] = ch, ts
            fh.write(rec.tobytes())
        elif fmt == "text":
            head = f"# QTT1\n# version={VERSION}\n# channels={','.join(map(str, declared))}\n# span_ps={int(span_ps)}\n"
            fh.write(head.encode())
            step = 1 << 16
            for i in range(0, len(ch), step):
                fh.write("".join(f"{c} {t}\n" for c, t in zip(ch[i:i + step].tolist(),
                                                             ts[i:i + step].tolist())).encode())
        else:
            raise ValueError(f"unknown format {fmt!r}; use 'binary' or 'text'")
    finally:
        if owns:
            fh.close()


def _as_arrays(tags) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(tags, tuple) and len(tags) >= 2 and isinstance(tags[0], np.ndarray):
        return tags[0], tags[1]
    if hasattr(tags, "channels") and hasattr(tags, "timestamps_ps"):
        return tags.channels, tags.timestamps_ps
    tags = list(tags)
    return (np.array([t.channel for t in tags], dtype=np.uint8),
            np.array([t.timestamp_ps for t in tags], dtype=np.uint64))


@dataclass(frozen=True)
class SyncModel:
    """Maps the tag stream onto the transmitter frame.

    ``channel_map`` assigns detector roles (``"Z"``, ``"X"``, ``"X_ERR"``) to
    channel ids. ``offset_ps`` is ``None`` until estimated.
    """

    frame_period_ps: int
    channel_map: dict = field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    offset_ps: int | None = None

    def __post_init__(self):
        if self.frame_period_ps <= 0:
            raise ValueError("frame_period_ps must be > 0")
        if self.offset_ps is not None and not 0 <= self.offset_ps < self.frame_period_ps:
            raise ValueError("offset_ps must lie in [0, frame_period_ps)")
        unknown = set(self.channel_map) - {"Z", "X", "X_ERR"}
        if unknown or "Z" not in self.channel_map or "X" not in self.channel_map:
            raise ValueError("channel_map needs roles 'Z' and 'X' (and optionally 'X_ERR') only")

    @classmethod
    def for_timing(cls, timing: TimingGrid, channel_map=None) -> "SyncModel":
        return cls(timing.frame_period_ps, dict(DEFAULT_CHANNELS if channel_map is None else channel_map))

    def with_offset(self, offset_ps: int) -> "SyncModel":
        return SyncModel(self.frame_period_ps, self.channel_map, int(offset_ps) % self.frame_period_ps)


MIN_ALIGN_TAGS = 10_000
MIN_ALIGN_FRAMES = 100
ALIGN_MIN_SCORE = 8.0


def _circular_xcorr(h: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``c[s] = sum_x h[x] t[x - s]`` over a circular axis."""
    return np.fft.irfft(np.fft.rfft(h) * np.conj(np.fft.rfft(t)), n=len(h))


def _gate_residuals(phase, is_z, timing):
    res_l = phase - timing.late_center_ps
    res_e = phase - timing.early_center_ps
    return np.where(is_z & (np.abs(res_e) < np.abs(res_l)), res_e, res_l)


def estimate_offset(tags, pattern: EmissionPattern, sync: SyncModel, config: ProtocolConfig | None = None,
                    gate_width_ps: int = 180) -> int:
    """Frame offset (ps) of the pattern within the tag stream.

    The frame-folded correlation is evaluated in two factors. The offset within
    a state comes from the stream folded modulo the state period, correlated
    with the bin envelope and refined to the picosecond by the mean residual of
    in-gate tags. The state index comes from correlating per-position gate
    contrasts (Z early minus late, X constructive minus destructive) against the
    pattern at each of its cyclic shifts; the peak must stand ``ALIGN_MIN_SCORE``
    standard deviations above the other shifts.
    """
    config = config or ProtocolConfig()
    timing = config.timing
    ch, ts = _as_arrays(tags)
    F, P, L = sync.frame_period_ps, timing.state_period_ps, len(pattern)
    if F != timing.frame_period_ps or F != P * L:
        raise AlignmentError(f"sync frame period {F} ps does not match the pattern frame {P * L} ps")
    known = np.isin(ch, list(sync.channel_map.values()))
    ch, ts = ch[known], ts[known].astype(np.int64)
    if len(ts) < MIN_ALIGN_TAGS or (ts.max() - ts.min()) < MIN_ALIGN_FRAMES * F:
        raise EstimationError(
            f"need >= {MIN_ALIGN_TAGS} tags spanning >= {MIN_ALIGN_FRAMES} frames; got {len(ts)} tags"
        )
    is_z = ch == sync.channel_map["Z"]
    is_x = ch == sync.channel_map["X"]
    is_xe = ch == sync.channel_map.get("X_ERR", -1)

    # offset within one state period
    sigma = 20.0
    grid = np.arange(P)

    def bump(center):
        d = (grid - center + P / 2) % P - P / 2
        return np.exp(-0.5 * (d / sigma) ** 2)

    folded = ts % P
    corr = _circular_xcorr(np.bincount(folded[is_z], minlength=P).astype(float),
                           bump(timing.early_center_ps) + bump(timing.late_center_ps))
    corr += 2 * _circular_xcorr(np.bincount(folded[is_x | is_xe], minlength=P).astype(float),
                                bump(timing.late_center_ps))
    phi = int(np.argmax(corr))
    window = 3 * sigma
    for _ in range(8):
        res = _gate_residuals((ts - phi) % P, is_z, timing)
        near = np.abs(res) <= window
        if near.sum() < 10:
            break
        shift = int(np.rint(res[near].mean()))
        if shift == 0:
            break
        phi = (phi + shift) % P

    # state index within the frame
    rel = ts - phi
    pos = np.floor_divide(rel, P) % L
    phase = rel % P
    half = gate_width_ps // 2

    def in_gate(center):
        return (phase >= center - half) & (phase < center + half)

    fz = (np.bincount(pos[is_z & in_gate(timing.early_center_ps)], minlength=L)
          - np.bincount(pos[is_z & in_gate(timing.late_center_ps)], minlength=L)).astype(float)
    central = in_gate(timing.late_center_ps)
    fx = (np.bincount(pos[is_x & central], minlength=L)
          - np.bincount(pos[is_xe & central], minlength=L)).astype(float)
    sym = pattern.symbols
    tz = np.select([sym == StateSymbol.Z0, sym == StateSymbol.Z1], [1.0, -1.0], 0.0)
    tx = (sym == StateSymbol.X0).astype(float)
    c = _circular_xcorr(fz, tz - tz.mean()) + _circular_xcorr(fx, tx - tx.mean())
    j = int(np.argmax(c))
    rest = np.delete(c, j)
    spread = rest.std()
    score = (c[j] - rest.mean()) / spread if spread > 0 else 0.0
    if not score >= ALIGN_MIN_SCORE:
        raise AlignmentError(f"no frame structure found (correlation peak score {score:.1f} < {ALIGN_MIN_SCORE})")
    return int((phi + j * P) % F)


GATE_EARLY, GATE_LATE, GATE_CENTRAL = 0, 1, 2
BIN_NAMES = ("early", "late", "central")


@dataclass(frozen=True)
class GateAssignment:
    timestamp_ps: int
    state_index: int
    pattern_index: int
    bin: str
    basis_path: str
    error_port: bool
    matched_symbol: StateSymbol
    matched_intensity: Intensity


@dataclass(frozen=True)
class GateAssignments:
    """Columnar classification result; iterating yields :class:`GateAssignment`."""

    timestamp_ps: np.ndarray
    state_index: np.ndarray
    pattern_index: np.ndarray
    bin: np.ndarray
    path_x: np.ndarray
    error_port: np.ndarray
    symbol: np.ndarray
    intensity: np.ndarray
    rejected: int
    total: int

    def __len__(self) -> int:
        return len(self.timestamp_ps)

    def __iter__(self) -> Iterator[GateAssignment]:
        for i in range(len(self)):
            yield GateAssignment(
                int(self.timestamp_ps[i]), int(self.state_index[i]), int(self.pattern_index[i]),
                BIN_NAMES[self.bin[i]], "X" if self.path_x[i] else "Z", bool(self.error_port[i]),
                StateSymbol(int(self.symbol[i])), Intensity(int(self.intensity[i])),
            )

    @classmethod
    def empty(cls) -> "GateAssignments":
        z = np.zeros(0, dtype=np.int64)
        b = np.zeros(0, dtype=bool)
        return cls(z, z, z, z.astype(np.int8), b, b, z.astype(np.int8), z.astype(np.int8), 0, 0)


def classify(tags, pattern: EmissionPattern, sync: SyncModel, timing: TimingGrid | None = None,
             gate_width_ps: int = 180) -> GateAssignments:
    """Assign each tag to a gate of a pattern state; others are counted as rejected.

    Gates are ``[centre - w/2, centre + w/2)``; Z detector gates sit on the early
    and late bins, X detector gates on the central interference slot.
    """
    if sync.offset_ps is None:
        raise ValueError("sync offset must be established before classification")
    timing = timing or TimingGrid()
    ch, ts = _as_arrays(tags)
    ts = ts.astype(np.int64)
    P, L = timing.state_period_ps, len(pattern)
    half = gate_width_ps // 2
    rel = ts - sync.offset_ps
    state = np.floor_divide(rel, P)
    phase = rel - state * P
    valid = rel >= 0

    def in_gate(center):
        return (phase >= center - half) & (phase < center + half)

    is_z = ch == sync.channel_map["Z"]
    is_x = ch == sync.channel_map["X"]
    is_xe = ch == sync.channel_map.get("X_ERR", -1)
    early = valid & is_z & in_gate(timing.early_center_ps)
    late = valid & is_z & in_gate(timing.late_center_ps)
    central = valid & (is_x | is_xe) & in_gate(timing.late_center_ps)
    keep = early | late | central

    gate = np.where(early, GATE_EARLY, np.where(late, GATE_LATE, GATE_CENTRAL)).astype(np.int8)[keep]
    st = state[keep]
    pidx = st % L
    return GateAssignments(
        timestamp_ps=ts[keep], state_index=st, pattern_index=pidx, bin=gate,
        path_x=(is_x | is_xe)[keep], error_port=is_xe[keep],
        symbol=np.asarray(pattern.symbols)[pidx], intensity=np.asarray(pattern.intensities)[pidx],
        rejected=int(len(ts) - keep.sum()), total=int(len(ts)),
    )


def _sifted_events(a: GateAssignments, basis: str):
    """One event per state: ``(time_ps, intensity, is_error)`` for the given basis.

    Z: Z-path tags during Z states, the earliest tag in a state wins. X: X-path
    tags during X0 states; an X_ERR click anywhere in the state makes it an error.
    """
    if basis == "Z":
        sel = ~a.path_x & (a.symbol != StateSymbol.X0)
    else:
        sel = a.path_x & (a.symbol == StateSymbol.X0)
    st, t = a.state_index[sel], a.timestamp_ps[sel]
    order = np.lexsort((t, st))
    st, t = st[order], t[order]
    uniq, first = np.unique(st, return_index=True)
    intensity = a.intensity[sel][order][first]
    if basis == "Z":
        b = a.bin[sel][order][first]
        sym = a.symbol[sel][order][first]
        err = ((sym == StateSymbol.Z0) & (b == GATE_LATE)) | ((sym == StateSymbol.Z1) & (b == GATE_EARLY))
    else:
        err = np.maximum.reduceat(a.error_port[sel][order].astype(np.int8), first).astype(bool) if len(first) \
            else np.zeros(0, dtype=bool)
    return t[first], intensity, err


def accumulate_counts(assignments: GateAssignments, pattern: EmissionPattern, duration_s: float,
                      timing: TimingGrid | None = None) -> ObservedCounts:
    """Sift classified tags into per-class detections and errors."""
    timing = timing or TimingGrid()
    z_out = np.zeros((3, 2, 3), dtype=np.int64)
    x_out = np.zeros((3, 2, 4), dtype=np.int64)
    _, zi, ze = _sifted_events(assignments, "Z")
    _, xi, xe = _sifted_events(assignments, "X")
    for k in (0, 1):
        nz, mz = int(np.sum(zi == k)), int(np.sum((zi == k) & ze))
        nx, mx = int(np.sum(xi == k)), int(np.sum((xi == k) & xe))
        # _fold_counts reads Z0 early+late and Z0 late as errors; X0 c+d+both and d+both
        z_out[StateSymbol.Z0, k] = (nz - mz, mz, 0)
        x_out[StateSymbol.X0, k] = (nx - mx, mx, 0, 0)
    n_states = int(round(duration_s * timing.state_rate_hz))
    states = np.zeros((3, 2), dtype=np.int64)
    np.add.at(states, (pattern.symbols.astype(np.intp), pattern.intensities.astype(np.intp)),
              _positions_in_range(0, n_states, len(pattern)))
    return _fold_counts(z_out, x_out, states, duration_s)


@dataclass(frozen=True)
class QberSeries:
    window_s: float
    window_start_s: np.ndarray
    qber: np.ndarray
    samples: np.ndarray

    @property
    def flagged(self) -> np.ndarray:
        """Entries whose QBER exceeds 0.5; reported as measured, never clamped."""
        return self.qber > 0.5

    def __len__(self) -> int:
        return len(self.qber)

    def to_csv(self) -> str:
        lines = ["window_start_s,qber,samples"]
        lines += [f"{s:.6f},{q:.6g},{int(n)}" for s, q, n in zip(self.window_start_s, self.qber, self.samples)]
        return "\n".join(lines) + "\n"


def rolling_qber(assignments: GateAssignments, pattern: EmissionPattern, window_s: float,
                 basis: str = "X") -> QberSeries:
    """Per-window error rate of sifted events; windows without detections are skipped."""
    if not window_s > 0:
        raise ValueError("window_s must be > 0")
    t, _, err = _sifted_events(assignments, basis)
    if len(t) == 0:
        return QberSeries(window_s, np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))
    w = np.floor(t * 1e-12 / window_s).astype(np.int64)
    uniq, inv = np.unique(w, return_inverse=True)
    n = np.bincount(inv)
    m = np.bincount(inv, weights=err.astype(float))
    return QberSeries(window_s, uniq * window_s, m / n, n)
