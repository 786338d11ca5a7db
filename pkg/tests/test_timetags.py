import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbqkd import profiles
from tbqkd.link import DriftModel, ReceiverModel, Variant, block_duration, drift_series, emit_timetags
from tbqkd.protocol import StateSymbol, generate_pattern
from tbqkd.timetags import (
    AlignmentError, ChannelError, EstimationError, GateAssignments, OrderingError, ParseError, SyncModel, TimeTag,
    TimetagReader, accumulate_counts, classify, estimate_offset, load_timetags, parse_timetags, rolling_qber,
    write_timetags,
)

CFG = profiles.default_config()
TIMING = CFG.timing
GATE = profiles.GATE_WIDTH_PS
SYNC = SyncModel.for_timing(TIMING)


def _stream(att=10.0, n_frames=3000, seed=5, offset=0, variant="pic", **kw):
    link = profiles.link(variant, att)
    return emit_timetags(CFG, link.channel, link.receiver, link.detector, seed, 4095 * n_frames,
                         offset_ps=offset, **kw)


# -- parsing ---------------------------------------------------------------

def test_text_record():
    assert list(parse_timetags(b"3 1234567890\n")) == [TimeTag(3, 1234567890)]


def test_binary_record():
    blob = b"QTT1" + struct.pack("<HHQ", 1, 4, 0) + b"\x03" + bytes.fromhex("00000000499602D2")[::-1]
    assert list(parse_timetags(blob)) == [TimeTag(3, 1234567890)]


def test_text_bad_token_reports_token_and_offset():
    with pytest.raises(ParseError) as err:
        list(parse_timetags(b"1 5\nx 12\n"))
    assert "'x'" in str(err.value) and err.value.offset == 4


def test_text_headers_and_comments():
    data = b"# QTT1\n# channels=1,2\n# span_ps=99\n# free comment\n\n1 5\n2 7\n"
    reader = TimetagReader(data)
    assert reader.header.channels == (1, 2) and reader.header.span_ps == 99
    assert [t.timestamp_ps for t in reader] == [5, 7]


def test_truncated_binary_reports_offset():
    buf = io.BytesIO()
    write_timetags(buf, [1, 2, 3], [10, 20, 30])
    blob = buf.getvalue()[:-4]
    with pytest.raises(ParseError) as err:
        list(parse_timetags(blob))
    assert err.value.offset == 16 + 2 * 9


def test_timestamp_regression():
    with pytest.raises(OrderingError) as err:
        list(parse_timetags(b"1 10\n1 20\n1 15\n"))
    assert err.value.offset == 10


def test_unknown_channel_lists_declared_map():
    with pytest.raises(ChannelError) as err:
        list(parse_timetags(b"# channels=1,2,3\n1 10\n7 20\n"))
    assert err.value.channel == 7 and err.value.declared == [1, 2, 3]
    assert "[1, 2, 3]" in str(err.value)


def test_binary_channel_count_enforced():
    buf = io.BytesIO()
    write_timetags(buf, [1, 2], [1, 2], declared_channels=[1, 2])
    blob = bytearray(buf.getvalue())
    blob[16 + 9] = 5
    with pytest.raises(ChannelError):
        list(parse_timetags(bytes(blob)))


@settings(max_examples=40, deadline=None)
@given(data=st.lists(st.tuples(st.integers(0, 255), st.integers(0, 2 ** 64 - 1)), max_size=50),
       fmt=st.sampled_from(["binary", "text"]), chunk=st.integers(1, 7))
def test_round_trip(data, fmt, chunk):
    ch = np.array([c for c, _ in data], dtype=np.uint8)
    ts = np.sort(np.array([t for _, t in data], dtype=np.uint64))
    buf = io.BytesIO()
    write_timetags(buf, ch, ts, fmt=fmt, span_ps=123, declared_channels=range(256))
    reader = TimetagReader(buf.getvalue(), chunk_records=chunk)
    parts = list(reader.chunks())
    got_ch = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.uint8)
    got_ts = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.uint64)
    assert np.array_equal(got_ch, ch) and np.array_equal(got_ts, ts)
    assert reader.header.span_ps == 123


def test_file_round_trip(tmp_path):
    s = _stream(n_frames=200)
    path = tmp_path / "tags.bin"
    write_timetags(path, s.channels, s.timestamps_ps, span_ps=s.span_ps, declared_channels=[1, 2, 3])
    ch, ts, head = load_timetags(path)
    assert np.array_equal(ch, s.channels) and np.array_equal(ts, s.timestamps_ps)
    assert head.span_ps == s.span_ps and head.declared_channels == {0, 1, 2, 3}


# -- alignment ---------------------------------------------------------------

@pytest.mark.parametrize("offset", [0, 123456, 6_000_000])
def test_estimate_offset_recovers_ground_truth(offset):
    s = _stream(n_frames=2000, offset=offset)
    est = estimate_offset(s, s.pattern, SYNC, CFG, GATE)
    assert abs(est - offset) <= 100


def test_estimate_offset_reproducible():
    s = _stream(n_frames=2000, offset=4242)
    assert estimate_offset(s, s.pattern, SYNC, CFG, GATE) == estimate_offset(s, s.pattern, SYNC, CFG, GATE)


def test_dark_stream_fails_alignment():
    rng = np.random.default_rng(0)
    F = TIMING.frame_period_ps
    ts = np.sort(rng.integers(0, 300 * F, 30_000)).astype(np.uint64)
    ch = rng.integers(1, 4, 30_000).astype(np.uint8)
    with pytest.raises(AlignmentError):
        estimate_offset((ch, ts), generate_pattern(CFG, 1), SYNC, CFG, GATE)


def test_too_few_tags():
    s = _stream(att=40, n_frames=200)
    with pytest.raises(EstimationError):
        estimate_offset(s, s.pattern, SYNC, CFG, GATE)


def test_sync_model_invariants():
    with pytest.raises(ValueError):
        SyncModel(0)
    with pytest.raises(ValueError):
        SyncModel(100, offset_ps=100)
    with pytest.raises(ValueError):
        SyncModel(100, channel_map={"Q": 1})
    assert SYNC.with_offset(TIMING.frame_period_ps + 5).offset_ps == 5


# -- classification and sifting ------------------------------------------------

def _first(pattern, symbol):
    return int(np.flatnonzero(pattern.symbols == symbol)[0])


def test_classify_gate_geometry():
    pat = generate_pattern(CFG, 3)
    offset = 1000
    sync = SYNC.with_offset(offset)
    P = TIMING.state_period_ps
    iz, ix = _first(pat, StateSymbol.Z0), _first(pat, StateSymbol.X0)
    tags = [
        TimeTag(1, offset + iz * P + TIMING.early_center_ps),
        TimeTag(1, offset + iz * P + (TIMING.early_center_ps + TIMING.late_center_ps) // 2),
        TimeTag(2, offset + ix * P + TIMING.late_center_ps),
        TimeTag(1, offset - 10),
    ]
    tags.sort(key=lambda t: t.timestamp_ps)
    a = classify(tags, pat, sync, TIMING, GATE)
    assert len(a) == 2 and a.rejected == 2 and a.total == 4
    got = {(g.bin, g.basis_path, g.matched_symbol) for g in a}
    assert got == {("early", "Z", StateSymbol.Z0), ("central", "X", StateSymbol.X0)}


def test_gate_edges_closed_open():
    pat = generate_pattern(CFG, 3)
    sync = SYNC.with_offset(0)
    c, h = TIMING.early_center_ps, GATE // 2
    a = classify([TimeTag(1, c - h), TimeTag(1, c + h - 1), TimeTag(1, c + h)], pat, sync, TIMING, GATE)
    assert len(a) == 2 and a.rejected == 1


def test_matching_z_tags_have_no_errors():
    pat = generate_pattern(CFG, 8)
    P = TIMING.state_period_ps
    tags = []
    for i, s in enumerate(pat.symbols):
        if s == StateSymbol.Z0:
            tags.append(TimeTag(1, i * P + TIMING.early_center_ps))
        elif s == StateSymbol.Z1:
            tags.append(TimeTag(1, i * P + TIMING.late_center_ps))
    a = classify(tags, pat, SYNC.with_offset(0), TIMING, GATE)
    c = accumulate_counts(a, pat, block_duration(CFG, len(pat)), TIMING)
    assert c.n_z == len(tags) and c.m_z == 0


def test_empty_assignments():
    pat = generate_pattern(CFG, 8)
    c = accumulate_counts(GateAssignments.empty(), pat, 0.25, TIMING)
    assert c.n_z == c.m_z == c.n_x == c.m_x == 0 and c.duration_s == 0.25


def test_pipeline_identity_and_visibility():
    s = _stream(att=10, n_frames=6000, offset=31337)
    off = estimate_offset(s, s.pattern, SYNC, CFG, GATE)
    a = classify(s, s.pattern, SYNC.with_offset(off), TIMING, GATE)
    counts = accumulate_counts(a, s.pattern, block_duration(CFG, 4095 * 6000), TIMING)
    assert counts == s.counts
    sigma = math.sqrt(0.02 * 0.98 / counts.n_x)
    assert abs(counts.qber_x - 0.02) <= 3 * sigma


# -- rolling QBER --------------------------------------------------------------

def _rolling(vis_segments, n_per_seg):
    rec = profiles.pic_receiver().with_(visibility=0.96)
    link = profiles.link("pic", 10).with_receiver(visibility=0.96)
    segments = [(n_per_seg, v) for v in vis_segments]
    s = emit_timetags(CFG, link.channel, rec, link.detector, 21, n_per_seg * len(segments),
                      visibility_segments=segments)
    a = classify(s, s.pattern, SYNC.with_offset(0), TIMING, GATE)
    return rolling_qber(a, s.pattern, block_duration(CFG, n_per_seg)), a, s


def test_rolling_stationary_and_drift_injected():
    n_seg, per = 20, 4095 * 1000
    stationary, _, _ = _rolling([0.96] * n_seg, per)
    assert abs(stationary.qber.mean() - 0.02) < 3 * stationary.qber.std() / math.sqrt(len(stationary)) + 1e-3
    fiber = ReceiverModel(Variant.FIBER_PLL, visibility=0.96, drift=DriftModel(drift_std_rad_per_hour=0.5))
    vis = drift_series(fiber, n_seg * 900.0, 900.0, 4).visibility
    drifted, _, _ = _rolling(list(vis), per)
    excursion = np.max(np.abs(drifted.qber - stationary.qber.mean()))
    assert excursion > 3 * stationary.qber.std()


def test_rolling_single_window_equals_global():
    series, a, s = _rolling([0.96] * 3, 4095 * 300)
    one = rolling_qber(a, s.pattern, 10.0)
    assert len(one) == 1
    assert one.qber[0] == pytest.approx(s.counts.qber_x, abs=1e-12)
    assert one.samples[0] == s.counts.n_x
    assert one.to_csv().splitlines()[0] == "window_start_s,qber,samples"


def test_rolling_flags_but_keeps_high_qber():
    pat = generate_pattern(CFG, 8)
    ix = np.flatnonzero(pat.symbols == StateSymbol.X0)[:4]
    P = TIMING.state_period_ps
    tags = [TimeTag(3 if k < 3 else 2, int(i) * P + TIMING.late_center_ps) for k, i in enumerate(ix)]
    a = classify(tags, pat, SYNC.with_offset(0), TIMING, GATE)
    series = rolling_qber(a, pat, 1.0)
    assert series.qber[0] == 0.75 and series.flagged[0]
    with pytest.raises(ValueError):
        rolling_qber(a, pat, 0.0)
