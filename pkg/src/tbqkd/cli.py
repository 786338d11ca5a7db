"""Command-line front end.

Exit codes: 0 success with a positive key, 1 usage/config/IO error, 2 valid run
without a positive key, 3 time-tag parse or alignment failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .finite_key import (
    InsufficientDataError, KeyRateReport, SearchSpace, analyze_counts, block_counts, curve_to_csv,
    no_key_report, optimize_parameters, skr_vs_attenuation,
)
from .link import ObservedCounts, Variant, block_duration, drift_series, emit_timetags, simulate_block
from .protocol import ConfigError, generate_pattern
from .seeding import derive_seed
from .timetags import (
    AlignmentError, ChannelError, EstimationError, ParseError, QberSeries, SyncModel, accumulate_counts,
    classify, estimate_offset, load_timetags, rolling_qber, write_timetags,
)

EXIT_OK, EXIT_USAGE, EXIT_NO_KEY, EXIT_STREAM = 0, 1, 2, 3

log = logging.getLogger("tbqkd")


class _Parser(argparse.ArgumentParser):
    # usage errors share exit code 1 with config errors; 2 means "no key"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    items = [t for t in text.replace(" ", "").split(",") if t]
    try:
        return [float(t) for t in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _range(text: str) -> tuple[float, float]:
    vals = _float_list(text)
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI or a single value, got {text!r}")
    return vals[0], vals[1]


def _load(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    return load_run_config(args.config, strict=args.strict)


def _seed(args, cfg: RunConfig) -> int:
    return cfg.run.seed if args.seed is None else args.seed


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out if args.out is not None else cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(args, command: str, **extra) -> dict:
    head = {"command": command, **extra}
    if not args.no_timestamp:
        head["generated"] = datetime.now(timezone.utc).replace(microsecond=0).isoformat()
    return head


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _report(counts: ObservedCounts, cfg: RunConfig) -> KeyRateReport:
    try:
        return analyze_counts(counts, cfg.protocol, cfg.security)
    except InsufficientDataError:
        return no_key_report(counts, cfg.protocol, cfg.security)


def _key_exit(report: KeyRateReport) -> int:
    return EXIT_OK if report.l_bits > 0 else EXIT_NO_KEY


def cmd_simulate(args) -> int:
    cfg = _load(args)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    link = cfg.link
    p, ch, rec, det = cfg.protocol, link.channel, link.receiver, link.detector
    duration = args.duration or cfg.run.duration_s or block_counts(p, link, cfg.run.max_block_time_s).duration_s
    n_states = max(1, int(round(duration * p.timing.state_rate_hz)))
    if args.tags:
        stream = emit_timetags(p, ch, rec, det, seed, n_states)
        counts = stream.counts
        tag_path = out / ("tags.txt" if args.tag_format == "text" else "tags.bin")
        write_timetags(tag_path, stream.channels, stream.timestamps_ps, fmt=args.tag_format,
                       span_ps=stream.span_ps, declared_channels=sorted(SyncModel.for_timing(p.timing).channel_map.values()))
    else:
        counts = simulate_block(p, ch, rec, det, seed, n_states)
    report = _report(counts, cfg)
    head = _header(args, "simulate", seed=seed, variant=rec.variant.value, attenuation_db=ch.attenuation_db,
                   n_states=n_states)
    _write_json(out / "counts.json", {**head, "counts": counts.to_dict()})
    _write_json(out / "report.json", {**head, "report": report.to_dict()})
    print(f"n_z={counts.n_z} qber_z={report.qber_z:.4f} qber_x={report.qber_x:.4f} "
          f"l={report.l_bits} skr={report.skr_bps:.4g} bps")
    return _key_exit(report)


def cmd_analyze(args) -> int:
    cfg = _load(args)
    seed = _seed(args, cfg) if args.pattern_seed is None else args.pattern_seed
    out = _out_dir(args, cfg)
    p = cfg.protocol
    pattern = generate_pattern(p, derive_seed(seed, "pattern"))
    sync = SyncModel.for_timing(p.timing)
    ch, ts, header = load_timetags(args.tags)
    gate = cfg.detector.gate_width_ps
    offset = estimate_offset((ch, ts), pattern, sync, p, gate)
    P = p.timing.state_period_ps
    end_ps = header.span_ps if header.span_ps else (int(ts[-1]) + 1 if len(ts) else 0)
    n_states = max(1, (end_ps - offset) // P)
    duration = block_duration(p, n_states)
    assigned = classify((ch, ts), pattern, sync.with_offset(offset), p.timing, gate)
    counts = accumulate_counts(assigned, pattern, duration, p.timing)
    report = _report(counts, cfg)
    window = args.window or cfg.run.window_s
    series = rolling_qber(assigned, pattern, window)
    head = _header(args, "analyze", seed=seed, offset_ps=offset, n_states=n_states,
                   rejected_tags=assigned.rejected, total_tags=assigned.total)
    _write_json(out / "analyze_counts.json", {**head, "counts": counts.to_dict()})
    _write_json(out / "analyze_report.json", {**head, "report": report.to_dict()})
    (out / "qber.csv").write_text(series.to_csv())
    flagged = int(series.flagged.sum())
    if flagged:
        log.warning("%d QBER windows exceed 0.5", flagged)
    print(f"offset={offset} ps n_z={counts.n_z} qber_z={report.qber_z:.4f} qber_x={report.qber_x:.4f} "
          f"l={report.l_bits} skr={report.skr_bps:.4g} bps")
    return _key_exit(report)


def cmd_sweep(args) -> int:
    cfg = _load(args)
    atts = args.attenuations if args.attenuations is not None else list(cfg.run.attenuations)
    if not atts:
        raise UsageError("attenuation list is empty")
    out = _out_dir(args, cfg)
    p = cfg.protocol
    primary = cfg.receiver.variant if args.variant in (None, "both") else Variant(args.variant)
    curves = {v: skr_vs_attenuation(p, cfg.link_for(v), atts, cfg.run.max_block_time_s) for v in Variant}
    (out / "sweep.csv").write_text(curve_to_csv(curves[primary]))
    rows = ["attenuation_db,variant,skr_bps,qber_z,qber_x"]
    for v in Variant:
        rows += [f"{pt.attenuation_db:g},{v.value},{pt.skr_bps:.6g},{pt.qber_z:.6g},{pt.qber_x:.6g}"
                 for pt in curves[v]]
    (out / "sweep_variants.csv").write_text("\n".join(rows) + "\n")
    for pt in curves[primary]:
        print(f"{pt.attenuation_db:6g} dB  {pt.skr_bps:12.4g} bps")
    return EXIT_OK if any(pt.skr_bps > 0 for pt in curves[primary]) else EXIT_NO_KEY


def cmd_optimize(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    s = cfg.search
    search = SearchSpace(
        mu_signal=args.mu_signal or s.mu_signal,
        mu_decoy=args.mu_decoy or s.mu_decoy,
        p_mu1=args.p_mu1 or s.p_mu1,
        p_z_alice=args.p_z or s.p_z_alice,
        grid_points=args.grid_points or s.grid_points,
        min_step=s.min_step,
        min_mu_gap=s.min_mu_gap,
    )
    result = optimize_parameters(cfg.protocol, cfg.link, search, cfg.run.max_block_time_s)
    head = _header(args, "optimize", variant=cfg.receiver.variant.value,
                   attenuation_db=cfg.channel.attenuation_db)
    _write_json(out / "optimize.json", {**head, "result": result.to_dict()})
    skr = result.report.skr_bps if result.report else 0.0
    print(f"mu_signal={result.mu_signal:.4f} mu_decoy={result.mu_decoy:.4f} p_mu1={result.p_mu1:.4f} "
          f"p_z={result.p_z_alice:.4f} skr={skr:.4g} bps")
    return EXIT_OK if result.positive_key else EXIT_NO_KEY


def stability_series(receiver, duration_s: float, window_s: float, sample_interval_s: float,
                     seed: int) -> QberSeries:
    """Windowed QBER_X of a drift trace; windows with no samples (dead time) are absent."""
    series = drift_series(receiver, duration_s, min(sample_interval_s, window_s), seed)
    w = np.floor(series.times_s / window_s + 1e-9).astype(np.int64)
    uniq, inv = np.unique(w, return_inverse=True)
    n = np.bincount(inv)
    q = np.bincount(inv, weights=series.qber_x) / n
    return QberSeries(window_s, uniq * window_s, q, n)


def cmd_stability(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    seed = _seed(args, cfg)
    duration = args.duration or cfg.run.stability_duration_s
    window = args.window or cfg.run.window_s
    if window > duration:
        raise UsageError(f"window ({window} s) exceeds duration ({duration} s)")
    variants = list(Variant) if args.variant in (None, "both") else [Variant(args.variant)]
    for v in variants:
        rec = cfg.link_for(v).receiver
        series = stability_series(rec, duration, window, cfg.run.sample_interval_s,
                                  derive_seed(seed, f"drift_{v.value}"))
        (out / f"stability_{v.value}.csv").write_text(series.to_csv())
        missing = int(round(duration / window)) - len(series)
        print(f"{v.value}: {len(series)} windows, mean QBER_X {series.qber.mean():.4f}, {missing} missing")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run config (TOML); defaults to the shipped profile")
    common.add_argument("--seed", type=int, help="root seed, overrides run.seed")
    common.add_argument("--out", metavar="DIR", help="output directory, overrides run.out_dir")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--strict", dest="strict", action="store_true", default=True,
                      help="reject unknown config keys (default)")
    mode.add_argument("--lax", dest="strict", action="store_false", help="warn about unknown config keys")
    common.add_argument("--no-timestamp", action="store_true", help="omit the generation time from reports")

    parser = _Parser(prog="tbqkd", description="Time-bin QKD link simulation and finite-key analysis.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo block and key-rate report")
    p.add_argument("--duration", type=float, metavar="S", help="block duration; default reaches the Z target")
    p.add_argument("--tags", action="store_true", help="also write the block as a time-tag stream")
    p.add_argument("--tag-format", choices=["binary", "text"], default="binary")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", parents=[common], help="key-rate report from a time-tag stream")
    p.add_argument("tags", metavar="TAGS", help="time-tag file (binary or text)")
    p.add_argument("--pattern-seed", type=int, help="seed of the emission pattern (default: run seed)")
    p.add_argument("--window", type=float, metavar="S", help="rolling QBER window")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", parents=[common], help="SKR versus attenuation")
    p.add_argument("--attenuations", type=_float_list, metavar="LIST", help="comma-separated dB values")
    p.add_argument("--variant", choices=["pic", "fiber", "both"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("optimize", parents=[common], help="choose intensities and probabilities")
    p.add_argument("--mu-signal", type=_range, metavar="LO,HI")
    p.add_argument("--mu-decoy", type=_range, metavar="LO,HI")
    p.add_argument("--p-mu1", type=_range, metavar="LO,HI")
    p.add_argument("--p-z", type=_range, metavar="LO,HI")
    p.add_argument("--grid-points", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("stability", parents=[common], help="QBER drift series per receiver")
    p.add_argument("--duration", type=float, metavar="S")
    p.add_argument("--window", type=float, metavar="S")
    p.add_argument("--variant", choices=["pic", "fiber", "both"])
    p.set_defaults(func=cmd_stability)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ChannelError, AlignmentError, EstimationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STREAM
    except (UsageError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
