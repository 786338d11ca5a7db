"""Three-state time-bin BB84 with one decoy: link simulation, time-tag
processing and finite-key secret key rates for chip-based and fiber receivers."""
from .finite_key import (
    DecoyBounds, InsufficientDataError, KeyRateReport, SearchSpace, SecurityParams, analyze_counts,
    decoy_bounds, optimize_parameters, secret_key_length, skr_vs_attenuation,
)
from .link import (
    ChannelModel, DetectorModel, DriftModel, LinkModel, ObservedCounts, ReceiverModel, Variant,
    emit_timetags, expected_counts, simulate_block,
)
from .protocol import ConfigError, EmissionPattern, ProtocolConfig, StateSymbol, generate_pattern

__version__ = "0.1.0"
