"""Finite-key secret key length for the one-decoy three-state protocol.

The key length per block is

    l = s_z0_l + s_z1_l * (1 - H2(phi_z_u)) - lambda_ec - lambda_sec - lambda_corr

with vacuum / single-photon lower bounds and the phase-error upper bound taken
from one-decoy statistics with Hoeffding corrections.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .link import LinkModel, ObservedCounts, expected_counts
from .protocol import ConfigError, ProtocolConfig, _tau


class InsufficientDataError(ValueError):
    """Raised when a block holds too few events for a statistical bound."""


@dataclass(frozen=True)
class SecurityParams:
    """Security and correctness parameters.

    ``eps_partition`` is the failure probability charged to each statistical
    bound; it defaults to ``eps_sec / 19`` to match the 19 in ``lambda_sec``.
    """

    eps_sec: float = 1e-12
    eps_corr: float = 1e-12
    eps_partition: float | None = None

    def __post_init__(self):
        if self.eps_partition is None:
            object.__setattr__(self, "eps_partition", self.eps_sec / 19.0)
        for name in ("eps_sec", "eps_corr", "eps_partition"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")

    @classmethod
    def from_config(cls, config: ProtocolConfig, eps_partition: float | None = None) -> "SecurityParams":
        return cls(config.eps_sec, config.eps_corr, eps_partition)


@dataclass(frozen=True)
class DecoyBounds:
    s_z0_l: float
    s_z0_u: float
    s_z1_l: float
    s_x0_u: float
    s_x1_l: float
    v_x1_u: float
    phi_z_u: float


@dataclass(frozen=True)
class KeyRateReport:
    l_bits: int
    skr_bps: float
    qber_z: float
    qber_x: float
    lambda_ec: float
    lambda_sec: float
    lambda_corr: float
    bounds: DecoyBounds
    feasible: bool
    raw_l_bits: float
    n_z: float
    duration_s: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = asdict(self.bounds)
        return d


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy is defined on [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def lambda_terms(security: SecurityParams) -> tuple[float, float]:
    """Privacy-amplification and correctness overheads ``(lambda_sec, lambda_corr)`` in bits."""
    return 6.0 * math.log2(19.0 / security.eps_sec), math.log2(2.0 / security.eps_corr)


def hoeffding_delta(n: float, eps: float) -> float:
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    return math.sqrt(n / 2.0 * math.log(1.0 / eps))


def lambda_ec(n_z: float, qber_z: float, f_ec: float) -> float:
    """Bits disclosed during error correction."""
    if not 0.0 <= qber_z <= 0.5:
        raise ValueError(f"qber_z must lie in [0, 0.5], got {qber_z}")
    if f_ec < 1.0:
        raise ValueError("f_ec must be >= 1")
    return n_z * f_ec * binary_entropy(qber_z)


def gamma_correction(eps: float, rate: float, c: float, d: float) -> float:
    """Finite-sample penalty for transferring an error rate measured on ``d``
    events to ``c`` events of the other basis."""
    if rate <= 0.0 or rate >= 1.0:
        return 0.0
    var = rate * (1.0 - rate)
    arg = (c + d) / (c * d * var) * (21.0 / eps) ** 2
    value = (c + d) * var / (c * d * math.log(2.0)) * math.log2(arg)
    return math.sqrt(max(value, 0.0))


def phase_error_upper(bounds: DecoyBounds, security: SecurityParams) -> float:
    if bounds.s_x1_l <= 0 or bounds.s_z1_l <= 0:
        raise InsufficientDataError("phase-error bound needs positive single-photon bounds in both bases")
    rate = bounds.v_x1_u / bounds.s_x1_l
    phi = rate + gamma_correction(security.eps_partition, rate, bounds.s_z1_l, bounds.s_x1_l)
    return min(max(phi, 0.0), 0.5)


def _basis_class_probs(counts: ObservedCounts, basis: str, config: ProtocolConfig) -> tuple[float, float]:
    # Alice knows what she sent; use the realised per-basis class fractions when available.
    attr = "sent_z" if basis == "Z" else "sent_x"
    sent = [getattr(c, attr) for c in counts.classes]
    total = sum(sent)
    if total > 0 and all(s > 0 for s in sent):
        return sent[0] / total, sent[1] / total
    return config.class_probs


def _basis_bounds(n, m, probs, mus, eps, delta_scale):
    """Vacuum and single-photon bounds for one basis.

    ``n``/``m`` are per-class detections/errors (signal, decoy).
    """
    mu1, mu2 = mus
    n_tot, m_tot = n[0] + n[1], m[0] + m[1]
    dn = delta_scale * hoeffding_delta(n_tot, eps)
    dm = delta_scale * hoeffding_delta(m_tot, eps)
    w = [math.exp(mu) / p for mu, p in zip(mus, probs)]
    n_minus = [w[k] * (n[k] - dn) for k in range(2)]
    n_plus = [w[k] * (n[k] + dn) for k in range(2)]
    m_minus = [w[k] * (m[k] - dm) for k in range(2)]
    m_plus = [w[k] * (m[k] + dm) for k in range(2)]
    tau0, tau1 = _tau(probs, mus, 0), _tau(probs, mus, 1)

    s0_l = tau0 * (mu1 * n_minus[1] - mu2 * n_plus[0]) / (mu1 - mu2)
    s0_u = 2.0 * (m_tot + dn)
    s0_u = min(s0_u, n_tot)
    s1_l = (tau1 * mu1 / (mu2 * (mu1 - mu2))) * (
        n_minus[1] - (mu2 ** 2 / mu1 ** 2) * n_plus[0] - ((mu1 ** 2 - mu2 ** 2) / mu1 ** 2) * s0_u / tau0
    )
    v1_u = tau1 * (m_plus[0] - m_minus[1]) / (mu1 - mu2)
    clamp = lambda v, hi: min(max(v, 0.0), hi)
    return clamp(s0_l, n_tot), clamp(s0_u, n_tot), clamp(s1_l, n_tot), clamp(v1_u, m_tot + dm)


def decoy_bounds(counts: ObservedCounts, config: ProtocolConfig, security: SecurityParams, *,
                 asymptotic: bool = False) -> DecoyBounds:
    """One-decoy bounds on vacuum and single-photon events.

    ``asymptotic=True`` drops every Hoeffding term; it exists only as a test hook.
    """
    if counts.n_z <= 0:
        raise InsufficientDataError("no Z-basis detections in block")
    scale = 0.0 if asymptotic else 1.0
    eps = security.eps_partition
    mus = config.mus
    nz = [c.n_z for c in counts.classes]
    mz = [c.m_z for c in counts.classes]
    nx = [c.n_x for c in counts.classes]
    mx = [c.m_x for c in counts.classes]
    s_z0_l, s_z0_u, s_z1_l, _ = _basis_bounds(nz, mz, _basis_class_probs(counts, "Z", config), mus, eps, scale)
    _, s_x0_u, s_x1_l, v_x1_u = _basis_bounds(nx, mx, _basis_class_probs(counts, "X", config), mus, eps, scale)
    partial = DecoyBounds(s_z0_l, s_z0_u, s_z1_l, s_x0_u, s_x1_l, v_x1_u, 0.5)
    if s_x1_l > 0 and s_z1_l > 0:
        phi = phase_error_upper(partial, security)
    else:
        phi = 0.5
    return DecoyBounds(s_z0_l, s_z0_u, s_z1_l, s_x0_u, s_x1_l, v_x1_u, phi)


def secret_key_length(counts: ObservedCounts, bounds: DecoyBounds, security: SecurityParams,
                      config: ProtocolConfig) -> KeyRateReport:
    qz, qx = counts.qber_z, counts.qber_x
    leak = lambda_ec(counts.n_z, min(qz, 0.5), config.f_ec)
    lam_sec, lam_corr = lambda_terms(security)
    raw = bounds.s_z0_l + bounds.s_z1_l * (1.0 - binary_entropy(bounds.phi_z_u)) - leak - lam_sec - lam_corr
    l_bits = max(0, math.floor(raw))
    return KeyRateReport(
        l_bits=l_bits,
        skr_bps=l_bits / counts.duration_s,
        qber_z=qz,
        qber_x=qx,
        lambda_ec=leak,
        lambda_sec=lam_sec,
        lambda_corr=lam_corr,
        bounds=bounds,
        feasible=l_bits > 0,
        raw_l_bits=raw,
        n_z=counts.n_z,
        duration_s=counts.duration_s,
    )


def analyze_counts(counts: ObservedCounts, config: ProtocolConfig, security: SecurityParams | None = None,
                   *, asymptotic: bool = False) -> KeyRateReport:
    """Decoy bounds followed by the key length, for one block of counts."""
    security = security or SecurityParams.from_config(config)
    bounds = decoy_bounds(counts, config, security, asymptotic=asymptotic)
    return secret_key_length(counts, bounds, security, config)


def no_key_report(counts: ObservedCounts, config: ProtocolConfig,
                  security: SecurityParams | None = None) -> KeyRateReport:
    """Report for a block too sparse to bound; all event bounds are zero."""
    security = security or SecurityParams.from_config(config)
    return secret_key_length(counts, DecoyBounds(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5), security, config)


def block_counts(config: ProtocolConfig, link: LinkModel, max_block_time_s: float) -> ObservedCounts:
    """Expected counts for one block: as long as needed to reach ``n_z_block``, capped."""
    unit = expected_counts(config, link.channel, link.receiver, link.detector, 1.0)
    duration = config.n_z_block / unit.n_z if unit.n_z > 0 else max_block_time_s
    duration = min(duration, max_block_time_s)
    return unit.scaled(duration)


@dataclass(frozen=True)
class CurvePoint:
    attenuation_db: float
    skr_bps: float
    qber_z: float
    qber_x: float
    report: KeyRateReport


DEFAULT_MAX_BLOCK_TIME_S = 12 * 3600.0


def skr_vs_attenuation(config: ProtocolConfig, link: LinkModel, attenuations,
                       max_block_time_s: float = DEFAULT_MAX_BLOCK_TIME_S) -> list[CurvePoint]:
    attenuations = sorted(float(a) for a in attenuations)
    if not attenuations:
        raise ValueError("attenuation list must be nonempty")
    security = SecurityParams.from_config(config)
    curve = []
    for att in attenuations:
        counts = block_counts(config, link.with_attenuation(att), max_block_time_s)
        report = analyze_counts(counts, config, security)
        curve.append(CurvePoint(att, report.skr_bps, report.qber_z, report.qber_x, report))
    return curve


def curve_to_csv(curve: list[CurvePoint]) -> str:
    lines = ["attenuation_db,skr_bps,qber_z,qber_x"]
    lines += [f"{p.attenuation_db:g},{p.skr_bps:.6g},{p.qber_z:.6g},{p.qber_x:.6g}" for p in curve]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SearchSpace:
    """Closed box for the optimizer; a degenerate ``(v, v)`` range pins a parameter."""

    mu_signal: tuple[float, float] = (0.1, 1.0)
    mu_decoy: tuple[float, float] = (0.02, 0.5)
    p_mu1: tuple[float, float] = (0.3, 0.95)
    p_z_alice: tuple[float, float] = (0.5, 0.5)
    grid_points: int = 5
    min_step: float = 1e-3
    min_mu_gap: float = 1e-3

    def __post_init__(self):
        for name in ("mu_signal", "mu_decoy", "p_mu1", "p_z_alice"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"search range {name} is empty: {lo} > {hi}")
        if self.mu_decoy[0] <= 0 or self.p_mu1[0] <= 0 or self.p_mu1[1] >= 1:
            raise ConfigError("search ranges must stay inside parameter domains")
        if not 0 < self.p_z_alice[0] <= self.p_z_alice[1] < 1:
            raise ConfigError("p_z_alice range must lie in (0, 1)")
        if self.grid_points < 1:
            raise ConfigError("grid_points must be >= 1")

    NAMES = ("mu_signal", "mu_decoy", "p_mu1", "p_z_alice")

    def bounds(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.NAMES], dtype=float)


@dataclass(frozen=True)
class OptimizationResult:
    mu_signal: float
    mu_decoy: float
    p_mu1: float
    p_z_alice: float
    report: KeyRateReport | None
    positive_key: bool
    evaluations: int = field(default=0, compare=False)

    def to_dict(self) -> dict:
        return {
            "mu_signal": self.mu_signal,
            "mu_decoy": self.mu_decoy,
            "p_mu1": self.p_mu1,
            "p_z_alice": self.p_z_alice,
            "positive_key": self.positive_key,
            "report": self.report.to_dict() if self.report else None,
        }


def optimize_parameters(config: ProtocolConfig, link: LinkModel, search: SearchSpace | None = None,
                        max_block_time_s: float = DEFAULT_MAX_BLOCK_TIME_S) -> OptimizationResult:
    """Maximise the expected SKR over intensities, signal probability and Z bias.

    Coarse grid, then compass search with step halving. Deterministic.
    """
    search = search or SearchSpace()
    box = search.bounds()
    security = SecurityParams.from_config(config)
    cache: dict[tuple, tuple[float, KeyRateReport | None]] = {}

    def feasible(x) -> bool:
        return bool(np.all(x >= box[:, 0] - 1e-15) and np.all(x <= box[:, 1] + 1e-15)
                    and x[1] <= x[0] - search.min_mu_gap and 0 < x[2] < 1 and 0 < x[3] < 1)

    def evaluate(x) -> float:
        key = tuple(np.round(x, 12))
        if key not in cache:
            try:
                cfg = config.with_(mu_signal=x[0], mu_decoy=x[1], p_mu1=x[2], p_z_alice=x[3])
                report = analyze_counts(block_counts(cfg, link, max_block_time_s), cfg, security)
                cache[key] = (report.raw_l_bits / report.duration_s, report)
            except (ConfigError, ValueError):
                cache[key] = (-math.inf, None)
        return cache[key][0]

    axes = [np.linspace(lo, hi, search.grid_points) if hi > lo else np.array([lo]) for lo, hi in box]
    best_x, best_v = None, -math.inf
    for point in itertools.product(*axes):
        x = np.array(point)
        if not feasible(x):
            continue
        v = evaluate(x)
        if v > best_v:
            best_x, best_v = x, v
    if best_x is None:
        return OptimizationResult(*config.mus, config.p_mu1, config.p_z_alice, None, False, len(cache))

    span = box[:, 1] - box[:, 0]
    step = np.where(span > 0, span / max(search.grid_points - 1, 1) / 2, 0.0)
    while np.any(step > search.min_step * np.maximum(span, 1e-12)):
        improved = False
        for i in np.flatnonzero(step > 0):
            for sign in (1.0, -1.0):
                x = best_x.copy()
                x[i] = np.clip(x[i] + sign * step[i], box[i, 0], box[i, 1])
                if not feasible(x):
                    continue
                v = evaluate(x)
                if v > best_v:
                    best_x, best_v, improved = x, v, True
        if not improved:
            step = step / 2
    report = cache[tuple(np.round(best_x, 12))][1]
    return OptimizationResult(float(best_x[0]), float(best_x[1]), float(best_x[2]), float(best_x[3]),
                              report, bool(report is not None and report.feasible), len(cache))
