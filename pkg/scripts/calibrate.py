"""Fit the free model parameters to the reference anchor observations.

Anchors: 855 Hz Z-sifted rate at 45 dB (1e7 detections in 3 h 15 min), PIC key
rates of 637.8 bps at 40 dB and 12.2 bps at 45 dB, fiber key rate of 110 bps at
40 dB with no key at 45 dB and at least a 2.2x PIC advantage at 10 dB.

Intensities, signal probability and the encoder extinction error stay at their
nominal values; the fit adjusts the detector gate width, the Z-path loss, the
fiber interferometer visibility and the PLL background rate. With the fiber
visibility pinned by the 10 dB advantage, the fiber rate at 40 dB cannot reach
110 bps in this model; the PLL background is set to the smallest value that
ends the fiber key by 41 dB. Prints the values shipped in
``tbqkd/profiles.py``.

    python scripts/calibrate.py
"""
from __future__ import annotations

import math

from scipy.optimize import brentq

from tbqkd.finite_key import analyze_counts, block_counts
from tbqkd.link import ChannelModel, DetectorModel, LinkModel, ReceiverModel, Variant, expected_counts
from tbqkd.protocol import ProtocolConfig

ANCHOR_RATE_HZ = 1e7 / (3 * 3600 + 15 * 60)
PIC_40, PIC_45, FIBER_40, ADVANTAGE_10 = 637.8, 12.2, 110.0, 2.2
PIC_IMZI_LOSS_DB = 2.75
FIBER_IMZI_LOSS_DB = 1.0
ADVANTAGE_MARGIN = 1.0227
FIBER_CUTOFF_DB = 41.0


def skr(cfg, link, att):
    return analyze_counts(block_counts(cfg, link.with_attenuation(att), 12 * 3600), cfg).skr_bps


def z_loss_for_anchor(cfg, det):
    def gap(loss):
        rec = ReceiverModel(z_path_loss_db=loss)
        return expected_counts(cfg, ChannelModel(45.0), rec, det, 1.0).n_z - ANCHOR_RATE_HZ
    return brentq(gap, 0.0, 20.0, xtol=1e-6)


def pic_link(cfg, gate):
    det = DetectorModel(gate_width_ps=gate)
    rec = ReceiverModel(Variant.PIC, z_loss_for_anchor(cfg, det), PIC_IMZI_LOSS_DB, 0.96)
    return LinkModel(ChannelModel(0.0), rec, det)


def fit_pic(cfg):
    def loss(gate):
        link = pic_link(cfg, int(round(gate)))
        a, b = skr(cfg, link, 40), skr(cfg, link, 45)
        if b <= 0:
            return 1e3 + gate
        return math.log(a / PIC_40) ** 2 + math.log(b / PIC_45) ** 2
    best = min(range(100, 401, 5), key=loss)
    return pic_link(cfg, best)


def fiber_link(pic, vis, pll):
    rec = ReceiverModel(Variant.FIBER_PLL, pic.receiver.z_path_loss_db, FIBER_IMZI_LOSS_DB, vis, pll)
    return LinkModel(ChannelModel(0.0), rec, pic.detector)


def fit_fiber(cfg, pic):
    pic_10 = skr(cfg, pic, 10)

    def vis_for_advantage(target):
        return brentq(lambda v: pic_10 / max(skr(cfg, fiber_link(pic, v, 0.0), 10), 1e-9) - target, 0.85, 0.96,
                      xtol=1e-6)

    # a little above the required advantage so rounding cannot undercut it
    vis = round(vis_for_advantage(ADVANTAGE_10 * ADVANTAGE_MARGIN), 4)
    # smallest PLL background (10 Hz grid) that ends the fiber key by FIBER_CUTOFF_DB
    pll = 0.0
    while skr(cfg, fiber_link(pic, vis, pll), FIBER_CUTOFF_DB) > 0:
        pll += 10.0
    return fiber_link(pic, vis, pll)


def main():
    cfg = ProtocolConfig()
    pic = fit_pic(cfg)
    fiber = fit_fiber(cfg, pic)
    rate = expected_counts(cfg, ChannelModel(45.0), pic.receiver, pic.detector, 1.0).n_z
    print(f"gate_width_ps = {pic.detector.gate_width_ps}")
    print(f"z_path_loss_db = {pic.receiver.z_path_loss_db:.6f}")
    print(f"fiber visibility = {fiber.receiver.visibility}")
    print(f"fiber pll_noise_rate_hz = {fiber.receiver.pll_noise_rate_hz}")
    print(f"Z rate at 45 dB: {rate:.1f} Hz (anchor {ANCHOR_RATE_HZ:.1f})")
    for att in (10, 40, 45):
        p, f = skr(cfg, pic, att), skr(cfg, fiber, att)
        print(f"{att:>3} dB  PIC {p:12.2f} bps  fiber {f:12.2f} bps  ratio {p / f if f else math.inf:.2f}")


if __name__ == "__main__":
    main()
