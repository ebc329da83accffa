"""Analytic coherence functions of a cw down-conversion source in the low-gain
regime, at infinite time resolution.

All correlation envelopes are real, nonnegative baseband functions. Carrier
frequencies are kept on :class:`SpdcParams` as metadata only; none of the
observables computed here depend on them.

Times are in seconds and rates in 1/s throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParameterError

#: Largest accepted ``pair_rate / bandwidth``. Neglected terms are O(ratio**2).
LOW_GAIN_LIMIT = 1e-2


@dataclass(frozen=True)
class SpdcParams:
    """Source physics of the down-converter.

    Parameters
    ----------
    pair_rate : float
        Pair generation rate R_SPDC in pairs/s. Derived from ``rate_per_mw``
        and ``pump_power`` when both are given and ``pair_rate`` is None.
    bandwidth : float
        Phase-matching bandwidth B_SPDC in Hz.
    rate_per_mw : float, optional
        Pairs/(s mW) pump calibration.
    pump_power : float, optional
        Pump power in mW.
    carriers : tuple, optional
        (omega_p, omega_s, omega_i) in rad/s. Metadata only.
    """

    pair_rate: Optional[float] = None
    bandwidth: float = 3e12
    rate_per_mw: Optional[float] = None
    pump_power: Optional[float] = None
    carriers: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        rate = self.pair_rate
        if rate is None:
            if self.rate_per_mw is None or self.pump_power is None:
                raise ParameterError("need pair_rate or both rate_per_mw and pump_power")
            rate = float(self.rate_per_mw) * float(self.pump_power)
            object.__setattr__(self, "pair_rate", rate)
        if not (np.isfinite(rate) and rate > 0):
            raise ParameterError(f"pair_rate must be > 0, got {rate!r}")
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ParameterError(f"bandwidth must be > 0, got {self.bandwidth!r}")
        if rate / self.bandwidth >= LOW_GAIN_LIMIT:
            raise ParameterError(
                f"pair_rate/bandwidth = {rate / self.bandwidth:.3g} is outside the "
                f"low-gain regime (< {LOW_GAIN_LIMIT:g})"
            )

    @classmethod
    def from_pump(cls, rate_per_mw, pump_power, bandwidth=3e12):
        return cls(pair_rate=None, bandwidth=bandwidth, rate_per_mw=rate_per_mw, pump_power=pump_power)

    @property
    def coherence_time(self):
        """1/B, the width of the signal-idler correlation."""
        return 1.0 / self.bandwidth

    def at_power(self, pump_power):
        """Same source at another pump power; needs ``rate_per_mw``."""
        if self.rate_per_mw is None:
            raise ParameterError("rate_per_mw is required to rescale the pump power")
        return SpdcParams(None, self.bandwidth, self.rate_per_mw, pump_power, self.carriers)


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def auto_corr(p: SpdcParams, tau):
    """Triangular auto-correlation R(tau) = R (1 - |tau| B) on |tau| <= 1/B."""
    tau = np.abs(np.asarray(tau, dtype=float))
    out = p.pair_rate * np.clip(1.0 - tau * p.bandwidth, 0.0, None)
    return _scalar_or_array(out)


def cross_corr(p: SpdcParams, tau):
    """Baseband cross-correlation envelope |C(tau)| (rectangle of width 1/B)."""
    tau = np.abs(np.asarray(tau, dtype=float))
    out = np.where(tau < 0.5 / p.bandwidth, math.sqrt(p.pair_rate * p.bandwidth), 0.0)
    return _scalar_or_array(out)


def cross_corr_sq(p: SpdcParams, tau):
    """|C(tau)|^2: R*B inside |tau| < 1/(2B), zero outside. Its area is R."""
    tau = np.abs(np.asarray(tau, dtype=float))
    out = np.where(tau < 0.5 / p.bandwidth, p.pair_rate * p.bandwidth, 0.0)
    return _scalar_or_array(out)


def g2_si(p: SpdcParams, tau):
    """Signal-idler coherence 1 + |C(tau)|^2 / R(0)^2."""
    out = 1.0 + np.asarray(cross_corr_sq(p, tau)) / p.pair_rate**2
    return _scalar_or_array(out)


def pair_rate_fn(p: SpdcParams, tau):
    """Signal-idler coincidence rate P_si(tau) = R(0)^2 + |C(tau)|^2."""
    out = p.pair_rate**2 + np.asarray(cross_corr_sq(p, tau))
    return _scalar_or_array(out)


def triple_rate_fn(p: SpdcParams, t1, t2, ti):
    """Rate of signal detections at t1 and t2 together with an idler at ti.

    Six-operator moment reduced to second-order moments::

        R(0)[R(0)^2 + R(t12)^2 + C(t1i)^2 + C(t2i)^2] + 2 C(t1i) C(t2i) R(t12)
    """
    t1, t2, ti = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (t1, t2, ti)))
    r0 = p.pair_rate
    r12 = np.asarray(auto_corr(p, t1 - t2))
    c1 = np.asarray(cross_corr(p, t1 - ti))
    c2 = np.asarray(cross_corr(p, t2 - ti))
    out = r0 * (r0**2 + r12**2 + c1**2 + c2**2) + 2.0 * c1 * c2 * r12
    return _scalar_or_array(out)


def g2_cond_at_zero(p: SpdcParams):
    """Heralded coherence at the trigger time, (2/g)(2 - 1/g) with g = g_si(0)."""
    g = 1.0 + p.bandwidth / p.pair_rate
    return (2.0 / g) * (2.0 - 1.0 / g)


def g2_cond(p: SpdcParams, t1, t2, ti):
    """Signal coherence g_c(t1, t2 | ti) conditioned on an idler count at ti."""
    t1, t2, ti = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (t1, t2, ti)))
    r0 = p.pair_rate
    g1 = np.asarray(g2_si(p, t1 - ti))
    g2 = np.asarray(g2_si(p, t2 - ti))
    r12 = np.asarray(auto_corr(p, t1 - t2))
    c1 = np.asarray(cross_corr(p, t1 - ti))
    c2 = np.asarray(cross_corr(p, t2 - ti))
    gg = g1 * g2
    out = 1.0 / g1 + 1.0 / g2 + (r12**2 / r0**2 - 1.0) / gg + 2.0 * c1 * c2 * r12 / (r0**3 * gg)
    # Route the trigger-time point through the closed form so both agree bit for bit.
    at_trigger = (t1 == ti) & (t2 == ti)
    if np.any(at_trigger):
        out = np.where(at_trigger, g2_cond_at_zero(p), out)
    return _scalar_or_array(out)
