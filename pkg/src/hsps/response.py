"""Time-averaged (measurable) coherence quantities.

The exact source rates from :mod:`hsps.model` are smoothed by the detectors'
uniform timing jitter and averaged over the coincidence window. Two evaluation
modes are provided:

``"delta"``
    The sub-picosecond source features are replaced by delta functions of the
    same area: |C|^2 -> R delta, the non-constant part of R(tau)^2 ->
    R^2 (2/(3B)) delta, and the 2-D cross term -> 4R^2/(3B) delta delta. Every
    remaining integral is a product of piecewise-linear detector/window kernels
    and is evaluated exactly with Gauss-Legendre rules between breakpoints.
``"exact"``
    The true rectangle/triangle source shapes are kept and integrated against
    the same kernels with breakpoint-aligned trapezoid rules, refined by step
    doubling with a Richardson check. Slow; used to validate ``"delta"``.

Detector efficiency and dead time never enter here: all quantities are
normalized ratios.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import model
from .errors import ParameterError
from .model import SpdcParams

MODES = ("delta", "exact")
JITTER_ZERO = 1e-18

_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)


@dataclass(frozen=True)
class DetectorModel:
    """Timing and counting characteristics of one detection channel.

    ``jitter`` is the half-width tau_d of the uniform timing error; the
    remaining fields only matter to the simulator.
    """

    jitter: float = 350e-12
    efficiency: float = 1.0
    dead_time: float = 0.0
    tag_resolution: float = 156.25e-12

    def __post_init__(self):
        if not self.jitter >= 0:
            raise ParameterError(f"jitter must be >= 0, got {self.jitter!r}")
        if self.jitter < JITTER_ZERO:
            # sub-attosecond jitter is indistinguishable from none and would underflow the kernels
            object.__setattr__(self, "jitter", 0.0)
        if not 0 < self.efficiency <= 1:
            raise ParameterError(f"efficiency must be in (0, 1], got {self.efficiency!r}")
        if not self.dead_time >= 0:
            raise ParameterError(f"dead_time must be >= 0, got {self.dead_time!r}")
        if not self.tag_resolution > 0:
            raise ParameterError(f"tag_resolution must be > 0, got {self.tag_resolution!r}")


@dataclass(frozen=True)
class CoincidenceConfig:
    """Coincidence window of full width ``2 * tau_coin``."""

    tau_coin: float

    def __post_init__(self):
        if not self.tau_coin > 0:
            raise ParameterError(f"tau_coin must be > 0, got {self.tau_coin!r}")
        if not 0.25e-9 <= self.tau_coin <= 10e-9:
            warnings.warn(
                f"coincidence half-width {self.tau_coin * 1e9:.3g} ns is outside the "
                "0.25-10 ns range of typical apparatus",
                stacklevel=2,
            )

    @property
    def width(self):
        return 2.0 * self.tau_coin


# ---------------------------------------------------------------------------
# Elementary kernels (all piecewise polynomial)


def jitter_kernel(d: DetectorModel, t):
    """Uniform detection-time density 1/(2 tau_d) on |t| <= tau_d.

    For ``tau_d == 0`` the kernel is a delta function; it evaluates to zero
    everywhere here and every consumer treats that case as the identity.
    """
    t = np.asarray(t, dtype=float)
    if d.jitter == 0:
        out = np.zeros_like(t)
    else:
        out = np.where(np.abs(t) <= d.jitter, 0.5 / d.jitter, 0.0)
    return float(out) if out.ndim == 0 else out


def _tri_pdf(x, a):
    """Triangle density of half-width ``a`` (a > 0)."""
    return np.clip(a - np.abs(x), 0.0, None) / (a * a)


def _tri_cdf(x, a):
    x = np.asarray(x, dtype=float)
    if a == 0:
        return np.heaviside(x, 0.5)
    y = np.clip(x, -a, a)
    lower = (y + a) ** 2 / (2 * a * a)
    upper = 1.0 - (a - y) ** 2 / (2 * a * a)
    return np.where(y <= 0, lower, upper)


def _tri_cdf_integral(y, a):
    """Antiderivative of :func:`_tri_cdf` that vanishes at -inf."""
    y = np.asarray(y, dtype=float)
    if a == 0:
        return np.maximum(y, 0.0)
    lower = np.clip(y + a, 0.0, None) ** 3 / (6 * a * a)
    upper = y + np.clip(a - y, 0.0, None) ** 3 / (6 * a * a)
    return np.where(y <= 0, lower, upper)


def window_density(x, tau_d, tau_c, quantum=0.0):
    """Density of (window offset + jitter difference) at ``x``.

    This is the boxcar of half-width ``tau_c`` convolved with the triangle of
    half-width ``2 tau_d``; it integrates to one. A nonzero ``quantum`` adds
    the effect of flooring both timestamps to a grid of that spacing: counting
    integer tick delays inside the window is the same as counting true delays
    against the window smoothed by a uniform kernel one tick wide.
    """
    a = 2.0 * tau_d if tau_d >= JITTER_ZERO else 0.0
    x = np.asarray(x, dtype=float)
    if quantum < 1e-6 * (tau_c + a):  # negligible, and the difference formula would cancel badly
        return (_tri_cdf(x + tau_c, a) - _tri_cdf(x - tau_c, a)) / (2.0 * tau_c)
    h = 0.5 * quantum
    big = _tri_cdf_integral(x + tau_c + h, a) - _tri_cdf_integral(x + tau_c - h, a)
    small = _tri_cdf_integral(x - tau_c + h, a) - _tri_cdf_integral(x - tau_c - h, a)
    return (big - small) / (2.0 * tau_c * quantum)


def _trapezoid_density(s, tau_d, tau_c):
    """Density of window offset + one detector's jitter."""
    s = np.asarray(s, dtype=float)
    if tau_d == 0:
        return np.where((s >= -tau_c) & (s < tau_c), 0.5 / tau_c, 0.0)
    overlap = np.minimum(s + tau_d, tau_c) - np.maximum(s - tau_d, -tau_c)
    return np.clip(overlap, 0.0, None) / (4.0 * tau_c * tau_d)


def _piecewise_gauss(fn, lo, hi, breaks):
    """Integrate ``fn`` row-wise over [lo, hi] split at ``breaks``.

    ``lo``/``hi`` have shape (n,), ``breaks`` shape (n, k). ``fn`` receives
    nodes of shape (n, k+1, 4) and must return values of the same shape.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    inner = np.clip(breaks, lo[:, None], hi[:, None])
    edges = np.sort(np.concatenate([lo[:, None], inner, hi[:, None]], axis=1), axis=1)
    mid = 0.5 * (edges[:, 1:] + edges[:, :-1])
    half = 0.5 * (edges[:, 1:] - edges[:, :-1])
    nodes = mid[..., None] + half[..., None] * _GL_X
    vals = fn(nodes)
    return np.sum(half[..., None] * _GL_W * vals, axis=(1, 2))


def _pair_kernel_at_origin(tau, tau_d, tau_c):
    """Joint density of (t_s1 - t_i, t_s2 - t_i) at (0, 0) after jitter and windows.

    The first window is centred at 0 and the second at ``tau``.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tau_d == 0:
        return _trapezoid_density(0.0, 0.0, tau_c) * _trapezoid_density(-tau, 0.0, tau_c)
    corners = np.array([-tau_c - tau_d, -tau_c + tau_d, tau_c - tau_d, tau_c + tau_d])
    breaks = np.concatenate([np.broadcast_to(corners, (tau.size, 4)), tau[:, None] + corners], axis=1)
    t = tau[:, None, None]

    def integrand(b):
        return (0.5 / tau_d) * _trapezoid_density(b, tau_d, tau_c) * _trapezoid_density(b - t, tau_d, tau_c)

    n = tau.size
    return _piecewise_gauss(integrand, np.full(n, -tau_d), np.full(n, tau_d), breaks)


def _pair_kernel(x, y, tau, tau_d, tau_c):
    """Joint density of (t_s1 - t_i, t_s2 - t_i) at arbitrary (x, y)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if tau_d == 0:
        return _trapezoid_density(x, 0.0, tau_c) * _trapezoid_density(y - tau, 0.0, tau_c)
    corners = np.array([-tau_c - tau_d, -tau_c + tau_d, tau_c - tau_d, tau_c + tau_d])
    breaks = np.concatenate([corners - x[:, None], corners + tau - y[:, None]], axis=1)
    xx = x[:, None, None]
    yy = y[:, None, None]

    def integrand(b):
        return (
            (0.5 / tau_d)
            * _trapezoid_density(xx + b, tau_d, tau_c)
            * _trapezoid_density(yy + b - tau, tau_d, tau_c)
        )

    n = x.size
    return _piecewise_gauss(integrand, np.full(n, -tau_d), np.full(n, tau_d), breaks)


def _ridge_kernel(s, tau_d, tau_c):
    """Density of t_s1 - t_s2 offsets: window-difference triangle * jitter triangle."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    a = 2.0 * tau_c
    if tau_d == 0:
        return _tri_pdf(s, a)
    j = 2.0 * tau_d
    breaks = np.stack([np.zeros_like(s), s - j, s, s + j], axis=1)
    ss = s[:, None, None]

    def integrand(y):
        return _tri_pdf(y, a) * _tri_pdf(ss - y, j)

    n = s.size
    return _piecewise_gauss(integrand, np.full(n, -a), np.full(n, a), breaks)


# ---------------------------------------------------------------------------
# Exact-mode quadrature


def _trapezoid_richardson(fn, edges, step, rtol=1e-10, max_doublings=8):
    """Composite trapezoid over consecutive ``edges`` with step doubling.

    Returns the Richardson-extrapolated integral. Raises if the step-doubling
    sequence does not settle within ``max_doublings``.
    """
    edges = np.unique(np.asarray(edges, dtype=float))
    lengths = np.diff(edges)
    keep = lengths > 0
    if not np.any(keep):
        return 0.0
    starts, lengths = edges[:-1][keep], lengths[keep]

    def composite(scale):
        total = 0.0
        for a, length in zip(starts, lengths):
            n = max(2, int(math.ceil(length / step))) * scale
            xs = np.linspace(a, a + length, n + 1)
            at = xs.copy()
            at[0] += 1e-9 * length
            at[-1] -= 1e-9 * length
            total += np.trapezoid(fn(at), xs)
        return total

    prev_t = composite(1)
    scale = 2
    cur_t = composite(scale)
    prev_e = (4.0 * cur_t - prev_t) / 3.0
    for _ in range(max_doublings):
        scale *= 2
        prev_t, cur_t = cur_t, composite(scale)
        extrap = (4.0 * cur_t - prev_t) / 3.0
        if abs(extrap - prev_e) <= rtol * max(abs(extrap), 1e-300):
            return extrap
        prev_e = extrap
    warnings.warn("exact-mode quadrature did not reach the requested tolerance", RuntimeWarning, stacklevel=3)
    return extrap


def _exact_step(p, d, c):
    scales = [1.0 / p.bandwidth, c.tau_coin]
    if d.jitter > 0:
        scales.append(d.jitter)
    return min(scales) / 8.0


def _window_breaks(tau_d, tau_c):
    return np.array([-tau_c - 2 * tau_d, -tau_c, -tau_c + 2 * tau_d, tau_c - 2 * tau_d, tau_c, tau_c + 2 * tau_d])


def _excess_pair_exact(p, d, c, tau, q=0.0):
    """Window- and jitter-averaged |C|^2 at delay ``tau`` with the true rectangle."""
    half = 0.5 / p.bandwidth
    step = _exact_step(p, d, c)
    kink = _window_breaks(d.jitter, c.tau_coin)
    if q:
        kink = np.concatenate([kink - 0.5 * q, kink + 0.5 * q])
    out = np.empty(tau.size)
    for k, t in enumerate(tau):
        edges = np.concatenate([[-half, half], np.clip(t + kink, -half, half)])

        def fn(x, t=t):
            return p.pair_rate * p.bandwidth * window_density(x - t, d.jitter, c.tau_coin, q)

        out[k] = _trapezoid_richardson(fn, edges, step)
    return out


def _ridge_exact(p, d, c, tau):
    width = 1.0 / p.bandwidth
    step = _exact_step(p, d, c)
    a, j = 2 * c.tau_coin, 2 * d.jitter
    kink = np.array([-a - j, -a, -a + j, -j, 0.0, j, a - j, a, a + j])
    out = np.empty(tau.size)
    for k, t in enumerate(tau):
        edges = np.concatenate([[-width, 0.0, width], np.clip(t - kink, -width, width)])

        def fn(z, t=t):
            return np.asarray(model.auto_corr(p, z)) ** 2 * _ridge_kernel(t - z, d.jitter, c.tau_coin)

        out[k] = p.pair_rate * _trapezoid_richardson(fn, edges, step)
    return out


def _composite_nodes(edges, m):
    """Nodes and trapezoid weights with ``m`` equal panels between consecutive edges.

    Segment end nodes are pulled a hair inside their segment, so a function
    that jumps at an edge is sampled from the correct side.
    """
    edges = np.unique(edges)
    xs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        x = np.linspace(a, b, m + 1)
        x[0] += 1e-9 * (b - a)
        x[-1] -= 1e-9 * (b - a)
        w = np.full(m + 1, (b - a) / m)
        w[0] = w[-1] = 0.5 * (b - a) / m
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def _cross_exact(p, d, c, tau, rtol=1e-8):
    """2-D trapezoid of 2 C(x) C(y) R(x - y) against the pair kernel.

    Panel edges follow the kinks of the pair kernel on each axis so that
    windows much narrower than the source correlation time stay resolved.
    """
    half = 0.5 / p.bandwidth
    tc, td = c.tau_coin, d.jitter
    corners = np.unique([-tc - td, -tc + td, tc - td, tc + td])
    out = np.empty(tau.size)
    for k, t in enumerate(tau):
        ex = np.concatenate([[-half, 0.0, half], np.clip(corners, -half, half)])
        ey = np.concatenate([[-half, 0.0, half], np.clip(t + corners, -half, half)])

        def integral(m):
            xs, wx = _composite_nodes(ex, m)
            ys, wy = _composite_nodes(ey, m)
            X, Y = np.meshgrid(xs, ys, indexing="ij")
            src = 2.0 * p.pair_rate * p.bandwidth * np.asarray(model.auto_corr(p, X - Y))
            kern = _pair_kernel(X.ravel(), Y.ravel(), t, td, tc).reshape(X.shape)
            return float(np.einsum("i,j,ij->", wx, wy, src * kern))

        m = 4
        prev_t, cur_t = integral(m), integral(2 * m)
        prev_e = (4.0 * cur_t - prev_t) / 3.0
        m *= 2
        for _ in range(5):
            m *= 2
            prev_t, cur_t = cur_t, integral(m)
            extrap = (4.0 * cur_t - prev_t) / 3.0
            if abs(extrap - prev_e) <= rtol * max(abs(extrap), 1e-300):
                break
            prev_e = extrap
        out[k] = extrap
    return out


# ---------------------------------------------------------------------------
# Public quantities


def _quantum(d, quantize):
    return d.tag_resolution if quantize else 0.0


def _check_mode(mode):
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")


def _as_array(tau):
    tau = np.asarray(tau, dtype=float)
    return tau, np.atleast_1d(tau)


def _shape_like(orig, values):
    return float(values[0]) if orig.ndim == 0 else values.reshape(orig.shape)


def pbar_si(p: SpdcParams, d: DetectorModel, tau, mode="delta"):
    """Jitter-smoothed signal-idler coincidence rate (before window averaging)."""
    _check_mode(mode)
    orig, tau = _as_array(tau)
    if d.jitter == 0:
        return model.pair_rate_fn(p, orig)
    r = p.pair_rate
    if mode == "delta":
        excess = r * _tri_pdf(tau, 2.0 * d.jitter)
    else:
        half = 0.5 / p.bandwidth
        j = 2.0 * d.jitter
        excess = np.empty(tau.size)
        for k, t in enumerate(tau):
            edges = [-half, half, *np.clip([t - j, t, t + j], -half, half)]
            excess[k] = _trapezoid_richardson(
                lambda x, t=t: r * p.bandwidth * _tri_pdf(t - x, j), edges, min(1.0 / p.bandwidth, d.jitter) / 8.0
            )
    return _shape_like(orig, r * r + excess)


def n_si(p: SpdcParams, d: DetectorModel, c: CoincidenceConfig, tau, mode="delta", quantize=False):
    """Window-averaged coincidence rate N_si(tau), in 1/s^2.

    ``quantize=True`` includes flooring of timestamps to ``d.tag_resolution``,
    as happens in real time-tag data; the idealised prediction leaves it out.
    """
    _check_mode(mode)
    orig, tau = _as_array(tau)
    r = p.pair_rate
    q = _quantum(d, quantize)
    if mode == "delta":
        excess = r * window_density(tau, d.jitter, c.tau_coin, q)
    else:
        excess = _excess_pair_exact(p, d, c, tau, q)
    return _shape_like(orig, r * r + excess)


def g2bar_si(p: SpdcParams, d: DetectorModel, c: CoincidenceConfig, tau, mode="delta", quantize=False):
    """Time-averaged signal-idler coherence N_si(tau) / R(0)^2."""
    orig, tau = _as_array(tau)
    return _shape_like(orig, np.atleast_1d(n_si(p, d, c, tau, mode, quantize)) / p.pair_rate**2)


def n2_si_terms(p: SpdcParams, d: DetectorModel, c: CoincidenceConfig, tau, mode="delta", quantize=False):
    """Separate contributions to the windowed triple rate N_si^(2)(tau).

    Returns a dict with ``floor`` (R^3), ``walls`` (herald correlated with one
    signal detector), ``ridge`` (thermal signal-signal bunching) and
    ``cross`` (all three correlated); each an array over ``tau``. With
    ``quantize`` only the walls get the tick-flooring kernel; the ridge and
    cross terms are three orders of magnitude smaller at realistic settings.
    """
    _check_mode(mode)
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    r, b = p.pair_rate, p.bandwidth
    q = _quantum(d, quantize)
    if mode == "delta":
        f0 = window_density(0.0, d.jitter, c.tau_coin, q)
        walls = r * r * (f0 + window_density(tau, d.jitter, c.tau_coin, q))
        ridge = r**3 * (2.0 / (3.0 * b)) * _ridge_kernel(tau, d.jitter, c.tau_coin)
        cross = (4.0 * r * r / (3.0 * b)) * _pair_kernel_at_origin(tau, d.jitter, c.tau_coin)
    else:
        ex0 = _excess_pair_exact(p, d, c, np.zeros(1), q)[0]
        walls = r * (ex0 + _excess_pair_exact(p, d, c, tau, q))
        ridge = _ridge_exact(p, d, c, tau)
        cross = _cross_exact(p, d, c, tau)
    return {"floor": np.full(tau.shape, r**3), "walls": walls, "ridge": ridge, "cross": cross}


def n2_si(p: SpdcParams, d: DetectorModel, c: CoincidenceConfig, tau, mode="delta", quantize=False):
    """Windowed triple-coincidence rate: idler at 0, s1 near 0, s2 near ``tau``."""
    orig = np.asarray(tau, dtype=float)
    terms = n2_si_terms(p, d, c, orig, mode, quantize)
    total = terms["floor"] + terms["walls"] + terms["ridge"] + terms["cross"]
    return _shape_like(orig, total)


def g2bar_c(p: SpdcParams, d: DetectorModel, c: CoincidenceConfig, tau, mode="delta", quantize=False):
    """Time-averaged heralded coherence N2(tau) R(0) / (N_si(0) N_si(tau))."""
    orig = np.asarray(tau, dtype=float)
    tau = np.atleast_1d(orig)
    n2 = np.atleast_1d(n2_si(p, d, c, tau, mode, quantize))
    n0 = n_si(p, d, c, 0.0, mode, quantize)
    nt = np.atleast_1d(n_si(p, d, c, tau, mode, quantize))
    return _shape_like(orig, n2 * p.pair_rate / (n0 * nt))


def g2bar_c_zero_sweep(p: SpdcParams, d: DetectorModel, c: CoincidenceConfig = None, *,
                       powers=None, windows=None, mode="delta", quantize=False):
    """Minimum of the heralded coherence over a pump-power or window grid.

    Exactly one of ``powers`` (mW; needs ``p.rate_per_mw``) or ``windows``
    (full widths 2 tau_coin, in seconds) must be given. Returns an (n, 2) array
    of (x, g2bar_c(0)). A pump power of zero maps to 0, the zero-rate limit.
    """
    if (powers is None) == (windows is None):
        raise ParameterError("give exactly one of powers or windows")
    grid = np.asarray(powers if powers is not None else windows, dtype=float)
    if grid.size == 0:
        raise ParameterError("empty sweep grid")
    out = np.empty((grid.size, 2))
    out[:, 0] = grid
    for k, x in enumerate(grid):
        if powers is not None:
            if c is None:
                raise ParameterError("a power sweep needs a CoincidenceConfig")
            if x == 0:
                out[k, 1] = 0.0
                continue
            out[k, 1] = g2bar_c(p.at_power(x), d, c, 0.0, mode, quantize)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cw = CoincidenceConfig(0.5 * x)
            out[k, 1] = g2bar_c(p, d, cw, 0.0, mode, quantize)
    return out


def dip_width(tau, values):
    """Width of the region around the minimum where values < (1 + min) / 2.

    Crossings are located by linear interpolation on the supplied grid.
    """
    tau = np.asarray(tau, dtype=float)
    values = np.asarray(values, dtype=float)
    k0 = int(np.argmin(values))
    level = 0.5 * (1.0 + values[k0])
    below = values < level

    def crossing(step):
        k = k0
        while 0 <= k + step < len(values) and below[k + step]:
            k += step
        if not 0 <= k + step < len(values):
            raise ParameterError("dip does not recover above half depth inside the grid")
        j = k + step
        frac = (level - values[k]) / (values[j] - values[k])
        return tau[k] + frac * (tau[j] - tau[k])

    return crossing(1) - crossing(-1)
