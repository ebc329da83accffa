"""Discrete-mode description of the down-converted field.

The field is quantised on a lattice of M = 2WT + 1 frequency modes spaced by
1/T (half-bandwidth W) and, dually, M time bins spaced by 1/(2W). Each
signal/idler frequency pair is a two-mode squeezed vacuum with Bogoliubov
coefficients (mu_n, nu_n). Time-bin correlations follow from discrete
Fourier sums and the heralded coherence between signal bins k and l, given an
idler click in bin 0, has closed forms in those correlations.

Two independent checks live here as well: a generic Gaussian moment expander
(sum over all pairings) and a brute-force truncated Fock-space computation of
the heralded coherence for tiny lattices.

Conventions for the time-bin operators::

    a_k = M^-1/2 sum_m a_m exp(-2 pi i k m / M)      (signal)
    b_k = M^-1/2 sum_m b_m exp(+2 pi i k m / M)      (idler)

so that ``<a_k a_l^dag> = R_{l-k}`` and ``<a_k b_0> = C_k`` with

    R_n = M^-1 sum_m (1 + |nu_m|^2) exp(2 pi i n m / M)
    C_n = M^-1 sum_m nu_m mu_m exp(-2 pi i n m / M)
"""
from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import model
from .errors import ParameterError
from .model import SpdcParams

MIN_TW = 50
WARN_TW = 500


def _is_prime(n):
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    r = int(math.isqrt(n))
    return all(n % f for f in range(3, r + 1, 2))


def next_prime(n):
    n = max(int(n), 2)
    while not _is_prime(n):
        n += 1
    return n


@dataclass(frozen=True)
class DiscreteGrid:
    """Mode lattice with time span ``T`` (s) and half-bandwidth ``W`` (Hz)."""

    T: float
    W: float

    def __post_init__(self):
        if not (self.T > 0 and self.W > 0):
            raise ParameterError("T and W must be positive")
        m = 2.0 * self.W * self.T + 1.0
        if abs(m - round(m)) > 1e-6 * m:
            raise ParameterError(f"2WT + 1 = {m!r} is not an integer")
        mi = int(round(m))
        if mi < 3 or not _is_prime(mi):
            raise ParameterError(f"M = {mi} must be an odd prime >= 3; see suggest_grid()")
        tw = self.T * self.W
        if tw < MIN_TW:
            raise ParameterError(f"T*W = {tw:.3g} is below the minimum of {MIN_TW}")
        if tw < WARN_TW:
            warnings.warn(f"T*W = {tw:.3g} < {WARN_TW}: discretisation error may exceed 1e-3", stacklevel=2)

    @property
    def M(self):
        return int(round(2.0 * self.W * self.T + 1.0))

    @property
    def df(self):
        return 1.0 / self.T

    @property
    def dt(self):
        return 0.5 / self.W

    @property
    def modes(self):
        h = (self.M - 1) // 2
        return np.arange(-h, h + 1)


def suggest_grid(W, T_min):
    """Smallest valid lattice with half-bandwidth ``W`` and ``T >= T_min``.

    ``M`` is the next prime at or above ``2 W T_min + 1`` and ``T`` is then
    ``(M - 1) / (2 W)``.
    """
    if not (W > 0 and T_min > 0):
        raise ParameterError("W and T_min must be positive")
    m = next_prime(int(math.ceil(2.0 * W * T_min + 1.0)))
    if m == 2:
        m = 3
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return DiscreteGrid((m - 1) / (2.0 * W), W)


@dataclass(frozen=True)
class DiscreteSpectrum:
    """Bogoliubov coefficients per frequency mode, ordered like ``grid.modes``."""

    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=complex)
        nu = np.asarray(self.nu, dtype=complex)
        if mu.shape != nu.shape or mu.ndim != 1 or len(mu) % 2 == 0:
            raise ParameterError("mu and nu must be 1-D arrays of equal odd length")
        if not np.allclose(np.abs(mu) ** 2 - np.abs(nu) ** 2, 1.0, rtol=0, atol=1e-12):
            raise ParameterError("|mu|^2 - |nu|^2 must equal 1 for every mode")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)

    @classmethod
    def from_nu(cls, nu):
        """Spectrum with real positive mu fixed by the Bogoliubov constraint."""
        nu = np.asarray(nu, dtype=complex)
        return cls(np.sqrt(1.0 + np.abs(nu) ** 2).astype(complex), nu)

    @property
    def M(self):
        return len(self.nu)


def build_spectrum(p: SpdcParams, g: DiscreteGrid) -> DiscreteSpectrum:
    """Low-gain sinc spectrum ``nu_n = sqrt(R/B) sinc(pi f_n / B)`` sampled at f_n = n/T."""
    if g.W < p.bandwidth:
        raise ParameterError(f"W = {g.W:g} Hz must be at least the bandwidth {p.bandwidth:g} Hz")
    f = g.modes / g.T
    nu = math.sqrt(p.pair_rate / p.bandwidth) * np.sinc(f / p.bandwidth)
    return DiscreteSpectrum.from_nu(nu)


@dataclass(frozen=True)
class TemporalCorrelations:
    """Time-bin correlations ``R_n`` and ``C_n`` for offsets n = 0..M-1 (mod M)."""

    R: np.ndarray
    C: np.ndarray

    @property
    def M(self):
        return len(self.R)

    @property
    def R0(self):
        return float(self.R[0].real)

    @property
    def Q2(self):
        """Q^2 = R_0 (R_0 - 1)^2."""
        r0 = self.R0
        return r0 * (r0 - 1.0) ** 2

    def R_at(self, n):
        return self.R[np.mod(n, self.M)]

    def C_at(self, n):
        return self.C[np.mod(n, self.M)]


def temporal_correlations(s: DiscreteSpectrum, g: DiscreteGrid = None) -> TemporalCorrelations:
    """Discrete Fourier sums over the modes.

    ``g`` is only used to check that the spectrum matches the lattice.
    """
    if g is not None and g.M != s.M:
        raise ParameterError("spectrum and grid have different mode counts")
    m_count = s.M
    h = (m_count - 1) // 2
    # FFT ordering: put mode m at index m mod M.
    occ = np.roll(1.0 + np.abs(s.nu) ** 2, -h)
    pair = np.roll(s.nu * s.mu, -h)
    R = np.fft.ifft(occ)  # (1/M) sum x_m exp(+2 pi i n m / M)
    C = np.fft.fft(pair) / m_count  # (1/M) sum x_m exp(-2 pi i n m / M)
    return TemporalCorrelations(R, C)


def detection_probability(tc: TemporalCorrelations):
    """Probability that idler bin 0 holds at least one photon: 1 - 1/R_0."""
    r0 = tc.R0
    if r0 < 1.0 - 1e-15:
        raise ParameterError(f"R_0 = {r0!r} < 1 is unphysical")
    return max(0.0, 1.0 - 1.0 / r0)


def g2_cd(tc: TemporalCorrelations, k, l):
    """Heralded coherence of signal bins ``k`` and ``l`` given an idler click in bin 0.

    Off the diagonal::

        [R0^2 e^4 + R0^2 e^2 |R_kl|^2 + R0 e^2 (|C_k|^2 + |C_l|^2)
         - 2 e |C_k|^2 |C_l|^2 + 2 R0 e Re(C_k C_l^* R_kl)] / [(Q^2 + |C_k|^2)(Q^2 + |C_l|^2)]

    with e = R0 - 1, R_kl = R_{k-l}. On the diagonal
    ``2 - 2 R0 |C_k|^4 / (Q^2 + |C_k|^2)^2``.
    """
    k, l = int(k), int(l)
    if abs(k - l) >= tc.M:
        raise ParameterError(f"|k - l| = {abs(k - l)} must be below M = {tc.M}")
    r0 = tc.R0
    e = r0 - 1.0
    q2 = tc.Q2
    ck, cl = complex(tc.C_at(k)), complex(tc.C_at(l))
    a, b = abs(ck) ** 2, abs(cl) ** 2
    if q2 + a <= 0 or q2 + b <= 0:
        raise ParameterError("vacuum spectrum: the herald never clicks and g2_cd is undefined")
    if k == l:
        return 2.0 - 2.0 * r0 * a * a / (q2 + a) ** 2
    rkl = complex(tc.R_at(k - l))
    num = (r0 * r0 * e**4 + r0 * r0 * e * e * abs(rkl) ** 2 + r0 * e * e * (a + b)
           - 2.0 * e * a * b + 2.0 * r0 * e * (ck * cl.conjugate() * rkl).real)
    return num / ((q2 + a) * (q2 + b))


# ---------------------------------------------------------------------------
# Gaussian moment expander


def _pairings(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for j in range(len(rest)):
        for tail in _pairings(rest[:j] + rest[j + 1:]):
            yield [(first, rest[j])] + tail


def wick_moment(moments, ops):
    """Expectation of a normally ordered product of zero-mean Gaussian field operators.

    ``ops`` is a sequence of operator labels in product order (creation
    operators to the left); ``moments(x, y)`` returns the two-point function
    for labels ``x`` before ``y``. The result is the sum over all perfect
    pairings of the products of two-point functions.
    """
    ops = list(ops)
    if len(ops) % 2:
        raise ParameterError("a Gaussian moment needs an even number of operators")
    total = 0j
    for pairing in _pairings(ops):
        term = 1 + 0j
        for x, y in pairing:
            term *= moments(x, y)
            if term == 0:
                break
        total += term
    return total


def continuous_moments(p: SpdcParams):
    """Two-point table for labels ``(field, dagger, time)`` with field in {"s", "i"}.

    ``<E_f^dag(t1) E_f(t2)> = R(t1 - t2)``, ``<E_s(t1) E_i(t2)> = C(t1 - t2)``,
    ``<E_i^dag E_s^dag> = C^*``; every other pair vanishes. Envelopes are real.
    """

    def table(x, y):
        fx, dx, tx = x
        fy, dy, ty = y
        if dx and not dy and fx == fy:
            return complex(model.auto_corr(p, tx - ty))
        if dx == dy and fx != fy:
            ts = tx if fx == "s" else ty
            ti = ty if fx == "s" else tx
            return complex(model.cross_corr(p, ts - ti))
        return 0j

    return table


def wick_pair_rate(p: SpdcParams, tau):
    """P_si(tau) from the four-operator moment <E_s^dag E_i^dag E_i E_s>."""
    ops = [("s", True, tau), ("i", True, 0.0), ("i", False, 0.0), ("s", False, tau)]
    return wick_moment(continuous_moments(p), ops).real


def wick_triple_rate(p: SpdcParams, t1, t2, ti):
    """Six-operator moment <E_s^dag(t1) E_s^dag(t2) E_i^dag E_i E_s(t2) E_s(t1)>."""
    ops = [("s", True, t1), ("s", True, t2), ("i", True, ti),
           ("i", False, ti), ("s", False, t2), ("s", False, t1)]
    return wick_moment(continuous_moments(p), ops).real


def discrete_moments(tc: TemporalCorrelations):
    """Two-point table for time-bin labels ``(field, dagger, bin)``.

    Normally ordered: ``<a_k^dag a_l> = R_{l-k} - delta_kl`` (conjugated as
    needed), ``<a_k b_l> = C_{k-l}``, ``<b_l^dag a_k^dag> = C_{k-l}^*``.
    """

    def table(x, y):
        fx, dx, kx = x
        fy, dy, ky = y
        if fx == fy and dx and not dy:
            # <c_x^dag c_y> = <c_y c_x^dag> - delta
            if fx == "s":
                val = complex(tc.R_at(kx - ky))
            else:
                val = complex(tc.R_at(ky - kx))
            return val - (1.0 if kx == ky else 0.0)
        if fx != fy and dx == dy:
            ks = kx if fx == "s" else ky
            ki = ky if fx == "s" else kx
            c = complex(tc.C_at(ks - ki))
            return c.conjugate() if dx else c
        return 0j

    return table


# ---------------------------------------------------------------------------
# Truncated Fock-space oracle


class FockOracle:
    """Dense state vector of M signal and M idler frequency modes.

    The product of two-mode squeezed vacua ``(1/cosh r) exp(tanh r a^dag b^dag)``
    is built directly in a basis where the idler is expressed by its time-bin
    modes, so the heralding projector is diagonal. Each mode is truncated at
    ``cutoff`` photons. Meant for M <= 3 and cutoff <= 6.
    """

    def __init__(self, spectrum: DiscreteSpectrum, cutoff=4):
        m_count = spectrum.M
        if m_count > 3 or cutoff > 6:
            raise ParameterError("Fock oracle is limited to M <= 3 and cutoff <= 6")
        self.M = m_count
        self.cutoff = int(cutoff)
        self.dim = self.cutoff + 1
        h = (m_count - 1) // 2
        self.modes = np.arange(-h, h + 1)
        # idler frequency mode m in terms of idler bins k: b_m = M^-1/2 sum_k b_k exp(-2 pi i k m / M)
        k = self.modes
        self._b_from_bins = np.exp(-2j * np.pi * np.outer(self.modes, k) / m_count) / math.sqrt(m_count)
        r = np.arcsinh(np.abs(spectrum.nu))
        phase = np.where(np.abs(spectrum.nu) > 0, spectrum.nu / np.maximum(np.abs(spectrum.nu), 1e-300), 1.0)
        self._t = np.tanh(r) * phase * (spectrum.mu / np.abs(spectrum.mu))
        self.state = self._build_state()

    # mode axes: 0..M-1 signal frequency modes, M..2M-1 idler time bins
    def _shape(self):
        return (self.dim,) * (2 * self.M)

    def _create(self, psi, axis):
        out = np.zeros_like(psi)
        n = np.arange(1, self.dim)
        src = [slice(None)] * psi.ndim
        dst = [slice(None)] * psi.ndim
        src[axis] = slice(0, self.dim - 1)
        dst[axis] = slice(1, self.dim)
        shape = [1] * psi.ndim
        shape[axis] = self.dim - 1
        out[tuple(dst)] = psi[tuple(src)] * np.sqrt(n).reshape(shape)
        return out

    def _annihilate(self, psi, axis):
        out = np.zeros_like(psi)
        n = np.arange(1, self.dim)
        src = [slice(None)] * psi.ndim
        dst = [slice(None)] * psi.ndim
        src[axis] = slice(1, self.dim)
        dst[axis] = slice(0, self.dim - 1)
        shape = [1] * psi.ndim
        shape[axis] = self.dim - 1
        out[tuple(dst)] = psi[tuple(src)] * np.sqrt(n).reshape(shape)
        return out

    def _pair_creation(self, psi):
        """Apply sum_m t_m a_m^dag b_m^dag."""
        out = np.zeros_like(psi)
        for j, tm in enumerate(self._t):
            if tm == 0:
                continue
            sig = self._create(psi, j)
            for kk in range(self.M):
                coef = np.conj(self._b_from_bins[j, kk])  # b_m^dag = sum_k conj(U_mk) b_k^dag
                if coef != 0:
                    out += tm * coef * self._create(sig, self.M + kk)
        return out

    def _build_state(self):
        psi = np.zeros(self._shape(), dtype=complex)
        psi[(0,) * (2 * self.M)] = 1.0
        term = psi.copy()
        total = psi.copy()
        for j in range(1, self.cutoff * self.M + 1):
            term = self._pair_creation(term) / j
            if not np.any(term):
                break
            total += term
        return total / np.linalg.norm(total)

    def _signal_bin_annihilate(self, psi, k):
        """a_k = M^-1/2 sum_m a_m exp(-2 pi i k m / M)."""
        out = np.zeros_like(psi)
        for j, m in enumerate(self.modes):
            out += np.exp(-2j * np.pi * k * m / self.M) * self._annihilate(psi, j)
        return out / math.sqrt(self.M)

    def heralded_state(self):
        """Unnormalised (1 - P0) psi where P0 projects idler bin 0 onto vacuum."""
        axis = self.M + int(np.flatnonzero(self.modes == 0)[0])
        phi = self.state.copy()
        idx = [slice(None)] * phi.ndim
        idx[axis] = 0
        phi[tuple(idx)] = 0.0
        return phi

    def detection_probability(self):
        phi = self.heralded_state()
        return float(np.vdot(phi, phi).real)

    def g2(self, k, l):
        phi = self.heralded_state()
        ak = self._signal_bin_annihilate(phi, k)
        al = self._signal_bin_annihilate(phi, l)
        alk = self._signal_bin_annihilate(ak, l)
        norm = np.vdot(phi, phi).real
        nk = np.vdot(ak, ak).real / norm
        nl = np.vdot(al, al).real / norm
        return float(np.vdot(alk, alk).real / norm / (nk * nl))


# ---------------------------------------------------------------------------
# Convergence study


@dataclass
class ConvergenceRow:
    W: float
    T: float
    M: int
    k: int
    l: int
    g2_cd: float
    g2_cond: float
    rel_error: float
    flag: str = ""


def convergence_study(p: SpdcParams, k, l, W_grid, *, tw_min=1000.0, tb_min=2.0, noise_floor=1e-12):
    """Compare g2_cd(k, l) with the continuous heralded coherence as W grows.

    ``k`` and ``l`` refer to the first grid entry; for later entries they are
    scaled by ``W / W_grid[0]`` (which must be an integer) so the physical
    times ``k dt`` stay fixed. A row is flagged ``"non-monotone"`` when its
    error exceeds the previous one by more than ``noise_floor``.
    """
    W_grid = [float(w) for w in W_grid]
    if not W_grid:
        raise ParameterError("empty W grid")
    if any(b <= a for a, b in zip(W_grid, W_grid[1:])):
        raise ParameterError("W grid must be increasing")
    w0 = W_grid[0]
    rows = []
    prev = None
    for w in W_grid:
        ratio = w / w0
        if abs(ratio - round(ratio)) > 1e-9:
            raise ParameterError("each W must be an integer multiple of the first")
        ratio = int(round(ratio))
        kk, ll = int(k) * ratio, int(l) * ratio
        grid = suggest_grid(w, max(tw_min / w, tb_min / p.bandwidth))
        tc = temporal_correlations(build_spectrum(p, grid), grid)
        val = g2_cd(tc, kk, ll)
        t1, t2 = kk * grid.dt, ll * grid.dt
        ref = model.g2_cond(p, t1, t2, 0.0)
        err = abs(val - ref) / abs(ref)
        flag = ""
        if prev is not None and err > prev + noise_floor:
            flag = "non-monotone"
        rows.append(ConvergenceRow(w, grid.T, grid.M, kk, ll, val, ref, err, flag))
        prev = err
    return rows


def write_convergence_csv(rows, path, header=()):
    with open(path, "w", newline="") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["W_hz", "T_s", "M", "k", "l", "g2_cd", "g2_cond", "rel_error", "flag"])
        for r in rows:
            wr.writerow([repr(r.W), repr(r.T), r.M, r.k, r.l, repr(r.g2_cd), repr(r.g2_cond), repr(r.rel_error), r.flag])
