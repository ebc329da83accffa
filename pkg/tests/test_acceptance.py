"""Acceptance suite.

Each test checks one acceptance criterion at its stated tolerance and prints
a single ``PASS`` or ``FAIL`` line, visible even without ``-s``. Criteria
that the physics does not allow are left failing; nothing is loosened here.
"""
import threading
import time

import numpy as np
import pytest

from hsps import model
from hsps.coincidence import StreamCounter, count_stream, peak_wall
from hsps.coincidence.tags import BinaryTagWriter, TagStream, iter_binary
from hsps.discrete import (DiscreteSpectrum, FockOracle, convergence_study, g2_cd, temporal_correlations,
                           wick_pair_rate, wick_triple_rate)
from hsps.errors import IdentifiabilityError
from hsps.fit import FitProblem, dataset_from_histogram, fit, infer_true_g2c0
from hsps.model import SpdcParams
from hsps.response import CoincidenceConfig, DetectorModel, g2bar_c, g2bar_c_zero_sweep, n2_si
from hsps.simulate import SimConfig, iter_generate

from test_coincidence import brute_delay, brute_surface

RATE_PER_MW = 1.2e6
BANDWIDTH = 3e12
PUMP = 11.9
JITTER = 0.35e-9
DEAD = 45e-9
TAU_COIN = 0.39e-9


def verdict(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


def lab_detector(dead_time=DEAD):
    return DetectorModel(jitter=JITTER, efficiency=0.4, dead_time=dead_time)


def simulate_and_count(pump, duration, seed, *, dead_time=DEAD, range_=8e-9, full_surface=True):
    det = lab_detector(dead_time)
    cfg = SimConfig(SpdcParams(None, BANDWIDTH, RATE_PER_MW, pump), {0: det, 1: det, 2: det},
                    duration=duration, rng_seed=seed)
    ctr = StreamCounter(cfg.resolution, TAU_COIN, range_, full_surface=full_surface)
    for ch, tk in iter_generate(cfg):
        ctr.feed(ch, tk)
    return ctr.finish(duration)


@pytest.fixture(scope="module")
def long_run():
    t0 = time.perf_counter()
    res = simulate_and_count(PUMP, 30.0, 11)
    return res, time.perf_counter() - t0


def test_c1_trigger_time_coherence(capsys):
    p = SpdcParams(1.5e7, BANDWIDTH)
    value = model.g2_cond_at_zero(p)
    times = []
    for _ in range(200):
        t0 = time.perf_counter()
        model.g2_cond_at_zero(p)
        times.append(time.perf_counter() - t0)
    runtime = float(np.median(times))
    ok = abs(value / 2e-5 - 1) <= 0.05 and runtime < 1e-3
    verdict(capsys, "C1 trigger-time coherence", ok, f"g2c(0)={value:.4e} (target 2e-5 +/-5%), "
            f"median runtime {runtime * 1e6:.2f} us (< 1 ms)")


def test_c2_measured_dip(capsys, long_run):
    res, runtime = long_run
    measured, sigma = res.g2c_profile().at_zero
    p = SpdcParams(None, BANDWIDTH, RATE_PER_MW, PUMP)
    predicted = float(g2bar_c(p, DetectorModel(jitter=JITTER), CoincidenceConfig(TAU_COIN), 0.0))
    ok = measured < 0.03 and abs(measured / predicted - 1) <= 0.30 and runtime < 300
    verdict(capsys, "C2 measured dip", ok, f"simulated g2c(0)={measured:.4f} +/- {sigma:.4f} (< 0.03), prediction "
            f"{predicted:.4f}, ratio {measured / predicted:.3f} (0.7..1.3), 30 s of data in {runtime:.1f} s (< 300 s)")


def test_c3_peak_wall_ratio(capsys, long_run):
    p = SpdcParams(None, BANDWIDTH, RATE_PER_MW, PUMP)
    ideal = DetectorModel(jitter=0.0)
    with pytest.warns(UserWarning, match="outside"):
        c = CoincidenceConfig(1e-15)
    peak, wall = n2_si(p, ideal, c, np.array([0.0, 5e-12]), mode="exact")
    analytic = peak / wall
    closed = model.triple_rate_fn(p, 0.0, 0.0, 0.0) / model.triple_rate_fn(p, 0.0, 5e-12, 0.0)
    res, _ = long_run
    _, _, simulated, sigma = peak_wall(res.surface_histogram())
    ok = abs(analytic / 4 - 1) <= 0.01 and abs(closed / 4 - 1) <= 0.01 and abs(simulated / 2 - 1) <= 0.30
    verdict(capsys, "C3 peak/wall ratio", ok, f"analytic {analytic:.4f} and infinite-resolution {closed:.4f} "
            f"(4 +/-1%), simulated {simulated:.3f} +/- {sigma:.3f} (2 +/-30%)")


def zero_intercept(x, y):
    slope = float(x @ y / (x @ x))
    resid = y - slope * x
    r2 = 1 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())
    return slope, r2


def test_c4_power_linearity(capsys):
    powers = np.array([1.0, 2.0, 4.0, 7.0, 10.0, 13.0, 16.0, 20.0])
    measured = np.array([simulate_and_count(P, 2.0, 100 + k, dead_time=0.0, full_surface=False).g2c_profile().at_zero[0]
                         for k, P in enumerate(powers)])
    p = SpdcParams(None, BANDWIDTH, RATE_PER_MW, PUMP)
    c = CoincidenceConfig(TAU_COIN)
    predicted = g2bar_c_zero_sweep(p, DetectorModel(jitter=JITTER), c, powers=powers)[:, 1]
    slope, r2 = zero_intercept(powers, measured)
    slope_th, _ = zero_intercept(powers, predicted)
    dead = np.array([simulate_and_count(P, 2.0, 200 + k, full_surface=False).g2c_profile().at_zero[0]
                     for k, P in enumerate(powers[::3])])
    slope_dead, r2_dead = zero_intercept(powers[::3], dead)
    with capsys.disabled():
        print(f"\n[INFO] C4 with 45 ns dead time: slope {slope_dead:.3e}/mW "
              f"({slope_dead / slope_th:.3f} of prediction), R^2={r2_dead:.4f}")
    ok = r2 > 0.99 and abs(slope / slope_th - 1) <= 0.05
    verdict(capsys, "C4 power linearity", ok, f"R^2={r2:.5f} (> 0.99), slope {slope:.4e}/mW vs predicted "
            f"{slope_th:.4e}/mW, ratio {slope / slope_th:.4f} (0.95..1.05)")


def test_c5_window_sweep(capsys):
    p = SpdcParams(None, BANDWIDTH, RATE_PER_MW, PUMP)
    windows = np.unique(np.round(np.concatenate([np.linspace(0.5, 2.0, 16), np.linspace(2.0, 20.0, 37)]), 6)) * 1e-9
    real = g2bar_c_zero_sweep(p, DetectorModel(jitter=JITTER), windows=windows)[:, 1]
    ideal = g2bar_c_zero_sweep(p, DetectorModel(jitter=0.0), windows=windows)[:, 1]
    monotone = bool(np.all(np.diff(real) >= 0) and np.all(np.diff(ideal) >= 0))
    # tau_coin >= 10 tau_d, i.e. full windows of 7 ns and above
    far = windows >= 20 * JITTER - 1e-15
    slopes = np.diff(real[far]) / np.diff(windows[far])
    spread = slopes.max() / slopes.min() - 1
    narrow = windows < 2e-9
    below = ideal[narrow] < real[narrow]
    not_below = windows[narrow][~below]
    detail_below = ("all windows" if below.all() else
                    f"fails for 2tau_coin in [{not_below.min() * 1e9:.2f}, {not_below.max() * 1e9:.2f}] ns")
    ok = monotone and spread <= 0.10 and below.all()
    verdict(capsys, "C5 window sweep", ok, f"monotone={monotone}; secant slope spread {spread * 100:.1f}% "
            f"over 7..20 ns (<= 10%); ideal strictly below real for 2tau_coin < 2 ns: {detail_below}")


def test_c6_appendix_convergence(capsys):
    p = SpdcParams(1.5e7, BANDWIDTH)
    rows = convergence_study(p, 0, 0, [128 * BANDWIDTH * 2**j for j in range(5)])
    errs = np.array([r.rel_error for r in rows])
    tw = np.array([r.T * r.W for r in rows])
    ok = bool(np.all(np.diff(errs) < 0) and np.all(errs[tw >= 1e3] < 1e-3) and np.any(tw >= 1e3)
              and errs[-1] < 1e-3)
    verdict(capsys, "C6 discrete-to-continuum convergence", ok,
            "relative errors " + ", ".join(f"{e:.2e}" for e in errs) + f" at TW={tw.min():.0f}..{tw.max():.0f}")


def test_c7_oracle_suite(capsys):
    rng = np.random.default_rng(2024)
    worst_wick = 0.0
    for _ in range(100):
        R = 10 ** rng.uniform(4, 8)
        B = 10 ** rng.uniform(11.5, 13)
        p = SpdcParams(R, B)
        t1, t2, ti = rng.uniform(-1.5 / B, 1.5 / B, 3)
        a = model.triple_rate_fn(p, t1, t2, ti)
        worst_wick = max(worst_wick, abs(wick_triple_rate(p, t1, t2, ti) / a - 1))
        b = model.pair_rate_fn(p, t1 - ti)
        worst_wick = max(worst_wick, abs(wick_pair_rate(p, t1 - ti) / b - 1))

    worst_fock = 0.0
    for seed in range(6):
        r = np.random.default_rng(seed)
        m = (1, 3)[seed % 2]
        nu = np.sqrt(r.uniform(0.004, 0.02, m)) * np.exp(1j * r.uniform(0, 2 * np.pi, m))
        s = DiscreteSpectrum.from_nu(nu)
        tc = temporal_correlations(s)
        fo = FockOracle(s, cutoff=4)
        h = (m - 1) // 2
        for k in range(-h, h + 1):
            for l in range(-h, h + 1):
                worst_fock = max(worst_fock, abs(fo.g2(k, l) / g2_cd(tc, k, l) - 1))

    mismatches = 0
    fixtures = 0
    for seed in range(12):
        r = np.random.default_rng(seed)
        n = int(r.integers(50, 1001))
        span = int(r.integers(n, 4 * n))
        t = np.sort(r.integers(0, span, n)).astype(np.uint64)
        ch = r.integers(0, 3, n).astype(np.uint8)
        s = TagStream(ch, t, 1e-9, 3, duration=span * 1e-9)
        w = int(r.integers(1, 6))
        for chunk in (None, 1, 97):
            res = count_stream(s, 0.5 * w * 1e-9, 8e-9, chunk_tags=chunk)
            nb = res.surface.shape[0]
            fixtures += 1
            same = (np.array_equal(res.surface, brute_surface(s, res.lo_ticks, nb, res.lo_ticks, nb, res.bin_ticks))
                    and np.array_equal(res.hist_is1, brute_delay(s, 0, 1, res.lo_ticks, res.bin_ticks, nb))
                    and np.array_equal(res.hist_is2, brute_delay(s, 0, 2, res.lo_ticks, res.bin_ticks, nb)))
            mismatches += not same
    ok = worst_wick < 1e-10 and worst_fock < 1e-3 and mismatches == 0
    verdict(capsys, "C7 oracle suite", ok, f"Wick worst rel. error {worst_wick:.1e} (< 1e-10), Fock worst "
            f"{worst_fock:.1e} (< 1e-3), streaming vs brute force {fixtures - mismatches}/{fixtures} identical")


def test_c8_fit_round_trip(capsys):
    datasets = []
    for k, P in enumerate((3.0, 7.0, 11.9)):
        res = simulate_and_count(P, 1.0, 300 + k, range_=20e-9, full_surface=False)
        for arm in (1, 2):
            datasets.append(dataset_from_histogram(res.histogram(arm), P, max_tau=1.2e-9))
    result = fit(FitProblem(datasets, tag_resolution=156.25e-12, reference_power=PUMP))
    g_true = infer_true_g2c0(RATE_PER_MW * PUMP, BANDWIDTH)[0]
    e_rate = result.params["rate_per_mw"] / RATE_PER_MW - 1
    e_jit = result.params["jitter"] / JITTER - 1
    e_g = result.g2c0 / g_true - 1
    try:
        fit(FitProblem(datasets, free=("rate_per_mw", "bandwidth", "jitter")))
        degenerate = False
    except IdentifiabilityError:
        degenerate = True
    ok = abs(e_rate) <= 0.10 and abs(e_jit) <= 0.10 and abs(e_g) <= 0.15 and degenerate
    verdict(capsys, "C8 fit round trip", ok, f"rate error {e_rate * 100:+.2f}%, jitter error {e_jit * 100:+.2f}% "
            f"(each within 10%), g2c(0) error {e_g * 100:+.2f}% (within 15%), degenerate problem rejected: {degenerate}")


class PeakRss:
    def __init__(self, interval=0.02):
        import psutil
        self.proc = psutil.Process()
        self.interval = interval
        self.peak = self.proc.memory_info().rss
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        while not self._stop.is_set():
            self.peak = max(self.peak, self.proc.memory_info().rss)
            time.sleep(self.interval)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self.peak = max(self.peak, self.proc.memory_info().rss)


def test_c9_counting_throughput(capsys, tmp_path):
    pytest.importorskip("psutil")
    n_target = 100_000_000
    det = lab_detector()
    p = SpdcParams(None, BANDWIDTH, RATE_PER_MW, PUMP)
    cfg = SimConfig(p, {0: det, 1: det, 2: det}, duration=1.02 * n_target / cfg_rate(p, det), rng_seed=9)
    path = tmp_path / "big.htag"
    n_written = 0
    with BinaryTagWriter(path, cfg.resolution) as w:
        for ch, tk in iter_generate(cfg):
            w.write(ch, tk)
            n_written += len(tk)
    import psutil
    base = psutil.Process().memory_info().rss
    with PeakRss() as mon:
        t0 = time.perf_counter()
        ctr = None
        for resolution, _, ch, tk in iter_binary(path):
            if ctr is None:
                ctr = StreamCounter(resolution, TAU_COIN, 20e-9)
            ctr.feed(ch, tk)
        res = ctr.finish(cfg.duration)
        elapsed = time.perf_counter() - t0
    extra = (mon.peak - base) / 2**30
    ok = n_written >= n_target and int(res.counts.sum()) == n_written and elapsed < 60 and extra < 2.0
    verdict(capsys, "C9 counting throughput", ok, f"{n_written:.3e} tags counted in {elapsed:.1f} s (< 60 s), "
            f"peak extra RSS {extra:.2f} GiB (< 2 GiB), {res.backend} backend")


def cfg_rate(p, det):
    """Approximate total tag rate of a three-detector run, from a short pilot."""
    pilot = SimConfig(p, {0: det, 1: det, 2: det}, duration=0.05, rng_seed=1)
    return sum(len(tk) for _, tk in iter_generate(pilot)) / pilot.duration
