"""Compare the compiled and pure-numpy coincidence kernels.

Run ``python3 benchmarks/bench_kernels.py [--tags N] [--repeat K]``. A
synthetic three-channel stream is generated at the paper-like operating
point (11.9 mW, 45 ns dead time) and each kernel is timed on both backends.
Results are checked for equality before timings are printed.
"""
import argparse
import time

import numpy as np

from hsps.coincidence import available_backends, get_kernels
from hsps.coincidence.counting import _bins, window_ticks
from hsps.model import SpdcParams
from hsps.response import DetectorModel
from hsps.simulate import SimConfig, generate


def make_stream(n_tags, seed=7):
    det = DetectorModel(jitter=0.35e-9, efficiency=0.4, dead_time=45e-9)
    p = SpdcParams(None, 3e12, 1.2e6, 11.9)
    duration = n_tags / 9.6e6
    cfg = SimConfig(p, {0: det, 1: det, 2: det}, duration=duration, rng_seed=seed)
    return generate(cfg, max_tags=4 * n_tags)


def _best(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def run(n_tags, repeat):
    s = make_stream(n_tags)
    ch = s.channel
    t = s.ticks.view(np.int64)
    w = window_ticks(0.39e-9, s.resolution)
    lo, nb = _bins(w, 20e-9, s.resolution)
    n = len(t)
    rows = []
    results = {}
    for name in available_backends():
        k = get_kernels(name)

        def hist():
            out = np.zeros(nb, np.int64)
            k.delay_hist(ch, t, 0, 1, lo, w, out, 0, n)
            return out

        def triple():
            out = np.zeros((nb, nb), np.int64)
            k.triple_hist(ch, t, 0, 1, 2, lo, w, lo, w, out, 0, n)
            return out

        def dead():
            keep = np.ones(n, np.uint8)
            last = np.full(3, -(1 << 62), np.int64)
            k.deadtime_mask(ch, t, np.full(3, 288, np.int64), last, keep)
            return keep

        for label, fn in (("is_sorted", lambda: k.is_sorted(t)), ("delay_hist", hist),
                          ("triple_hist", triple), ("deadtime_mask", dead)):
            sec, out = _best(fn, repeat)
            results.setdefault(label, []).append(out)
            rows.append((label, name, sec, n / sec))
    for label, outs in results.items():
        if not all(np.array_equal(np.asarray(outs[0]), np.asarray(o)) for o in outs[1:]):
            raise SystemExit(f"backends disagree on {label}")
    print(f"{n} tags, best of {repeat}")
    print(f"{'kernel':<15}{'backend':<9}{'seconds':>10}{'Mtags/s':>10}")
    for label, name, sec, rate in rows:
        print(f"{label:<15}{name:<9}{sec:>10.4f}{rate / 1e6:>10.1f}")
    by = {(r[0], r[1]): r[2] for r in rows}
    if "cython" in available_backends():
        print("speed-up of cython over python:")
        for label in results:
            print(f"  {label:<15}{by[(label, 'python')] / by[(label, 'cython')]:>8.1f}x")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--tags", type=int, default=2_000_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    run(args.tags, args.repeat)


if __name__ == "__main__":
    main()
