# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled counting kernels.

Every kernel works on the merged, time-sorted stream (``ch`` uint8 channel
codes, ``t`` int64 ticks) and only processes anchor tags with index in
``[a_start, a_stop)``; partners are searched in the whole array. Splitting a
stream into anchor blocks therefore reproduces the single-pass counts
exactly.
"""
from libc.stdint cimport int64_t, uint8_t


cdef inline Py_ssize_t _lower_bound(const int64_t[:] t, int64_t value) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = t.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if t[mid] < value:
            lo = mid + 1
        else:
            hi = mid
    return lo


def is_sorted(const int64_t[:] t):
    cdef Py_ssize_t i, n = t.shape[0]
    cdef bint ok = True
    with nogil:
        for i in range(1, n):
            if t[i] < t[i - 1]:
                ok = False
                break
    return ok


def delay_hist(const uint8_t[:] ch, const int64_t[:] t, int ch_a, int ch_b,
               int64_t lo, int64_t width, int64_t[:] out,
               Py_ssize_t a_start, Py_ssize_t a_stop):
    """Histogram B-minus-A delays in bins [lo + k*width, lo + (k+1)*width)."""
    cdef Py_ssize_t n = t.shape[0], nbins = out.shape[0]
    cdef int64_t hi = lo + nbins * width
    cdef Py_ssize_t i, j, k
    cdef int64_t t0, dt
    if a_start >= a_stop:
        return
    with nogil:
        j = _lower_bound(t, t[a_start] + lo)
        for i in range(a_start, a_stop):
            if ch[i] != ch_a:
                continue
            t0 = t[i]
            while j < n and t[j] - t0 < lo:
                j += 1
            k = j
            while k < n:
                dt = t[k] - t0
                if dt >= hi:
                    break
                if ch[k] == ch_b and k != i:
                    out[(dt - lo) // width] += 1
                k += 1


def triple_hist(const uint8_t[:] ch, const int64_t[:] t, int ch_h, int ch_1, int ch_2,
                int64_t lo1, int64_t w1, int64_t lo2, int64_t w2, int64_t[:, :] out,
                Py_ssize_t a_start, Py_ssize_t a_stop):
    """2-D histogram of (t1 - t_h, t2 - t_h) over every herald/partner/partner triple."""
    cdef Py_ssize_t n = t.shape[0]
    cdef Py_ssize_t nb1 = out.shape[0], nb2 = out.shape[1]
    cdef int64_t hi1 = lo1 + nb1 * w1, hi2 = lo2 + nb2 * w2
    cdef int64_t lo = lo1 if lo1 < lo2 else lo2
    cdef int64_t hi = hi1 if hi1 > hi2 else hi2
    cdef Py_ssize_t i, j, k, m, stop
    cdef int64_t t0, d1, d2
    if a_start >= a_stop:
        return
    with nogil:
        j = _lower_bound(t, t[a_start] + lo)
        for i in range(a_start, a_stop):
            if ch[i] != ch_h:
                continue
            t0 = t[i]
            while j < n and t[j] - t0 < lo:
                j += 1
            stop = j
            while stop < n and t[stop] - t0 < hi:
                stop += 1
            for k in range(j, stop):
                if ch[k] != ch_1 or k == i:
                    continue
                d1 = t[k] - t0
                if d1 < lo1 or d1 >= hi1:
                    continue
                for m in range(j, stop):
                    if ch[m] != ch_2 or m == i or m == k:
                        continue
                    d2 = t[m] - t0
                    if d2 < lo2 or d2 >= hi2:
                        continue
                    out[(d1 - lo1) // w1, (d2 - lo2) // w2] += 1


def deadtime_mask(const uint8_t[:] ch, const int64_t[:] t, const int64_t[:] dead,
                  int64_t[:] last, uint8_t[:] keep):
    """Non-paralyzable dead time: keep a tag if it is >= dead[ch] after the last kept one.

    ``last`` holds the last accepted tick per channel and is updated in place,
    so consecutive chunks can be filtered with carried state.
    """
    cdef Py_ssize_t i, n = t.shape[0]
    cdef uint8_t c
    with nogil:
        for i in range(n):
            c = ch[i]
            if t[i] - last[c] >= dead[c]:
                keep[i] = 1
                last[c] = t[i]
            else:
                keep[i] = 0
