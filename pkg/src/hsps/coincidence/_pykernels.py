"""Numpy implementations of the counting kernels.

Same signatures and results as the compiled module; selected automatically
when the extension is not built. Pair expansion is done in blocks of anchors
so memory stays bounded by the block's pair count.
"""
import numpy as np

_BLOCK = 1 << 16


def is_sorted(t):
    t = np.asarray(t)
    for start in range(0, max(len(t) - 1, 0), 1 << 22):
        seg = t[start:start + (1 << 22) + 1]
        if np.any(seg[1:] < seg[:-1]):
            return False
    return True


def _partners(t, idx_b, anchor_t, lo, hi):
    tb = t[idx_b]
    first = np.searchsorted(tb, anchor_t + lo, side="left")
    last = np.searchsorted(tb, anchor_t + hi, side="left")
    return first, last


def _expand(first, last):
    """Flattened (anchor_row, partner_pos) pairs for ranges [first, last)."""
    counts = last - first
    rows = np.repeat(np.arange(len(first)), counts)
    starts = np.repeat(first - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    pos = starts + np.arange(counts.sum())
    return rows, pos


def delay_hist(ch, t, ch_a, ch_b, lo, width, out, a_start, a_stop):
    ch = np.asarray(ch)
    t = np.asarray(t)
    nbins = out.shape[0]
    hi = lo + nbins * width
    idx_b = np.flatnonzero(ch == ch_b)
    anchors = a_start + np.flatnonzero(ch[a_start:a_stop] == ch_a)
    for s in range(0, len(anchors), _BLOCK):
        a = anchors[s:s + _BLOCK]
        first, last = _partners(t, idx_b, t[a], lo, hi)
        rows, pos = _expand(first, last)
        partner = idx_b[pos]
        ok = partner != a[rows]
        dt = t[partner[ok]] - t[a[rows[ok]]]
        out += np.bincount((dt - lo) // width, minlength=nbins)[:nbins].astype(out.dtype)


def triple_hist(ch, t, ch_h, ch_1, ch_2, lo1, w1, lo2, w2, out, a_start, a_stop):
    ch = np.asarray(ch)
    t = np.asarray(t)
    nb1, nb2 = out.shape
    hi1, hi2 = lo1 + nb1 * w1, lo2 + nb2 * w2
    idx_1 = np.flatnonzero(ch == ch_1)
    idx_2 = np.flatnonzero(ch == ch_2)
    anchors = a_start + np.flatnonzero(ch[a_start:a_stop] == ch_h)
    for s in range(0, len(anchors), _BLOCK):
        a = anchors[s:s + _BLOCK]
        ta = t[a]
        f1, l1 = _partners(t, idx_1, ta, lo1, hi1)
        f2, l2 = _partners(t, idx_2, ta, lo2, hi2)
        r1, p1 = _expand(f1, l1)
        # each (anchor, s1) pair is combined with every s2 partner of that anchor
        n2 = (l2 - f2)[r1]
        rr = np.repeat(np.arange(len(r1)), n2)
        base = np.repeat(f2[r1] - np.concatenate([[0], np.cumsum(n2)[:-1]]), n2)
        p2 = base + np.arange(n2.sum())
        anchor = a[r1[rr]]
        k1 = idx_1[p1[rr]]
        k2 = idx_2[p2]
        ok = (k1 != anchor) & (k2 != anchor) & (k1 != k2)
        d1 = t[k1[ok]] - t[anchor[ok]]
        d2 = t[k2[ok]] - t[anchor[ok]]
        flat = ((d1 - lo1) // w1) * nb2 + (d2 - lo2) // w2
        out += np.bincount(flat, minlength=nb1 * nb2).reshape(nb1, nb2).astype(out.dtype)


def deadtime_mask(ch, t, dead, last, keep):
    ch = np.asarray(ch)
    t = np.asarray(t)
    for c in np.unique(ch):
        idx = np.flatnonzero(ch == c)
        tc = t[idx]
        dc = int(dead[c])
        # A tag whose gap to the previous raw tag is >= dead is always kept;
        # only runs of closely spaced tags need the sequential scan.
        gaps = np.diff(tc, prepend=np.int64(last[c]))
        ok = gaps >= dc
        k = np.ones(len(tc), dtype=bool)
        prev = int(last[c])
        for i in np.flatnonzero(~ok).tolist():
            j = i - 1
            while j >= 0 and not k[j]:
                j -= 1
            prev_kept = int(tc[j]) if j >= 0 else prev
            k[i] = int(tc[i]) - prev_kept >= dc
        keep[idx] = k
        if len(tc):
            kept = tc[k]
            if len(kept):
                last[c] = kept[-1]
