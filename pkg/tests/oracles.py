"""Brute-force reference implementations used only by the tests.

Each one is written from the definition with explicit loops and shares no code
with the package.
"""

import math

import mpmath
import numpy as np


def conv2d_loops(x, w, b, pad):
    """Cross-correlation of (H, W, Cin) with (k, k, Cin, Cout), zero padding ``pad``."""
    h, wd, cin = x.shape
    k, _, _, cout = w.shape
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = b[o]
                for di in range(k):
                    for dj in range(k):
                        r, c = i + di - pad, j + dj - pad
                        if 0 <= r < h and 0 <= c < wd:
                            for ch in range(cin):
                                acc += x[r, c, ch] * w[di, dj, ch, o]
                out[i, j, o] = acc
    return out


def maxpool_scan(x, kernel, stride, padding=(0, 0), ceil_mode=False):
    """Window scan over (H, W, C); windows are clipped to the real input."""
    h, wd, c = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding

    def extent(n, k, s, p):
        if ceil_mode:
            out = math.ceil((n + 2 * p - k) / s) + 1
            if (out - 1) * s >= n + p:
                out -= 1
            return out
        return (n + 2 * p - k) // s + 1

    ho, wo = extent(h, kh, sh, ph), extent(wd, kw, sw, pw)
    out = np.empty((ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            r0, c0 = i * sh - ph, j * sw - pw
            rows = range(max(r0, 0), min(r0 + kh, h))
            cols = range(max(c0, 0), min(c0 + kw, wd))
            for ch in range(c):
                out[i, j, ch] = max(x[r, q, ch] for r in rows for q in cols)
    return out


def fc_dot(x, w, b):
    out = np.empty(w.shape[1])
    for k in range(w.shape[1]):
        out[k] = sum(x[d] * w[d, k] for d in range(w.shape[0])) + b[k]
    return out


def cross_entropy_mp(logits, label, dps=50):
    """``-log softmax(logits)[label]`` in 50-digit arithmetic."""
    with mpmath.workdps(dps):
        z = [mpmath.mpf(float(v)) for v in logits]
        return float(mpmath.log(mpmath.fsum(mpmath.exp(v) for v in z)) - z[label])


def central_difference(f, arrays, eps=1e-5):
    """Numerical gradient of scalar ``f()`` with respect to each array, in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            saved = a[idx]
            a[idx] = saved + eps
            up = f()
            a[idx] = saved - eps
            down = f()
            a[idx] = saved
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor=1e-6):
    """Entrywise ``|a - n| / max(|a|, |n|, floor)`` reduced by max."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
