"""Slow, obviously-correct reference implementations used by the tests."""
import math

import numpy as np


def circular_analysis(x, taps, start):
    """``out[k] = sum_i taps[i] * x[(2k + start + i) mod n]`` with explicit loops."""
    n = len(x)
    out = np.zeros(n // 2)
    for k in range(n // 2):
        for i, c in enumerate(taps):
            out[k] += c * x[(2 * k + start + i) % n]
    return out


def dense_causal_attention(h, wq, wk, wv, wo, n_heads, drop=None):
    """Per-head loops in float64; ``drop[head][q]`` lists key indices to exclude."""
    h = np.asarray(h, dtype=float)
    n, d = h.shape
    hd = d // n_heads
    q, k, v = h @ wq.T, h @ wk.T, h @ wv.T
    out = np.zeros((n, d))
    for head in range(n_heads):
        sl = slice(head * hd, (head + 1) * hd)
        for i in range(n):
            allowed = [j for j in range(i + 1) if not (drop and j in drop[head][i])]
            s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(hd) for j in allowed])
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, sl] = sum(wj * v[j, sl] for wj, j in zip(w, allowed))
    return out @ wo.T


def huber_scalar(r, delta=1.0):
    r = abs(r)
    return 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)


def central_difference(f, theta, h=1e-4):
    return (f(theta + h) - f(theta - h)) / (2 * h)


def adamw_scalar(w, g, m, v, t, lr, b1, b2, eps, wd):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return w * (1 - lr * wd) - lr * mhat / (math.sqrt(vhat) + eps), m, v


def gelu(x):
    return 0.5 * x * (1 + math.erf(x / math.sqrt(2)))
