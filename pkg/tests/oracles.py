"""Independent reference implementations used to freeze expected values.

These are deliberately naive (explicit loops, no shared code with the
package) so that agreement is evidence rather than tautology.
"""
from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for d in range(kw):
                                acc += xp[b, ci, i * stride + a, j * stride + d] * w[o, ci, a, d]
                    out[b, o, i, j] = acc
    return out


def naive_motion_search(prev: np.ndarray, cur: np.ndarray, mb: int, sr: int) -> np.ndarray:
    """Exhaustive SAD with clamped reference reads; ties by (|dy|+|dx|, dy, dx)."""
    h, w, _ = cur.shape
    prev = prev.astype(np.int64)
    cur = cur.astype(np.int64)
    out = np.zeros((h // mb, w // mb, 2), dtype=np.int64)
    for by in range(h // mb):
        for bx in range(w // mb):
            best = None
            for dy in range(-sr, sr + 1):
                for dx in range(-sr, sr + 1):
                    sad = 0
                    for y in range(by * mb, by * mb + mb):
                        for x in range(bx * mb, bx * mb + mb):
                            ry = min(max(y - dy, 0), h - 1)
                            rx = min(max(x - dx, 0), w - 1)
                            sad += int(np.abs(cur[y, x] - prev[ry, rx]).sum())
                    key = (sad, abs(dy) + abs(dx), dy, dx)
                    if best is None or key < best:
                        best = key
            out[by, bx] = best[2:]
    return out


def dv_value(t_joint, t_marg) -> float:
    """E_joint[T] - log E_marg[exp T] by plain arithmetic."""
    t_joint = [float(v) for v in t_joint]
    t_marg = [float(v) for v in t_marg]
    return sum(t_joint) / len(t_joint) - math.log(sum(math.exp(v) for v in t_marg) / len(t_marg))


def histogram_mi(x: np.ndarray, y: np.ndarray, bins: int = 40) -> float:
    """Plug-in MI from a 2-d histogram (biased, but independent of any network)."""
    joint, _, _ = np.histogram2d(x, y, bins=bins)
    p = joint / joint.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (px @ py)[nz])))


def adam_first_step(param: float, grad: float, lr: float, eps: float = 1e-8) -> float:
    # m_hat = g, v_hat = g^2 after bias correction at t = 1
    return param - lr * grad / (abs(grad) + eps)
