"""Slow, obviously-correct reference implementations used only by the tests."""
from collections import deque

import numpy as np


def conv2d_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for q in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[i, ci, r * stride + u, q * stride + v] * w[o, ci, u, v]
                    out[i, o, r, q] = acc
    return out


def transposed_conv_scatter(x, w, b, stride, pad):
    """Each input pixel stamps its weighted kernel onto the output grid."""
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    full = np.zeros((n, cout, (h - 1) * stride + k, (wd - 1) * stride + k))
    for i in range(n):
        for ci in range(cin):
            for r in range(h):
                for q in range(wd):
                    full[i, :, r * stride:r * stride + k, q * stride:q * stride + k] += x[i, ci, r, q] * w[ci]
    out = full[:, :, pad:full.shape[2] - pad, pad:full.shape[3] - pad]
    if b is not None:
        out = out + np.asarray(b).reshape(1, -1, 1, 1)
    return out


def maxpool_scan(x, k, stride):
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    idx = np.zeros((n, c, ho, wo), dtype=int)
    for i in range(n):
        for ch in range(c):
            for r in range(ho):
                for q in range(wo):
                    best, where = -np.inf, None
                    for u in range(k):
                        for v in range(k):
                            val = x[i, ch, r * stride + u, q * stride + v]
                            if val > best:
                                best, where = val, (r * stride + u) * w + q * stride + v
                    out[i, ch, r, q], idx[i, ch, r, q] = best, where
    return out, idx


def flood_fill(mask, connectivity):
    """BFS labeling; returns (labels, [(area, (row centroid, col centroid))]) in scan order."""
    fg = np.asarray(mask) > 0
    h, w = fg.shape
    labels = np.zeros((h, w), dtype=int)
    if connectivity == 8:
        steps = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc]
    else:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    comps = []
    for r0 in range(h):
        for c0 in range(w):
            if not fg[r0, c0] or labels[r0, c0]:
                continue
            lab = len(comps) + 1
            labels[r0, c0] = lab
            queue, pixels = deque([(r0, c0)]), []
            while queue:
                r, c = queue.popleft()
                pixels.append((r, c))
                for dr, dc in steps:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and fg[rr, cc] and not labels[rr, cc]:
                        labels[rr, cc] = lab
                        queue.append((rr, cc))
            pts = np.array(pixels, dtype=float)
            comps.append((len(pixels), (pts[:, 0].mean(), pts[:, 1].mean())))
    return labels, comps


def adam_by_hand(p, g, rate, t=1, beta1=0.9, beta2=0.999, eps=1e-8):
    m = (1 - beta1) * g
    v = (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return p - rate * m_hat / (np.sqrt(v_hat) + eps)
