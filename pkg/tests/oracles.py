"""Brute-force reference implementations used only by the tests.

These are deliberately naive loops over every index so they share no code
path with the vectorized implementations they check.
"""
import math

import numpy as np


def conv2d_loops(x, w, b, stride, pad):
    n, p, h, wd = x.shape
    q, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, q, ho, wo))
    for b_ in range(n):
        for qq in range(q):
            for m in range(ho):
                for nn_ in range(wo):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            for pp in range(p):
                                r, c = m * stride + i - pad, nn_ * stride + j - pad
                                if 0 <= r < h and 0 <= c < wd:
                                    acc += w[qq, pp, i, j] * x[b_, pp, r, c]
                    out[b_, qq, m, nn_] = acc + (b[qq] if b is not None else 0.0)
    return out


def depthwise_loops(x, w, stride, pad):
    n, c, h, wd = x.shape
    k = w.shape[1]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b_ in range(n):
        for ch in range(c):
            for m in range(ho):
                for nn_ in range(wo):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            r, cc = m * stride + i - pad, nn_ * stride + j - pad
                            if 0 <= r < h and 0 <= cc < wd:
                                acc += w[ch, i, j] * x[b_, ch, r, cc]
                    out[b_, ch, m, nn_] = acc
    return out


def maxpool_loops(x, window, stride, ceil_mode):
    n, c, h, wd = x.shape

    def size(s):
        if ceil_mode:
            o = math.ceil((s - window) / stride) + 1
            if (o - 1) * stride >= s:
                o -= 1
            return o
        return (s - window) // stride + 1

    ho, wo = size(h), size(wd)
    out = np.zeros((n, c, ho, wo))
    for b_ in range(n):
        for ch in range(c):
            for m in range(ho):
                for nn_ in range(wo):
                    best = -math.inf
                    for i in range(window):
                        for j in range(window):
                            r, cc = m * stride + i, nn_ * stride + j
                            if r < h and cc < wd:
                                best = max(best, x[b_, ch, r, cc])
                    out[b_, ch, m, nn_] = best
    return out


def psroi_bins(roi, k, stride, height, width):
    """Integer bin boundaries (hstart, hend, wstart, wend) per (m, n)."""
    x1, y1, x2, y2 = [v / stride for v in roi]
    bw, bh = (x2 - x1) / k, (y2 - y1) / k
    bins = {}
    for m in range(k):
        for n in range(k):
            hs = min(max(math.floor(y1 + m * bh), 0), height)
            he = min(max(math.ceil(y1 + (m + 1) * bh), 0), height)
            ws = min(max(math.floor(x1 + n * bw), 0), width)
            we = min(max(math.ceil(x1 + (n + 1) * bw), 0), width)
            bins[m, n] = (hs, he, ws, we)
    return bins


def psroi_pixel_loop(maps, roi, k, groups, stride):
    """Per-pixel average over each bin of the map assigned to (m, n, g)."""
    _, height, width = maps.shape
    bins = psroi_bins(roi, k, stride, height, width)
    out = np.zeros((k, k, groups))
    for m in range(k):
        for n in range(k):
            hs, he, ws, we = bins[m, n]
            for g in range(groups):
                channel = g * k * k + m * k + n
                total, count = 0.0, 0
                for r in range(hs, he):
                    for c in range(ws, we):
                        total += maps[channel, r, c] / 1.0
                        count += 1
                out[m, n, g] = total / count if count else 0.0
    return out


def iou_pair(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms_reference(boxes, scores, thresh):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou_pair(boxes[i], boxes[j]) <= thresh for j in keep):
            keep.append(i)
    return keep
