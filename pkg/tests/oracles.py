"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package; each function recomputes its quantity from
first principles with plain loops.
"""

from collections import deque
from itertools import product

import numpy as np


def auc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ordered correctly, ties counting half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def average_precision_sweep(scores, labels):
    """Sweep every distinct score as a cutoff, from high to low; sum precision x recall step."""
    n_pos = sum(1 for y in labels if y)
    prev_recall, ap = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        called = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(1 for y in called if y)
        recall = tp / n_pos
        precision = tp / len(called)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def kappa_table(a, b):
    cats = sorted(set(a) | set(b))
    n = len(a)
    p_o = sum(1 for x, y in zip(a, b) if x == y) / n
    p_e = sum((sum(1 for x in a if x == c) / n) * (sum(1 for y in b if y == c) / n) for c in cats)
    return (p_o - p_e) / (1 - p_e)


def dice_count(a, b, code):
    inter = size_a = size_b = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        ia, ib = x == code, y == code
        size_a += ia
        size_b += ib
        inter += ia and ib
    return 1.0 if size_a + size_b == 0 else 2.0 * inter / (size_a + size_b)


def icc_anova(x):
    """ICC(2,1) from explicitly accumulated sums of squares."""
    x = [list(map(float, row)) for row in x]
    n, k = len(x), len(x[0])
    grand = sum(sum(r) for r in x) / (n * k)
    row_means = [sum(r) / k for r in x]
    col_means = [sum(x[i][j] for i in range(n)) / n for j in range(k)]
    ssr = k * sum((m - grand) ** 2 for m in row_means)
    ssc = n * sum((m - grand) ** 2 for m in col_means)
    sse = 0.0
    for i in range(n):
        for j in range(k):
            sse += (x[i][j] - row_means[i] - col_means[j] + grand) ** 2
    msr, msc, mse = ssr / (n - 1), ssc / (k - 1), sse / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)


def flood_fill_count(plane, eight=True):
    """Number of connected foreground components by breadth-first search."""
    plane = np.asarray(plane, dtype=bool)
    h, w = plane.shape
    seen = np.zeros_like(plane)
    steps = [(dr, dc) for dr, dc in product((-1, 0, 1), repeat=2) if (dr, dc) != (0, 0)]
    if not eight:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    count = 0
    for r in range(h):
        for c in range(w):
            if plane[r, c] and not seen[r, c]:
                count += 1
                seen[r, c] = True
                queue = deque([(r, c)])
                while queue:
                    pr, pc = queue.popleft()
                    for dr, dc in steps:
                        nr, nc = pr + dr, pc + dc
                        if 0 <= nr < h and 0 <= nc < w and plane[nr, nc] and not seen[nr, nc]:
                            seen[nr, nc] = True
                            queue.append((nr, nc))
    return count


def flood_fill_labels(plane, eight=True):
    plane = np.asarray(plane, dtype=bool)
    h, w = plane.shape
    labels = np.zeros(plane.shape, dtype=int)
    steps = [(dr, dc) for dr, dc in product((-1, 0, 1), repeat=2) if (dr, dc) != (0, 0)]
    if not eight:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    nxt = 0
    for r in range(h):
        for c in range(w):
            if plane[r, c] and not labels[r, c]:
                nxt += 1
                labels[r, c] = nxt
                queue = deque([(r, c)])
                while queue:
                    pr, pc = queue.popleft()
                    for dr, dc in steps:
                        nr, nc = pr + dr, pc + dc
                        if 0 <= nr < h and 0 <= nc < w and plane[nr, nc] and not labels[nr, nc]:
                            labels[nr, nc] = nxt
                            queue.append((nr, nc))
    return labels, nxt


def match_enumerate(pred, truth):
    """(detected, missed, false positives) by enumerating component pixel sets."""
    tl, nt = flood_fill_labels(truth)
    pl, npred = flood_fill_labels(pred)
    pred = np.asarray(pred, bool)
    truth = np.asarray(truth, bool)
    detected = sum(1 for i in range(1, nt + 1) if (pred & (tl == i)).any())
    fp = sum(1 for j in range(1, npred + 1) if not (truth & (pl == j)).any())
    return detected, nt - detected, fp


def direct_conv2d(x, w):
    """'same' zero-padded cross-correlation of one (H, W) image with a (k, k) kernel."""
    k = w.shape[0]
    p = k // 2
    h, wd = x.shape
    xp = np.pad(x, p)
    out = np.zeros((h, wd))
    for r in range(h):
        for c in range(wd):
            out[r, c] = sum(xp[r + i, c + j] * w[i, j] for i in range(k) for j in range(k))
    return out
