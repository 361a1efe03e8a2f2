"""Brute-force reference implementations, written without numpy vectorisation
and without importing the package's own helpers."""

from __future__ import annotations

import math
from functools import lru_cache


def runs(labels):
    """[(stage, start, end)] by a plain scan."""
    out = []
    for i, v in enumerate(labels):
        if out and out[-1][0] == v:
            out[-1] = (v, out[-1][1], i + 1)
        else:
            out.append((v, i, i + 1))
    return out


def accuracy(pred, gt):
    hits = 0
    for a, b in zip(pred, gt):
        hits += int(a == b)
    return 100.0 * hits / len(gt)


def edit_distance(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(rec(i - 1, j) + 1, rec(i, j - 1) + 1, rec(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return rec(len(a), len(b))


def edit(pred, gt):
    p = [r[0] for r in runs(pred)]
    g = [r[0] for r in runs(gt)]
    return max(0.0, 100.0 * (1 - edit_distance(p, g) / max(len(p), len(g))))


def f1(pred, gt, k):
    """Frame-set IoU; every predicted run picks its best same-label gt run
    (first on ties) and scores only if unclaimed and IoU > k/100."""
    p_runs, g_runs = runs(pred), runs(gt)
    claimed = [False] * len(g_runs)
    tp = fp = 0
    for lab, s, e in p_runs:
        ps = set(range(s, e))
        best, best_j = -1.0, None
        for j, (gl, gs, ge) in enumerate(g_runs):
            gset = set(range(gs, ge))
            iou = len(ps & gset) / len(ps | gset) if gl == lab else 0.0
            if iou > best:
                best, best_j = iou, j
        if best > k / 100 and not claimed[best_j]:
            claimed[best_j] = True
            tp += 1
        else:
            fp += 1
    fn = claimed.count(False)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 0.0 if prec + rec == 0 else 100.0 * 2 * prec * rec / (prec + rec)


def per_class(pred, gt):
    out = {}
    for s in sorted(set(gt)):
        n = sum(1 for g in gt if g == s)
        hit = sum(1 for p, g in zip(pred, gt) if g == s and p == s)
        out[s] = 100.0 * hit / n
    return out


def gaussian_smooth(raw, sigma):
    h = math.ceil(3 * sigma)
    w = [math.exp(-0.5 * (i / sigma) ** 2) for i in range(-h, h + 1)]
    z = sum(w)
    w = [v / z for v in w]
    out = []
    for t in range(len(raw)):
        acc = 0.0
        for i in range(-h, h + 1):
            if 0 <= t - i < len(raw):
                acc += w[i + h] * raw[t - i]
        out.append(min(1.0, max(0.0, acc)))
    return out


def cosine_bar_alpha(t, S, s=0.008):
    f = lambda u: math.cos(((u / S + s) / (1 + s)) * math.pi / 2) ** 2
    return f(t) / f(0)


def sinusoid(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = [math.exp(-math.log(max_period) * i / half) for i in range(half)]
    return [math.sin(t * f) for f in freqs] + [math.cos(t * f) for f in freqs]


def ce(logits_row, y):
    m = max(logits_row)
    lse = m + math.log(sum(math.exp(v - m) for v in logits_row))
    return lse - logits_row[y]


def log_softmax(row):
    m = max(row)
    lse = m + math.log(sum(math.exp(v - m) for v in row))
    return [v - lse for v in row]


def smooth(logits, tau=4.0):
    T, c = len(logits), len(logits[0])
    lp = [log_softmax(r) for r in logits]
    tot = 0.0
    for t in range(1, T):
        for k in range(c):
            tot += min((lp[t][k] - lp[t - 1][k]) ** 2, tau * tau)
    return tot / ((T - 1) * c)


def bce(logit, target):
    p = 1 / (1 + math.exp(-logit))
    return -(target * math.log(p) + (1 - target) * math.log(1 - p))
