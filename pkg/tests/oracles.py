"""Independent reference implementations used as test oracles.

Nothing here imports the package under test; the point is to compute the
same quantities a second, deliberately naive way.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (x is restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# ---------------------------------------------------------------------- attention


def _mat(a):
    return [[float(v) for v in row] for row in np.asarray(a)]


def _mm(a, b):
    n, k, m = len(a), len(b), len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s = s + a[i][p] * b[p][j]
            out[i][j] = s
    return out


def brute_attention_head(x, obs, wq, wk, wv, d_h):
    """ReLU(softmax(Q K^T / sqrt(d_h) + M) + M^T) V for one head, with loops."""
    x, wq, wk, wv = _mat(x), _mat(wq), _mat(wk), _mat(wv)
    t = len(x)
    q, k, v = _mm(x, wq), _mm(x, wk), _mm(x, wv)
    inv = 1.0 / math.sqrt(d_h)
    m = [[0.0 if obs[j] else -math.inf for j in range(t)] for _ in range(t)]
    weights = []
    for i in range(t):
        z = []
        for j in range(t):
            dot = 0.0
            for p in range(d_h):
                dot = dot + q[i][p] * k[j][p]
            z.append(dot * inv + m[i][j])
        finite = [zj for zj in z if zj != -math.inf]
        if finite:
            top = max(finite)
            e = [math.exp(zj - top) if zj != -math.inf else 0.0 for zj in z]
            s = 0.0
            for ej in e:
                s = s + ej
            row = [ej / s for ej in e]
        else:
            row = [0.0] * t
        # M^T: row i is -inf wherever token i is unobserved
        row = [max(0.0, row[j] + m[j][i]) for j in range(t)]
        weights.append(row)
    return _mm(weights, v)


def brute_msa(x, obs, w_q, w_k, w_v, w_o, heads):
    d_e = np.asarray(x).shape[1]
    d_h = d_e // heads
    parts = []
    for h in range(heads):
        cols = slice(h * d_h, (h + 1) * d_h)
        parts.append(brute_attention_head(x, obs, w_q[:, cols], w_k[:, cols], w_v[:, cols], d_h))
    t = len(parts[0])
    joined = [[v for part in parts for v in part[i]] for i in range(t)]
    return np.array(_mm(joined, _mat(w_o)))


# ---------------------------------------------------------------------- metrics


def pair_count_auc(scores, labels) -> float:
    """AUC by counting every positive/negative pair; ties score one half."""
    wins = 0.0
    pairs = 0
    for sp, lp in zip(scores, labels):
        if lp != 1:
            continue
        for sn, ln in zip(scores, labels):
            if ln != 0:
                continue
            pairs += 1
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / pairs


def brute_mcc(pred, true, n_classes: int) -> float:
    """Matthews correlation as the Pearson correlation of one-hot indicator vectors."""
    n = len(pred)
    x = [[1.0 if pred[s] == k else 0.0 for k in range(n_classes)] for s in range(n)]
    y = [[1.0 if true[s] == k else 0.0 for k in range(n_classes)] for s in range(n)]
    xm = [sum(x[s][k] for s in range(n)) / n for k in range(n_classes)]
    ym = [sum(y[s][k] for s in range(n)) / n for k in range(n_classes)]
    cov = sum((x[s][k] - xm[k]) * (y[s][k] - ym[k]) for s in range(n) for k in range(n_classes))
    vx = sum((x[s][k] - xm[k]) ** 2 for s in range(n) for k in range(n_classes))
    vy = sum((y[s][k] - ym[k]) ** 2 for s in range(n) for k in range(n_classes))
    if vx == 0 or vy == 0:
        return 0.0
    return cov / math.sqrt(vx * vy)


def all_binary_labelings(n: int):
    """Every 0/1 labeling of ``n`` samples that has both classes."""
    for bits in itertools.product((0, 1), repeat=n):
        if 0 < sum(bits) < n:
            yield list(bits)


# ---------------------------------------------------------------------- kNN


def brute_knn_fill(rows, observed, train, target_row, col, k):
    """Mean of ``col`` over the k nearest training rows (numerical only).

    Distance: squared differences over mutually observed columns, scaled by
    total columns / shared columns. Ties broken by training order.
    """
    n_cols = len(rows[0])
    cands = []
    for pos, r in enumerate(train):
        if r == target_row or not observed[r][col]:
            continue
        shared = [c for c in range(n_cols) if observed[r][c] and observed[target_row][c]]
        if not shared:
            continue
        d = sum((rows[r][c] - rows[target_row][c]) ** 2 for c in shared) * n_cols / len(shared)
        cands.append((d, pos, rows[r][col]))
    cands.sort(key=lambda c: (c[0], c[1]))
    picked = [c[2] for c in cands[:k]]
    return sum(picked) / len(picked)
