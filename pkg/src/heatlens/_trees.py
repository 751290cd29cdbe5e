"""Compiled kernels for exact greedy regression trees.

A tree is a set of flat arrays indexed by node: ``feature`` (-1 on leaves),
``threshold``, ``left``, ``right``, ``value`` (raw leaf weight), ``gain``
and ``cover``. Node 0 is the root and children always follow their parent.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def grow_tree(X, order, g, h, active, max_depth, lam, gamma, min_child_weight):
    """Grow one tree level by level on the rows flagged in ``active``.

    ``order[f]`` lists every row sorted by feature f. A split is kept only
    with strictly positive gain; among equal gains the first candidate in
    (feature, threshold) order wins.
    """
    n, p = X.shape
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    cover = np.zeros(cap)
    G = np.zeros(cap)
    H = np.zeros(cap)

    node_of = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if active[i]:
            node_of[i] = 0
            G[0] += g[i]
            H[0] += h[i]
    n_nodes = 1
    level_start = 0
    level_end = 1

    best_gain = np.zeros(cap)
    best_feat = np.full(cap, -1, dtype=np.int64)
    best_thr = np.zeros(cap)
    GL = np.zeros(cap)
    HL = np.zeros(cap)
    last = np.zeros(cap)
    seen = np.zeros(cap, dtype=np.bool_)

    for depth in range(max_depth):
        for k in range(level_start, level_end):
            best_gain[k] = 0.0
            best_feat[k] = -1
        for f in range(p):
            for k in range(level_start, level_end):
                GL[k] = 0.0
                HL[k] = 0.0
                seen[k] = False
            for t in range(n):
                i = order[f, t]
                k = node_of[i]
                if k < level_start:
                    continue
                v = X[i, f]
                if seen[k] and v > last[k]:
                    hl = HL[k]
                    hr = H[k] - hl
                    if hl >= min_child_weight and hr >= min_child_weight:
                        gl = GL[k]
                        gr = G[k] - gl
                        gn = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - G[k] * G[k] / (H[k] + lam)) - gamma
                        if gn > best_gain[k]:
                            best_gain[k] = gn
                            best_feat[k] = f
                            thr = 0.5 * (last[k] + v)
                            if thr <= last[k]:
                                thr = v
                            best_thr[k] = thr
                GL[k] += g[i]
                HL[k] += h[i]
                last[k] = v
                seen[k] = True
        new_start = n_nodes
        for k in range(level_start, level_end):
            if best_feat[k] >= 0:
                feature[k] = best_feat[k]
                threshold[k] = best_thr[k]
                gain[k] = best_gain[k]
                left[k] = n_nodes
                right[k] = n_nodes + 1
                n_nodes += 2
        if n_nodes == new_start:
            break
        for i in range(n):
            k = node_of[i]
            if k >= level_start and feature[k] >= 0:
                c = left[k] if X[i, feature[k]] < threshold[k] else right[k]
                node_of[i] = c
                G[c] += g[i]
                H[c] += h[i]
            elif k >= 0 and k >= level_start:
                node_of[i] = -1 - k  # settled in a leaf, park it below every level
        level_start = new_start
        level_end = n_nodes

    for k in range(n_nodes):
        cover[k] = H[k]
        if feature[k] < 0:
            value[k] = -G[k] / (H[k] + lam)
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), gain[:n_nodes].copy(), cover[:n_nodes].copy())


@njit(cache=True, nogil=True)
def predict_tree(X, feature, threshold, left, right, value, out, scale):
    """``out += scale * leaf value`` for every row of X."""
    for i in range(X.shape[0]):
        k = 0
        while feature[k] >= 0:
            k = left[k] if X[i, feature[k]] < threshold[k] else right[k]
        out[i] += scale * value[k]


@njit(cache=True, nogil=True)
def predict_forest(X, offsets, feature, threshold, left, right, value, base, scale):
    """Sum of all trees stored back to back; tree t occupies nodes offsets[t]:offsets[t+1]."""
    n = X.shape[0]
    out = np.full(n, base)
    for i in range(n):
        acc = 0.0
        for t in range(offsets.size - 1):
            o = offsets[t]
            k = 0
            while feature[o + k] >= 0:
                k = left[o + k] if X[i, feature[o + k]] < threshold[o + k] else right[o + k]
            acc += value[o + k]
        out[i] = base + scale * acc
    return out


@njit(cache=True, nogil=True)
def boost(X, order, y, w, base, active, eta, max_depth, lam, gamma, min_child_weight):
    """Run the whole boosting loop; ``active[t]`` flags the rows tree t may use.

    Returns node arrays stacked per tree (row t holds ``sizes[t]`` nodes),
    the weighted training loss trace, per-iteration held-out RMSE and the
    final in-sample predictions.
    """
    T = active.shape[0]
    n = X.shape[0]
    cap = 2 ** (max_depth + 1) - 1
    feat = np.full((T, cap), -1, dtype=np.int64)
    thr = np.zeros((T, cap))
    lft = np.full((T, cap), -1, dtype=np.int64)
    rgt = np.full((T, cap), -1, dtype=np.int64)
    val = np.zeros((T, cap))
    gn = np.zeros((T, cap))
    cov = np.zeros((T, cap))
    sizes = np.zeros(T, dtype=np.int64)
    pred = np.full(n, base)
    g = np.empty(n)
    wsum = 0.0
    for i in range(n):
        wsum += w[i]
    loss = np.empty(T + 1)
    oob = np.full(T, np.nan)
    acc = 0.0
    for i in range(n):
        acc += w[i] * (y[i] - pred[i]) ** 2
    loss[0] = acc / wsum
    for t in range(T):
        for i in range(n):
            g[i] = w[i] * (pred[i] - y[i])
        f, th, le, ri, v, ga, co = grow_tree(X, order, g, w, active[t], max_depth, lam, gamma, min_child_weight)
        m = f.size
        sizes[t] = m
        feat[t, :m] = f
        thr[t, :m] = th
        lft[t, :m] = le
        rgt[t, :m] = ri
        val[t, :m] = v
        gn[t, :m] = ga
        cov[t, :m] = co
        predict_tree(X, f, th, le, ri, v, pred, eta)
        acc = 0.0
        sq = 0.0
        cnt = 0
        for i in range(n):
            e = y[i] - pred[i]
            acc += w[i] * e * e
            if w[i] > 0 and not active[t, i]:
                sq += e * e
                cnt += 1
        loss[t + 1] = acc / wsum
        if cnt > 0:
            oob[t] = np.sqrt(sq / cnt)
    return feat, thr, lft, rgt, val, gn, cov, sizes, loss, oob, pred
