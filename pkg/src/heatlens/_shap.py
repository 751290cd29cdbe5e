"""Compiled path-dependent TreeSHAP for one tree.

The unique path lives in four flat buffers; each level of the walk works
on its own slice starting at ``off`` so parents stay intact.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _extend(pf, pz, po, pw, off, depth, zero, one, feat):
    pf[off + depth] = feat
    pz[off + depth] = zero
    po[off + depth] = one
    pw[off + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[off + i + 1] += one * pw[off + i] * (i + 1) / (depth + 1)
        pw[off + i] = zero * pw[off + i] * (depth - i) / (depth + 1)


@njit(cache=True, nogil=True)
def _unwind(pf, pz, po, pw, off, depth, k):
    one = po[off + k]
    zero = pz[off + k]
    nxt = pw[off + depth]
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = pw[off + i]
            pw[off + i] = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - pw[off + i] * zero * (depth - i) / (depth + 1)
        else:
            pw[off + i] = pw[off + i] * (depth + 1) / (zero * (depth - i))
    for i in range(k, depth):
        pf[off + i] = pf[off + i + 1]
        pz[off + i] = pz[off + i + 1]
        po[off + i] = po[off + i + 1]


@njit(cache=True, nogil=True)
def _unwound_sum(pz, po, pw, off, depth, k):
    one = po[off + k]
    zero = pz[off + k]
    nxt = pw[off + depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = pw[off + i] - tmp * zero * (depth - i) / (depth + 1)
        else:
            total += pw[off + i] / zero / ((depth - i) / (depth + 1))
    return total


@njit(cache=True, nogil=True)
def _tree(x, feature, threshold, left, right, value, cover, phi, scale, pf, pz, po, pw, dummy):
    # depth-first walk with an explicit stack; a frame is
    # (node, path depth, parent offset, zero fraction, one fraction, feature)
    cap = 2 * feature.size + 2
    s_node = np.empty(cap, dtype=np.int64)
    s_depth = np.empty(cap, dtype=np.int64)
    s_off = np.empty(cap, dtype=np.int64)
    s_feat = np.empty(cap, dtype=np.int64)
    s_zero = np.empty(cap)
    s_one = np.empty(cap)
    s_node[0], s_depth[0], s_off[0], s_feat[0], s_zero[0], s_one[0] = 0, 0, 0, dummy, 1.0, 1.0
    top = 1
    while top > 0:
        top -= 1
        node, depth, parent_off = s_node[top], s_depth[top], s_off[top]
        off = parent_off + depth
        for i in range(depth):
            pf[off + i] = pf[parent_off + i]
            pz[off + i] = pz[parent_off + i]
            po[off + i] = po[parent_off + i]
            pw[off + i] = pw[parent_off + i]
        _extend(pf, pz, po, pw, off, depth, s_zero[top], s_one[top], s_feat[top])
        f = feature[node]
        if f < 0:
            for i in range(1, depth + 1):
                w = _unwound_sum(pz, po, pw, off, depth, i)
                phi[pf[off + i]] += w * (po[off + i] - pz[off + i]) * value[node] * scale
            continue
        if x[f] < threshold[node]:
            hot, cold = left[node], right[node]
        else:
            hot, cold = right[node], left[node]
        iz = 1.0
        io = 1.0
        k = 0
        while k <= depth:
            if pf[off + k] == f:
                break
            k += 1
        if k <= depth:
            iz = pz[off + k]
            io = po[off + k]
            _unwind(pf, pz, po, pw, off, depth, k)
            depth -= 1
        # cold is pushed first so the hot subtree is finished before it
        s_node[top], s_depth[top], s_off[top], s_feat[top] = cold, depth + 1, off, f
        s_zero[top], s_one[top] = cover[cold] / cover[node] * iz, 0.0
        top += 1
        s_node[top], s_depth[top], s_off[top], s_feat[top] = hot, depth + 1, off, f
        s_zero[top], s_one[top] = cover[hot] / cover[node] * iz, io
        top += 1


@njit(cache=True, nogil=True)
def tree_shap_rows(X, offsets, feature, threshold, left, right, value, cover, max_depth, scale):
    """Attributions for every row of X over all trees stored back to back."""
    n, p = X.shape
    phi = np.zeros((n, p + 1))  # spare last column for the dummy root feature
    size = (max_depth + 2) * (max_depth + 3) // 2 + max_depth + 2
    pf = np.zeros(size, dtype=np.int64)
    pz = np.zeros(size)
    po = np.zeros(size)
    pw = np.zeros(size)
    for r in range(n):
        for t in range(offsets.size - 1):
            o = offsets[t]
            e = offsets[t + 1]
            _tree(X[r], feature[o:e], threshold[o:e], left[o:e], right[o:e], value[o:e], cover[o:e],
                  phi[r], scale, pf, pz, po, pw, p)
    return phi[:, :p].copy()
