"""Numba kernels for CART regression trees.

Trees are stored as flat arrays (``feature``, ``threshold``, ``left``,
``right``, ``value``); a leaf has ``feature == -1``.  A forest is the
concatenation of its trees with child indices already offset, plus the root
index of every tree.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def build_tree(X, w, wy, wyy, max_depth, min_leaf, min_split, n_try, seed):
    """Grow one tree on weighted rows.

    Row ``r`` stands for ``w[r]`` identical samples whose targets sum to
    ``wy[r]`` and whose squared targets sum to ``wyy[r]``; this covers both
    bootstrap counts and exact duplicates of a covariate row.  Sample-count
    limits (``min_leaf``, ``min_split``) are applied to the weights.
    """
    n, d = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)

    if n_try < d:
        np.random.seed(seed)
    idx = np.arange(n)
    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    top = 1
    n_nodes = 1
    all_features = np.arange(d)
    ws = np.empty(n)
    wys = np.empty(n)

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        m = end - start

        wsum = 0.0
        ysum = 0.0
        ysq = 0.0
        for k in range(start, end):
            r = idx[k]
            wsum += w[r]
            ysum += wy[r]
            ysq += wyy[r]
        value[node] = ysum / wsum
        sse = ysq - ysum * ysum / wsum
        if m < 2 or wsum < min_split or wsum < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        if sse <= 1e-12 * (ysq + 1e-300):
            continue

        if n_try < d:
            feats = np.sort(np.random.permutation(d)[:n_try])
        else:
            feats = all_features

        best_score = ysum * ysum / wsum
        best_f = -1
        best_thr = 0.0
        seg = idx[start:end]
        for f in feats:
            vals = X[seg, f]
            order = np.argsort(vals, kind="mergesort")
            sv = vals[order]
            if sv[0] == sv[m - 1]:
                continue
            for k in range(m):
                r = seg[order[k]]
                ws[k] = w[r]
                wys[k] = wy[r]
            cw = 0.0
            cy = 0.0
            for k in range(m - 1):
                cw += ws[k]
                cy += wys[k]
                if sv[k] == sv[k + 1]:
                    continue
                if cw < min_leaf or wsum - cw < min_leaf:
                    continue
                rest = ysum - cy
                score = cy * cy / cw + rest * rest / (wsum - cw)
                if score > best_score:
                    best_score = score
                    best_f = f
                    thr = 0.5 * (sv[k] + sv[k + 1])
                    if thr >= sv[k + 1]:
                        thr = sv[k]
                    best_thr = thr
        if best_f < 0:
            continue

        # partition idx[start:end] in place: <= threshold goes left
        i = start
        j = end - 1
        while i <= j:
            if X[idx[i], best_f] <= best_thr:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        mid = i

        feature[node] = best_f
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        st_node[top] = rc
        st_start[top] = mid
        st_end[top] = end
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_start[top] = start
        st_end[top] = mid
        st_depth[top] = depth + 1
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
    )


@numba.njit(cache=True)
def _leaf_value(x, feature, threshold, left, right, value, node):
    while feature[node] >= 0:
        if x[feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return value[node]


@numba.njit(cache=True)
def predict_forest(X, feature, threshold, left, right, value, roots):
    n = X.shape[0]
    out = np.zeros(n)
    for r in range(n):
        acc = 0.0
        for t in range(roots.size):
            acc += _leaf_value(X[r], feature, threshold, left, right, value, roots[t])
        out[r] = acc / roots.size
    return out


@numba.njit(cache=True)
def predict_trees(X, feature, threshold, left, right, value, roots):
    """Per-tree predictions, shape ``(n_trees, n_rows)``."""
    n = X.shape[0]
    out = np.empty((roots.size, n))
    for t in range(roots.size):
        for r in range(n):
            out[t, r] = _leaf_value(X[r], feature, threshold, left, right, value, roots[t])
    return out


@numba.njit(cache=True)
def oob_predict(X, feature, threshold, left, right, value, roots, inbag):
    """Average over trees whose bootstrap sample missed each row.

    ``inbag[t, r]`` counts how often row ``r`` was drawn for tree ``t``.
    Rows never out of bag get NaN.
    """
    n = X.shape[0]
    acc = np.zeros(n)
    cnt = np.zeros(n)
    for t in range(roots.size):
        for r in range(n):
            if inbag[t, r] == 0:
                acc[r] += _leaf_value(X[r], feature, threshold, left, right, value, roots[t])
                cnt[r] += 1.0
    out = np.empty(n)
    for r in range(n):
        out[r] = acc[r] / cnt[r] if cnt[r] > 0 else np.nan
    return out
