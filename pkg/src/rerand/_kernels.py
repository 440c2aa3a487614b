"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The two inner loops that dominate runtime live here: quadratic-form balance
metrics evaluated once per candidate randomization, and CART regression-tree
construction for the forest outcome model.  Each kernel ships in two forms:

* a loop-style implementation compiled with ``numba.njit`` (the default when
  numba is importable), and
* a fallback that runs without numba.  Balance metrics fall back to
  vectorized numpy (fast); tree building falls back to the identical
  loop function interpreted by CPython (slow but bit-compatible).

Set ``RERAND_BACKEND=numpy`` to force the fallback, ``RERAND_BACKEND=numba``
to require the compiled path, or leave it unset to auto-detect.  Kernels take
plain arrays and hold no random state; all randomness (bootstrap rows,
feature subsets) is drawn by callers from seeded numpy generators, so results
for a fixed seed do not depend on the backend beyond float rounding.
``benchmarks/bench_backends.py`` measures the gap between the two paths.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "NUMBA_ENABLED",
    "backend_name",
    "quad_form_batch",
    "quad_form_one",
    "tree_build",
    "forest_predict",
    "TREE_CAP_FACTOR",
]

_choice = os.environ.get("RERAND_BACKEND", "auto").strip().lower() or "auto"
if _choice not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"RERAND_BACKEND must be 'numba', 'numpy', or unset; got {_choice!r}"
    )

if _choice == "numpy":
    NUMBA_ENABLED = False
else:
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:
        if _choice == "numba":
            raise
        NUMBA_ENABLED = False


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


def _jit(fn):
    if NUMBA_ENABLED:
        return _njit(cache=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# Quadratic-form balance metrics
#
# For an assignment z with arm sizes (n1, n0) and centered covariate matrix
# xc, the metric is diff' A diff with diff the treated-minus-control mean
# difference.  ``scale`` carries any assignment-dependent factor (n1*n0/n for
# the Mahalanobis form) so A itself can be cached per dataset.
# ---------------------------------------------------------------------------


def _quad_form_batch_loops(zmat, xc, n1, n0, amat, scale):
    nb, n = zmat.shape
    d = xc.shape[1]
    out = np.empty(nb)
    diff = np.empty(d)
    for b in range(nb):
        for j in range(d):
            diff[j] = 0.0
        for i in range(n):
            if zmat[b, i] == 1:
                for j in range(d):
                    diff[j] += xc[i, j] / n1
            else:
                for j in range(d):
                    diff[j] -= xc[i, j] / n0
        acc = 0.0
        for j in range(d):
            row = 0.0
            for l in range(d):
                row += amat[j, l] * diff[l]
            acc += diff[j] * row
        out[b] = scale * acc
    return out


def _quad_form_batch_numpy(zmat, xc, n1, n0, amat, scale):
    zf = zmat.astype(np.float64)
    s1 = zf @ xc
    s0 = xc.sum(axis=0) - s1
    diff = s1 / n1 - s0 / n0
    return scale * np.einsum("bi,ij,bj->b", diff, amat, diff)


def _quad_form_one_loops(z, xc, n1, n0, amat, scale):
    n, d = xc.shape
    diff = np.zeros(d)
    for i in range(n):
        if z[i] == 1:
            for j in range(d):
                diff[j] += xc[i, j] / n1
        else:
            for j in range(d):
                diff[j] -= xc[i, j] / n0
    acc = 0.0
    for j in range(d):
        row = 0.0
        for l in range(d):
            row += amat[j, l] * diff[l]
        acc += diff[j] * row
    return scale * acc


def _quad_form_one_numpy(z, xc, n1, n0, amat, scale):
    zf = z.astype(np.float64)
    s1 = zf @ xc
    diff = s1 / n1 - (xc.sum(axis=0) - s1) / n0
    return float(scale * diff @ amat @ diff)


if NUMBA_ENABLED:
    quad_form_batch = _jit(_quad_form_batch_loops)
    quad_form_one = _jit(_quad_form_one_loops)
else:
    quad_form_batch = _quad_form_batch_numpy
    quad_form_one = _quad_form_one_numpy


# ---------------------------------------------------------------------------
# CART regression trees (flat-array representation)
#
# Node storage: feature[i] < 0 marks a leaf with prediction value[i];
# otherwise rows with x[:, feature[i]] <= thresh[i] go to left[i].  The
# feature subsets tried at each split come from ``feat_pool`` (one row per
# created node, drawn by the caller), which keeps the kernel free of RNG and
# makes the built tree independent of the backend.  Capacity bound: with
# min_leaf >= 1 a tree on m rows has at most 2m - 1 nodes.
# ---------------------------------------------------------------------------

TREE_CAP_FACTOR = 2


def _tree_build_impl(x, y, feat_pool, max_depth, min_leaf):
    m = x.shape[0]
    cap = TREE_CAP_FACTOR * m + 1
    feature = np.full(cap, -1, np.int64)
    thresh = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)

    idx = np.arange(m)
    buf = np.empty(m, np.int64)
    stack_s = np.empty(cap, np.int64)
    stack_e = np.empty(cap, np.int64)
    stack_d = np.empty(cap, np.int64)
    stack_id = np.empty(cap, np.int64)
    stack_s[0] = 0
    stack_e[0] = m
    stack_d[0] = 0
    stack_id[0] = 0
    top = 1
    n_nodes = 1
    mtry = feat_pool.shape[1]

    while top > 0:
        top -= 1
        s = stack_s[top]
        e = stack_e[top]
        depth = stack_d[top]
        nid = stack_id[top]
        mn = e - s

        total = 0.0
        ymin = y[idx[s]]
        ymax = ymin
        for i in range(s, e):
            yi = y[idx[i]]
            total += yi
            if yi < ymin:
                ymin = yi
            if yi > ymax:
                ymax = yi
        value[nid] = total / mn

        if depth >= max_depth or mn < 2 * min_leaf or ymin == ymax:
            continue

        best_gain = -1.0
        best_feat = -1
        best_thr = 0.0
        for fpos in range(mtry):
            f = feat_pool[nid, fpos]
            xs = np.empty(mn)
            ys = np.empty(mn)
            for i in range(mn):
                xs[i] = x[idx[s + i], f]
            order = np.argsort(xs)
            for i in range(mn):
                ys[i] = y[idx[s + order[i]]]
            xs = xs[order]
            run = 0.0
            for i in range(1, mn):
                run += ys[i - 1]
                if xs[i] == xs[i - 1]:
                    continue
                nl = i
                nr = mn - i
                if nl < min_leaf or nr < min_leaf:
                    continue
                sl = run
                sr = total - run
                gain = sl * sl / nl + sr * sr / nr
                if gain > best_gain:
                    best_gain = gain
                    best_feat = f
                    best_thr = 0.5 * (xs[i - 1] + xs[i])

        if best_feat < 0:
            continue

        # Stable partition of idx[s:e] on the chosen split.
        nl = 0
        for i in range(s, e):
            if x[idx[i], best_feat] <= best_thr:
                buf[nl] = idx[i]
                nl += 1
        nr = nl
        for i in range(s, e):
            if x[idx[i], best_feat] > best_thr:
                buf[nr] = idx[i]
                nr += 1
        for i in range(mn):
            idx[s + i] = buf[i]

        feature[nid] = best_feat
        thresh[nid] = best_thr
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        left[nid] = lid
        right[nid] = rid
        stack_s[top] = s + nl
        stack_e[top] = e
        stack_d[top] = depth + 1
        stack_id[top] = rid
        top += 1
        stack_s[top] = s
        stack_e[top] = s + nl
        stack_d[top] = depth + 1
        stack_id[top] = lid
        top += 1

    return feature[:n_nodes], thresh[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


tree_build = _jit(_tree_build_impl)


def _forest_predict_loops(feature, thresh, left, right, value, offsets, xq):
    q = xq.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(q)
    for t in range(n_trees):
        base = offsets[t]
        for i in range(q):
            node = base
            while feature[node] >= 0:
                if xq[i, feature[node]] <= thresh[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            out[i] += value[node]
    return out / n_trees


forest_predict = _jit(_forest_predict_loops)
