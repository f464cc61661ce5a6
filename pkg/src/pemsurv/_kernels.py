"""numba kernels for level-wise tree growing and ensemble prediction.

Rows are tracked by ``pos``: the index of the row's node within the current
tree level, or -1 once the row sits in a finished leaf (or was not sampled).
"""
import numpy as np
from numba import njit

HESS_FLOOR = 1e-16


@njit(cache=True)
def split_gain(gl, hl, gr, hr, lam):
    return 0.5 * (
        gl * gl / max(hl + lam, HESS_FLOOR)
        + gr * gr / max(hr + lam, HESS_FLOOR)
        - (gl + gr) * (gl + gr) / max(hl + hr + lam, HESS_FLOOR)
    )


@njit(cache=True)
def scan_sorted(svals, order, pos, g, h, G, H, lam, mcw, gamma, forced, best_gain, best_thr):
    """Exact greedy scan of one numeric feature over all nodes of a level.

    ``svals[i]`` is the feature value of row ``order[i]``, ascending. A
    candidate split sits between two consecutive distinct values inside a
    node; rows with ``x < thr`` go left.
    """
    n_nodes = G.shape[0]
    GL = np.zeros(n_nodes)
    HL = np.zeros(n_nodes)
    cnt = np.zeros(n_nodes, np.int64)
    last = np.zeros(n_nodes)
    for idx in range(order.shape[0]):
        r = order[idx]
        p = pos[r]
        if p < 0:
            continue
        v = svals[idx]
        if cnt[p] > 0 and v != last[p]:
            hr = H[p] - HL[p]
            if forced or (HL[p] >= mcw and hr >= mcw):
                gain = split_gain(GL[p], HL[p], G[p] - GL[p], hr, lam) - gamma
                if gain > best_gain[p]:
                    best_gain[p] = gain
                    thr = 0.5 * (last[p] + v)
                    if thr <= last[p]:
                        thr = v
                    best_thr[p] = thr
        GL[p] += g[r]
        HL[p] += h[r]
        cnt[p] += 1
        last[p] = v


@njit(cache=True)
def scan_bins(codes, n_bins, pos, g, h, G, H, C, lam, mcw, gamma, forced, one_vs_rest, best_gain, best_bin):
    """Histogram scan of one binned (or categorical) feature.

    Ordered bins split as ``bin <= b`` vs the rest; with ``one_vs_rest`` the
    candidate splits are ``bin == b`` vs the rest.
    """
    n_nodes = G.shape[0]
    Gb = np.zeros((n_nodes, n_bins))
    Hb = np.zeros((n_nodes, n_bins))
    Cb = np.zeros((n_nodes, n_bins), np.int64)
    for r in range(codes.shape[0]):
        p = pos[r]
        if p < 0:
            continue
        b = codes[r]
        Gb[p, b] += g[r]
        Hb[p, b] += h[r]
        Cb[p, b] += 1
    for p in range(n_nodes):
        gl = 0.0
        hl = 0.0
        cl = 0
        for b in range(n_bins):
            if Cb[p, b] == 0:
                continue
            if one_vs_rest:
                gl = Gb[p, b]
                hl = Hb[p, b]
                cl = Cb[p, b]
            else:
                gl += Gb[p, b]
                hl += Hb[p, b]
                cl += Cb[p, b]
            if cl == C[p]:
                continue
            hr = H[p] - hl
            if forced or (hl >= mcw and hr >= mcw):
                gain = split_gain(gl, hl, G[p] - gl, hr, lam) - gamma
                if gain > best_gain[p]:
                    best_gain[p] = gain
                    best_bin[p] = b


@njit(cache=True)
def route_rows(X, pos, split_feat, split_thr, split_cat, left_pos, g, h, new_pos, Gn, Hn, Cn):
    """Send rows of split nodes to their children and sum child statistics."""
    for r in range(pos.shape[0]):
        p = pos[r]
        if p < 0:
            new_pos[r] = -1
            continue
        f = split_feat[p]
        if f < 0:
            new_pos[r] = -1
            continue
        x = X[r, f]
        if split_cat[p]:
            go_left = x == split_thr[p]
        else:
            go_left = x < split_thr[p]
        c = left_pos[p] if go_left else left_pos[p] + 1
        new_pos[r] = c
        Gn[c] += g[r]
        Hn[c] += h[r]
        Cn[c] += 1


@njit(cache=True)
def node_sums(pos, g, h, n_nodes):
    G = np.zeros(n_nodes)
    H = np.zeros(n_nodes)
    C = np.zeros(n_nodes, np.int64)
    for r in range(pos.shape[0]):
        p = pos[r]
        if p >= 0:
            G[p] += g[r]
            H[p] += h[r]
            C[p] += 1
    return G, H, C


@njit(cache=True)
def predict_packed(X, feature, threshold, categorical, left, right, value, roots, scale, out):
    """Add ``scale * sum(leaf values)`` of every tree in ``roots`` to ``out``.

    Child indices are absolute positions in the packed node arrays.
    """
    for i in range(X.shape[0]):
        s = 0.0
        for t in range(roots.shape[0]):
            node = roots[t]
            while feature[node] >= 0:
                x = X[i, feature[node]]
                if categorical[node]:
                    go_left = x == threshold[node]
                else:
                    go_left = x < threshold[node]
                node = left[node] if go_left else right[node]
            s += value[node]
        out[i] += scale * s
