"""Hot loops with a numba path and a pure-numpy fallback.

Set ``ECHOLAB_NO_JIT=1`` (or run without numba installed) to use the
numpy implementations.  Both paths return bit-identical results for the
span pooling and Gibbs kernels; the split search agrees exactly as well
because the fallback reproduces the sequential summation order.
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - import guard
    import numba
except ImportError:  # pragma: no cover
    numba = None


def jit_enabled() -> bool:
    flag = os.environ.get("ECHOLAB_NO_JIT", "").strip().lower()
    return numba is not None and flag in ("", "0", "false", "no")


def _njit(fn):
    if numba is None:  # pragma: no cover
        return None
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------- span pooling

def _span_max_loop(X, starts, ends, out, arg):
    D = X.shape[1]
    for s in range(starts.shape[0]):
        a = starts[s]
        b = ends[s]
        if s > 0 and starts[s - 1] == a and ends[s - 1] == b - 1:
            # extend the previous span by one row
            for d in range(D):
                v = X[b - 1, d]
                if v > out[s - 1, d]:
                    out[s, d] = v
                    arg[s, d] = b - 1
                else:
                    out[s, d] = out[s - 1, d]
                    arg[s, d] = arg[s - 1, d]
            continue
        for d in range(D):
            best = X[a, d]
            bi = a
            for i in range(a + 1, b):
                v = X[i, d]
                if v > best:
                    best = v
                    bi = i
            out[s, d] = best
            arg[s, d] = bi


def _span_max_back_loop(dout, arg, acc):
    D = dout.shape[1]
    for s in range(dout.shape[0]):
        for d in range(D):
            acc[arg[s, d], d] += dout[s, d]


_span_max_nb = _njit(_span_max_loop)
_span_max_back_nb = _njit(_span_max_back_loop)


def _span_max_numpy(X, starts, ends):
    N, D = X.shape
    S = starts.shape[0]
    out = np.empty((S, D), dtype=X.dtype)
    arg = np.empty((S, D), dtype=np.int64)
    lengths = ends - starts
    if S == 0:
        return out, arg
    R = X.copy()
    A = np.broadcast_to(np.arange(N)[:, None], (N, D)).copy()
    for k in range(1, int(lengths.max()) + 1):
        if k > 1:
            nxt = X[k - 1:]
            cur = R[:N - k + 1]
            upd = nxt > cur
            cur[upd] = nxt[upd]
            A[:N - k + 1][upd] = (np.nonzero(upd)[0] + k - 1)
        sel = np.nonzero(lengths == k)[0]
        if sel.size:
            out[sel] = R[starts[sel]]
            arg[sel] = A[starts[sel]]
    return out, arg


def span_max_pool(X, starts, ends):
    """Max over rows ``X[starts[s]:ends[s]]`` per span, with argmax rows.

    Ties resolve to the earliest row.
    """
    X = np.ascontiguousarray(X)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    ends = np.ascontiguousarray(ends, dtype=np.int64)
    if starts.size and ((ends <= starts).any() or starts.min() < 0 or ends.max() > X.shape[0]):
        raise ValueError("invalid span range")
    if jit_enabled():
        out = np.empty((starts.shape[0], X.shape[1]), dtype=X.dtype)
        arg = np.empty((starts.shape[0], X.shape[1]), dtype=np.int64)
        _span_max_nb(X, starts, ends, out, arg)
        return out, arg
    return _span_max_numpy(X, starts, ends)


def span_max_pool_backward(dout, arg, n_rows: int):
    """Scatter pooled gradients back onto their argmax rows."""
    S, D = dout.shape
    if jit_enabled():
        acc = np.zeros((n_rows, D), dtype=np.float64)
        _span_max_back_nb(np.ascontiguousarray(dout), np.ascontiguousarray(arg), acc)
    else:
        flat = (arg * D + np.arange(D)[None, :]).ravel()
        acc = np.bincount(flat, weights=dout.ravel().astype(np.float64),
                          minlength=n_rows * D).reshape(n_rows, D)
    return acc.astype(dout.dtype)


# ---------------------------------------------------------------- maxout

def _maxout_loop(z, pieces, out, idx):
    w = out.shape[1]
    for i in range(z.shape[0]):
        for u in range(w):
            best = z[i, u]
            bp = 0
            for p in range(1, pieces):
                v = z[i, p * w + u]
                if v > best:
                    best = v
                    bp = p
            out[i, u] = best
            idx[i, u] = bp


def _maxout_back_loop(dy, idx, pieces, dz):
    w = dy.shape[1]
    for i in range(dy.shape[0]):
        for u in range(w):
            dz[i, idx[i, u] * w + u] = dy[i, u]


_maxout_nb = _njit(_maxout_loop)
_maxout_back_nb = _njit(_maxout_back_loop)


def maxout_select(z, pieces: int):
    """Max over ``pieces`` column blocks of ``z`` (first block wins ties)."""
    n, total = z.shape
    w = total // pieces
    if jit_enabled():
        out = np.empty((n, w), dtype=z.dtype)
        idx = np.empty((n, w), dtype=np.int8)
        _maxout_nb(np.ascontiguousarray(z), pieces, out, idx)
        return out, idx
    out = z[:, :w].copy()
    idx = np.zeros((n, w), dtype=np.int8)
    for p in range(1, pieces):
        zp = z[:, p * w:(p + 1) * w]
        upd = zp > out
        np.copyto(out, zp, where=upd)
        np.copyto(idx, np.int8(p), where=upd)
    return out, idx


def maxout_select_backward(dy, idx, pieces: int):
    n, w = dy.shape
    if jit_enabled():
        dz = np.zeros((n, w * pieces), dtype=dy.dtype)
        _maxout_back_nb(np.ascontiguousarray(dy), idx, pieces, dz)
        return dz
    return np.concatenate([np.where(idx == p, dy, 0).astype(dy.dtype)
                           for p in range(pieces)], axis=1)


# ---------------------------------------------------------------- Adam

def _adam_loop(p, g, m, v, lr_t, b1, b2, eps_t):
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= lr_t * m[i] / (np.sqrt(v[i]) + eps_t)


_adam_nb = _njit(_adam_loop)


def adam_update(p, g, m, v, lr, b1, b2, eps, t):
    """In-place Adam step on flat float arrays (bias correction folded into lr and eps)."""
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr_t = lr * np.sqrt(c2) / c1
    eps_t = eps * np.sqrt(c2)
    if jit_enabled():
        _adam_nb(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                 p.dtype.type(lr_t), p.dtype.type(b1), p.dtype.type(b2), p.dtype.type(eps_t))
        return
    dt = p.dtype.type
    m *= dt(b1)
    m += dt(1.0 - b1) * g
    v *= dt(b2)
    v += dt(1.0 - b2) * g * g
    p -= dt(lr_t) * m / (np.sqrt(v) + dt(eps_t))


# ---------------------------------------------------------------- Gibbs sampling

def _gibbs_loop(doc, word, z, ndk, nkw, nk, alpha, beta, vbeta, u, update_topics):
    K = nk.shape[0]
    p = np.empty(K)
    for t in range(word.shape[0]):
        d = doc[t]
        w = word[t]
        k = z[t]
        ndk[d, k] -= 1
        if update_topics:
            nkw[k, w] -= 1
            nk[k] -= 1
        total = 0.0
        for j in range(K):
            total += (ndk[d, j] + alpha) * (nkw[j, w] + beta) / (nk[j] + vbeta)
            p[j] = total
        target = u[t] * total
        k = 0
        while k < K - 1 and p[k] <= target:
            k += 1
        z[t] = k
        ndk[d, k] += 1
        if update_topics:
            nkw[k, w] += 1
            nk[k] += 1


_gibbs_nb = _njit(_gibbs_loop)


def _gibbs_numpy(doc, word, z, ndk, nkw, nk, alpha, beta, vbeta, u, update_topics):
    K = nk.shape[0]
    for t in range(word.shape[0]):
        d = doc[t]
        w = word[t]
        k = z[t]
        ndk[d, k] -= 1
        if update_topics:
            nkw[k, w] -= 1
            nk[k] -= 1
        p = np.cumsum((ndk[d] + alpha) * (nkw[:, w] + beta) / (nk + vbeta))
        k = min(int(np.searchsorted(p, u[t] * p[-1], side="right")), K - 1)
        z[t] = k
        ndk[d, k] += 1
        if update_topics:
            nkw[k, w] += 1
            nk[k] += 1


def gibbs_sweep(doc, word, z, ndk, nkw, nk, alpha, beta, u, update_topics=True):
    """One collapsed Gibbs sweep over all tokens, in place.

    ``u`` holds one uniform draw per token.  With ``update_topics`` False
    the topic-word counts stay fixed (inference).
    """
    vbeta = nkw.shape[1] * beta
    fn = _gibbs_nb if jit_enabled() else _gibbs_numpy
    fn(doc, word, z, ndk, nkw, nk, float(alpha), float(beta), float(vbeta), u,
       bool(update_topics))


# ---------------------------------------------------------------- tree split search

def _split_loop(ptr, ent_sample, ent_value, node_of, g, h, Gt, Ht, cnt, lam, min_child,
                min_gain, best_gain, best_feat, best_thr):
    n_nodes = Gt.shape[0]
    F = ptr.shape[0] - 1
    Gl = np.empty(n_nodes)
    Hl = np.empty(n_nodes)
    left_n = np.empty(n_nodes, dtype=np.int64)
    last = np.empty(n_nodes, dtype=np.float32)
    for n in range(n_nodes):
        best_gain[n] = min_gain
        best_feat[n] = -1
        best_thr[n] = 0.0
    for f in range(F):
        for n in range(n_nodes):
            Gl[n] = 0.0
            Hl[n] = 0.0
            left_n[n] = 0
        for e in range(ptr[f], ptr[f + 1]):
            n = node_of[ent_sample[e]]
            if n >= 0:
                Gl[n] += g[ent_sample[e]]
                Hl[n] += h[ent_sample[e]]
                left_n[n] += 1
        for n in range(n_nodes):
            # left starts as the implicit block of zeros
            Gl[n] = Gt[n] - Gl[n]
            Hl[n] = Ht[n] - Hl[n]
            left_n[n] = cnt[n] - left_n[n]
            last[n] = 0.0
        for e in range(ptr[f], ptr[f + 1]):
            s = ent_sample[e]
            n = node_of[s]
            if n < 0:
                continue
            v = ent_value[e]
            if left_n[n] > 0 and v > last[n]:
                Gr = Gt[n] - Gl[n]
                Hr = Ht[n] - Hl[n]
                if Hl[n] >= min_child and Hr >= min_child:
                    gain = (Gl[n] * Gl[n] / (Hl[n] + lam) + Gr * Gr / (Hr + lam)
                            - Gt[n] * Gt[n] / (Ht[n] + lam))
                    if gain > best_gain[n]:
                        best_gain[n] = gain
                        best_feat[n] = f
                        best_thr[n] = last[n]
            Gl[n] += g[s]
            Hl[n] += h[s]
            left_n[n] += 1
            last[n] = v


_split_nb = _njit(_split_loop)


def _split_numpy(ptr, ent_sample, ent_value, node_of, g, h, Gt, Ht, cnt, lam, min_child,
                 min_gain, best_gain, best_feat, best_thr, max_cells=4_000_000):
    n_nodes = Gt.shape[0]
    F = ptr.shape[0] - 1
    best_gain[:] = min_gain
    best_feat[:] = -1
    best_thr[:] = 0.0
    ent_feat = np.repeat(np.arange(F), np.diff(ptr))
    ent_node = node_of[ent_sample]
    f0 = 0
    while f0 < F:
        # grow the feature chunk while the padded work matrix stays small
        f1 = f0 + 1
        while f1 < F and (ptr[f1 + 1] - ptr[f0]) * 2 < max_cells // max(n_nodes, 1):
            f1 += 1
        sl = slice(ptr[f0], ptr[f1])
        node = ent_node[sl]
        act = node >= 0
        if not act.any():
            f0 = f1
            continue
        feat = ent_feat[sl][act]
        node = node[act]
        smp = ent_sample[sl][act]
        val = ent_value[sl][act]
        seg_key = feat.astype(np.int64) * n_nodes + node
        order = np.argsort(seg_key, kind="stable")
        seg_key, feat, node, smp, val = (seg_key[order], feat[order], node[order],
                                         smp[order], val[order])
        starts = np.r_[0, np.nonzero(np.diff(seg_key))[0] + 1]
        lens = np.diff(np.r_[starts, seg_key.size])
        seg_of = np.repeat(np.arange(starts.size), lens)
        pos = np.arange(seg_key.size) - starts[seg_of]
        seg_node = node[starts]
        width = int(lens.max()) + 1
        gm = np.zeros((starts.size, width))
        hm = np.zeros((starts.size, width))
        gm[seg_of, pos] = g[smp]
        hm[seg_of, pos] = h[smp]
        gnz = np.cumsum(gm, axis=1)[:, -1]
        hnz = np.cumsum(hm, axis=1)[:, -1]
        gm[:, 1:] = gm[:, :-1]
        hm[:, 1:] = hm[:, :-1]
        gm[:, 0] = Gt[seg_node] - gnz
        hm[:, 0] = Ht[seg_node] - hnz
        gl = np.cumsum(gm, axis=1)[seg_of, pos]
        hl = np.cumsum(hm, axis=1)[seg_of, pos]
        prev = np.zeros(val.size, dtype=np.float32)
        inner = pos > 0
        prev[inner] = val[np.nonzero(inner)[0] - 1]
        left_n = cnt[node] - lens[seg_of] + pos
        gt, ht = Gt[node], Ht[node]
        gr, hr = gt - gl, ht - hl
        ok = (left_n > 0) & (val > prev) & (hl >= min_child) & (hr >= min_child)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - gt * gt / (ht + lam)
        idx = np.nonzero(ok)[0]
        if idx.size:
            o = np.lexsort((idx, -gain[idx], node[idx]))
            idx = idx[o]
            first = np.r_[True, node[idx][1:] != node[idx][:-1]]
            for i in idx[first]:
                n = node[i]
                if gain[i] > best_gain[n]:
                    best_gain[n] = gain[i]
                    best_feat[n] = feat[i]
                    best_thr[n] = prev[i]
        f0 = f1


def best_splits(ptr, ent_sample, ent_value, node_of, g, h, lam=1.0, min_child=1.0,
                min_gain=1e-12):
    """Exact greedy best split per active node over column-sorted features.

    Features are stored column-wise with only positive entries listed
    (``ptr``/``ent_sample``/``ent_value`` sorted by value within each
    column); all other entries are zero.  A sample goes left when its
    value is ``<= threshold``.  Ties keep the lowest feature index, then
    the lowest threshold.  Returns ``(gain, feature, threshold)`` arrays
    per node, feature -1 meaning no admissible split.
    """
    n_nodes = int(node_of.max()) + 1 if node_of.size else 0
    act = node_of >= 0
    Gt = np.bincount(node_of[act], weights=g[act], minlength=n_nodes)
    Ht = np.bincount(node_of[act], weights=h[act], minlength=n_nodes)
    cnt = np.bincount(node_of[act], minlength=n_nodes).astype(np.int64)
    best_gain = np.empty(n_nodes)
    best_feat = np.empty(n_nodes, dtype=np.int64)
    best_thr = np.empty(n_nodes, dtype=np.float32)
    args = (np.ascontiguousarray(ptr, dtype=np.int64),
            np.ascontiguousarray(ent_sample, dtype=np.int64),
            np.ascontiguousarray(ent_value, dtype=np.float32),
            np.ascontiguousarray(node_of, dtype=np.int64),
            np.ascontiguousarray(g, dtype=np.float64), np.ascontiguousarray(h, dtype=np.float64),
            Gt, Ht, cnt, float(lam), float(min_child), float(min_gain),
            best_gain, best_feat, best_thr)
    if jit_enabled():
        _split_nb(*args)
    else:
        _split_numpy(*args)
    return best_gain, best_feat, best_thr, Gt, Ht
