"""Each kernel against a brute-force oracle, on both the numba and the numpy path."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echolab import kernels


@pytest.fixture(params=["jit", "numpy"])
def path(request, monkeypatch):
    if request.param == "numpy":
        monkeypatch.setenv("ECHOLAB_NO_JIT", "1")
    else:
        monkeypatch.delenv("ECHOLAB_NO_JIT", raising=False)
        if not kernels.jit_enabled():
            pytest.skip("numba unavailable")
    return request.param


def both_paths(fn):
    """Run ``fn`` once with numba and once with the fallback."""
    import os
    old = os.environ.pop("ECHOLAB_NO_JIT", None)
    try:
        a = fn()
        os.environ["ECHOLAB_NO_JIT"] = "1"
        b = fn()
    finally:
        os.environ.pop("ECHOLAB_NO_JIT", None)
        if old is not None:
            os.environ["ECHOLAB_NO_JIT"] = old
    return a, b


def test_flag(monkeypatch):
    monkeypatch.setenv("ECHOLAB_NO_JIT", "1")
    assert not kernels.jit_enabled()
    monkeypatch.setenv("ECHOLAB_NO_JIT", "0")
    assert kernels.jit_enabled() == (kernels.numba is not None)


class TestSpanPool:
    def spans(self, n, rng):
        s = [(a, b) for a in range(n) for b in range(a + 1, min(n, a + 5) + 1)]
        s = np.array(s)
        return s[:, 0], s[:, 1]

    def test_matches_oracle(self, path, rng):
        X = rng.integers(-3, 3, (9, 4)).astype(np.float32)   # many ties
        st_, en = self.spans(9, rng)
        out, arg = kernels.span_max_pool(X, st_, en)
        for s, (a, b) in enumerate(zip(st_, en)):
            np.testing.assert_array_equal(out[s], X[a:b].max(axis=0))
            np.testing.assert_array_equal(arg[s], a + X[a:b].argmax(axis=0))

    def test_backward_scatter(self, path, rng):
        X = rng.normal(size=(6, 3))
        st_, en = self.spans(6, rng)
        _, arg = kernels.span_max_pool(X, st_, en)
        dout = rng.normal(size=(st_.size, 3))
        got = kernels.span_max_pool_backward(dout, arg, 6)
        want = np.zeros((6, 3))
        for s in range(st_.size):
            for d in range(3):
                want[arg[s, d], d] += dout[s, d]
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_invalid(self, path):
        with pytest.raises(ValueError):
            kernels.span_max_pool(np.zeros((3, 2)), np.array([1]), np.array([1]))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 10**6))
    def test_paths_identical(self, n, seed):
        r = np.random.default_rng(seed)
        X = r.normal(size=(n, 5)).astype(np.float32)
        st_, en = self.spans(n, r)
        a, b = both_paths(lambda: kernels.span_max_pool(X, st_, en))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestMaxout:
    def test_oracle_and_backward(self, path, rng):
        z = rng.integers(-2, 2, (7, 12)).astype(np.float32)
        out, idx = kernels.maxout_select(z, 3)
        blocks = z.reshape(7, 3, 4)
        np.testing.assert_array_equal(out, blocks.max(axis=1))
        np.testing.assert_array_equal(idx, blocks.argmax(axis=1))
        dy = rng.normal(size=(7, 4)).astype(np.float32)
        dz = kernels.maxout_select_backward(dy, idx, 3).reshape(7, 3, 4)
        assert np.allclose(dz.sum(axis=1), dy)
        assert ((dz != 0).sum(axis=1) <= 1).all()


class TestAdam:
    def test_reference_step(self, path, rng):
        p = rng.normal(size=20)
        g = rng.normal(size=20)
        m = np.zeros(20)
        v = np.zeros(20)
        p0 = p.copy()
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        mr, vr, pr = np.zeros(20), np.zeros(20), p0.copy()
        for t in (1, 2, 3):
            kernels.adam_update(p, g, m, v, lr, b1, b2, eps, t)
            # textbook form with explicit bias-corrected moments
            mr = b1 * mr + (1 - b1) * g
            vr = b2 * vr + (1 - b2) * g * g
            pr = pr - lr * (mr / (1 - b1 ** t)) / (np.sqrt(vr / (1 - b2 ** t)) + eps)
        np.testing.assert_allclose(p, pr, rtol=1e-10, atol=1e-12)


class TestGibbs:
    def setup_data(self, rng, K=4, V=7, D=5):
        doc = np.repeat(np.arange(D), 6).astype(np.int64)
        word = rng.integers(0, V, doc.size).astype(np.int64)
        z = rng.integers(0, K, doc.size).astype(np.int64)
        ndk = np.zeros((D, K), np.int64)
        nkw = np.zeros((K, V), np.int64)
        np.add.at(ndk, (doc, z), 1)
        np.add.at(nkw, (z, word), 1)
        return doc, word, z, ndk, nkw, nkw.sum(axis=1)

    def test_counts_stay_consistent(self, path, rng):
        doc, word, z, ndk, nkw, nk = self.setup_data(rng)
        for _ in range(5):
            kernels.gibbs_sweep(doc, word, z, ndk, nkw, nk, 0.1, 0.01, rng.random(word.size))
        ndk2 = np.zeros_like(ndk)
        nkw2 = np.zeros_like(nkw)
        np.add.at(ndk2, (doc, z), 1)
        np.add.at(nkw2, (z, word), 1)
        np.testing.assert_array_equal(ndk, ndk2)
        np.testing.assert_array_equal(nkw, nkw2)
        np.testing.assert_array_equal(nk, nkw.sum(axis=1))

    def test_single_token_oracle(self, path):
        """With one token the draw follows the closed-form conditional."""
        K, V = 3, 2
        nkw = np.array([[5, 0], [1, 3], [0, 0]], np.int64)
        rng = np.random.default_rng(0)
        hits = np.zeros(K)
        n = 4000
        u = rng.random(n)
        for t in range(n):
            z = np.array([0])
            ndk = np.array([[1, 0, 0]])
            nkw_t = nkw.copy()
            nkw_t[0, 1] += 1
            kernels.gibbs_sweep(np.array([0]), np.array([1]), z, ndk, nkw_t,
                                nkw_t.sum(axis=1), 0.5, 0.1, u[t:t + 1])
            hits[z[0]] += 1
        p = (0 + 0.5) * (nkw[:, 1] + 0.1) / (nkw.sum(axis=1) + V * 0.1)
        np.testing.assert_allclose(hits / n, p / p.sum(), atol=0.03)

    def test_paths_identical(self, rng):
        data = self.setup_data(rng)
        u = rng.random((4, data[1].size))

        def run():
            doc, word, z, ndk, nkw, nk = (a.copy() for a in data)
            for s in range(4):
                kernels.gibbs_sweep(doc, word, z, ndk, nkw, nk, 0.1, 0.01, u[s])
            return z
        a, b = both_paths(run)
        np.testing.assert_array_equal(a, b)


def brute_best_split(X, node_of, g, h, lam=1.0, min_child=1.0, min_gain=1e-12):
    n_nodes = node_of.max() + 1
    best = [(min_gain, -1, 0.0) for _ in range(n_nodes)]
    for n in range(n_nodes):
        rows = node_of == n
        G, H = g[rows].sum(), h[rows].sum()
        for f in range(X.shape[1]):
            vals = np.unique(X[rows, f])
            for thr in vals[:-1]:
                left = rows & (X[:, f] <= thr)
                gl, hl = g[left].sum(), h[left].sum()
                gr, hr = G - gl, H - hl
                if hl < min_child or hr < min_child:
                    continue
                gain = gl ** 2 / (hl + lam) + gr ** 2 / (hr + lam) - G ** 2 / (H + lam)
                if gain > best[n][0] + 1e-12:
                    best[n] = (gain, f, thr)
    return best


class TestSplits:
    def column_index(self, X):
        from echolab.doc_model import ColumnIndex
        return ColumnIndex(X)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_matches_brute_force(self, seed):
        r = np.random.default_rng(seed)
        X = (r.integers(0, 4, (40, 5)) * (r.random((40, 5)) < 0.6)).astype(np.float32)
        node_of = r.integers(0, 3, 40)
        g = r.normal(size=40)
        h = r.uniform(0.1, 0.3, 40)
        ci = self.column_index(X)
        want = brute_best_split(X, node_of, g, h)
        for got in both_paths(lambda: kernels.best_splits(ci.ptr, ci.samples, ci.values,
                                                          node_of, g, h)):
            gain, feat, thr = got[0], got[1], got[2]
            for n in range(3):
                assert feat[n] == want[n][1]
                if feat[n] >= 0:
                    assert gain[n] == pytest.approx(want[n][0], rel=1e-9)
                    assert thr[n] == np.float32(want[n][2])

    def test_paths_bit_identical(self, rng):
        X = (rng.random((300, 30)) * (rng.random((300, 30)) < 0.2)).astype(np.float32)
        node_of = rng.integers(-1, 4, 300)
        g = rng.normal(size=300)
        h = rng.uniform(0.05, 0.25, 300)
        ci = self.column_index(X)
        a, b = both_paths(lambda: kernels.best_splits(ci.ptr, ci.samples, ci.values,
                                                      node_of, g, h))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
