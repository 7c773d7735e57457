import numpy as np
import pytest

import hgrn2.chunkwise as cw
from hgrn2.chunkwise import (
    BENCH_HEADER, DecayCache, benchmark_paths, chunked_elementwise_scan,
    chunkwise_hgrn2, chunkwise_hgrn2_batched, intra_chunk_scores, plan_chunks,
    write_benchmark_csv,
)
from hgrn2.recurrence import hgrn1_scan, hgrn2_scan
from hgrn2.tensor import Tensor, add, mul, reduce_sum


def make_instance(rng, n, d_h, lo=0.1, hi=0.999):
    f = rng.random((n, d_h)) * (hi - lo) + lo
    i = rng.standard_normal((n, d_h))
    o = rng.standard_normal((n, d_h))
    h0 = rng.standard_normal((d_h, d_h))
    return f, i, o, h0


# ------------------------------------------------------------- chunk planning

def test_plan_chunks_partial_tail():
    assert plan_chunks(37, 16) == [(0, 16), (16, 32), (32, 37)]
    assert plan_chunks(4, 64) == [(0, 4)]
    assert plan_chunks(8, 8) == [(0, 8)]


def test_plan_chunks_rejects_bad_size():
    with pytest.raises(ValueError, match="chunk_size"):
        plan_chunks(10, 0)


# ------------------------------------------------------------- frozen examples

def test_intra_scores_hand_case():
    f = Tensor(np.array([[0.5], [0.5]]))
    o = Tensor(np.array([[1.0], [1.0]]))
    s = intra_chunk_scores(o, f)
    np.testing.assert_allclose(s.data, [[0.5, 0.0], [0.25, 0.5]], atol=1e-14)


def test_intra_scores_diagonal_is_inner_product(rng):
    c, d_h = 6, 4
    f = Tensor(rng.random((c, d_h)) * 0.8 + 0.1)
    o = Tensor(rng.standard_normal((c, d_h)))
    s = intra_chunk_scores(o, f).data
    want = ((1.0 - f.data) * o.data).sum(axis=1)
    np.testing.assert_allclose(np.diag(s), want, rtol=1e-12)
    assert np.all(s[np.triu_indices(c, k=1)] == 0.0)


def test_intra_scores_accepts_prebuilt_cache(rng):
    c, d_h = 5, 3
    f = Tensor(rng.random((c, d_h)) * 0.8 + 0.1)
    o = Tensor(rng.standard_normal((c, d_h)))
    cache = DecayCache.from_gates(f, time_axis=0)
    np.testing.assert_array_equal(intra_chunk_scores(o, f, cache).data,
                                  intra_chunk_scores(o, f).data)


# ------------------------------------------------------------- equivalence

def test_chunk_size_one_matches_sequential(rng):
    f, i, o, h0 = make_instance(rng, 12, 3)
    y_s, h_s = hgrn2_scan(Tensor(f), Tensor(i), Tensor(o), Tensor(h0))
    y_c, h_c = chunkwise_hgrn2(Tensor(f), Tensor(i), Tensor(o), Tensor(h0),
                               chunk_size=1)
    np.testing.assert_allclose(y_c.data, y_s.data, atol=1e-10, rtol=0)
    np.testing.assert_allclose(h_c.data, h_s.data, atol=1e-10, rtol=0)


def test_single_chunk_covers_whole_sequence(rng):
    f, i, o, h0 = make_instance(rng, 9, 4)
    y_s, h_s = hgrn2_scan(Tensor(f), Tensor(i), Tensor(o), Tensor(h0))
    y_c, h_c = chunkwise_hgrn2(Tensor(f), Tensor(i), Tensor(o), Tensor(h0),
                               chunk_size=64)
    np.testing.assert_allclose(y_c.data, y_s.data, atol=1e-10, rtol=0)
    np.testing.assert_allclose(h_c.data, h_s.data, atol=1e-10, rtol=0)


def test_midsize_case_n37_c16(rng):
    n, d_h = 37, 8
    f = rng.random((n, d_h)) * 0.49 + 0.5  # (0.5, 0.99)
    i = rng.standard_normal((n, d_h))
    o = rng.standard_normal((n, d_h))
    h0 = rng.standard_normal((d_h, d_h))
    y_s, h_s = hgrn2_scan(Tensor(f), Tensor(i), Tensor(o), Tensor(h0))
    y_c, h_c = chunkwise_hgrn2(Tensor(f), Tensor(i), Tensor(o), Tensor(h0),
                               chunk_size=16)
    np.testing.assert_allclose(y_c.data, y_s.data, atol=1e-10, rtol=0)
    np.testing.assert_allclose(h_c.data, h_s.data, atol=1e-10, rtol=0)


def test_equivalence_spot_grid(rng):
    # a slice of the acceptance grid for fast feedback
    for n, c, d_h in [(1, 1, 1), (5, 4, 4), (16, 16, 16), (37, 64, 4), (128, 16, 1)]:
        f, i, o, h0 = make_instance(rng, n, d_h)
        y_s, h_s = hgrn2_scan(Tensor(f), Tensor(i), Tensor(o), Tensor(h0))
        y_c, h_c = chunkwise_hgrn2(Tensor(f), Tensor(i), Tensor(o), Tensor(h0),
                                   chunk_size=c)
        np.testing.assert_allclose(y_c.data, y_s.data, atol=1e-10, rtol=0)
        np.testing.assert_allclose(h_c.data, h_s.data, atol=1e-10, rtol=0)


def test_chunk_associativity(rng):
    f, i, o, h0 = make_instance(rng, 48, 4)
    out = {}
    for c in (8, 32):
        y, h_n = chunkwise_hgrn2(Tensor(f), Tensor(i), Tensor(o), Tensor(h0),
                                 chunk_size=c)
        out[c] = (y.data, h_n.data)
    np.testing.assert_allclose(out[8][0], out[32][0], atol=1e-10, rtol=0)
    np.testing.assert_allclose(out[8][1], out[32][1], atol=1e-10, rtol=0)


def test_batched_matches_per_slice(rng):
    b, heads, n, d_h = 2, 2, 21, 4
    f = rng.random((b, heads, n, d_h)) * 0.85 + 0.1
    i = rng.standard_normal((b, heads, n, d_h))
    o = rng.standard_normal((b, heads, n, d_h))
    h0 = rng.standard_normal((b, heads, d_h, d_h))
    y, h_n = chunkwise_hgrn2_batched(Tensor(f), Tensor(i), Tensor(o),
                                     Tensor(h0), chunk_size=8)
    for bi in range(b):
        for k in range(heads):
            yk, hk = chunkwise_hgrn2(Tensor(f[bi, k]), Tensor(i[bi, k]),
                                     Tensor(o[bi, k]), Tensor(h0[bi, k]),
                                     chunk_size=8)
            np.testing.assert_allclose(y.data[bi, k], yk.data, atol=1e-13, rtol=0)
            np.testing.assert_allclose(h_n.data[bi, k], hk.data, atol=1e-13, rtol=0)


def test_empty_sequence(rng):
    d_h = 3
    h0 = Tensor(rng.standard_normal((d_h, d_h)))
    z = Tensor(np.zeros((0, d_h)))
    y, h_n = chunkwise_hgrn2(z, z, z, h0)
    assert y.shape == (0, d_h)
    np.testing.assert_array_equal(h_n.data, h0.data)


# ------------------------------------------------------------- elementwise path

def test_chunked_elementwise_matches_hgrn1(rng):
    b, n, d = 3, 29, 5
    f = rng.random((b, n, d)) * 0.89 + 0.1
    i = rng.standard_normal((b, n, d))
    o = rng.standard_normal((b, n, d))
    h0 = rng.standard_normal((b, d))
    y, h_n = chunked_elementwise_scan(Tensor(f), Tensor(i), Tensor(o),
                                      Tensor(h0), chunk_size=8)
    for bi in range(b):
        yk, hk = hgrn1_scan(Tensor(f[bi]), Tensor(i[bi]), Tensor(o[bi]),
                            Tensor(h0[bi]))
        np.testing.assert_allclose(y.data[bi], yk.data, atol=1e-11, rtol=0)
        np.testing.assert_allclose(h_n.data[bi], hk.data, atol=1e-11, rtol=0)


def test_chunked_elementwise_gradcheck_vs_sequential(rng):
    b, n, d = 1, 13, 3
    fv = rng.random((b, n, d)) * 0.7 + 0.15
    iv = rng.standard_normal((b, n, d))
    ov = rng.standard_normal((b, n, d))
    h0v = rng.standard_normal((b, d))
    w = rng.standard_normal((b, n, d))

    def run(scan_chunked):
        leaves = [Tensor(fv, requires_grad=True), Tensor(iv, requires_grad=True),
                  Tensor(ov, requires_grad=True), Tensor(h0v, requires_grad=True)]
        f, i, o, h0 = leaves
        if scan_chunked:
            y, h_n = chunked_elementwise_scan(f, i, o, h0, chunk_size=4)
        else:
            y, h_n = hgrn1_scan(f.reshape((n, d)), i.reshape((n, d)),
                                o.reshape((n, d)), h0.reshape((d,)))
            y = y.reshape((b, n, d))
        loss = add(reduce_sum(mul(y, Tensor(w))), reduce_sum(h_n))
        loss.backward()
        return [l.grad for l in leaves]

    for g_c, g_s in zip(run(True), run(False)):
        np.testing.assert_allclose(g_c, g_s, rtol=1e-8, atol=1e-10)


# ------------------------------------------------------------- gradients

def test_gradient_equivalence_chunkwise_vs_sequential(rng):
    n, d_h = 19, 4
    fv, iv, ov, h0v = make_instance(rng, n, d_h, lo=0.2, hi=0.95)
    w = rng.standard_normal((n, d_h))

    def run(chunked):
        f = Tensor(fv, requires_grad=True)
        i = Tensor(iv, requires_grad=True)
        o = Tensor(ov, requires_grad=True)
        h0 = Tensor(h0v, requires_grad=True)
        if chunked:
            y, h_n = chunkwise_hgrn2(f, i, o, h0, chunk_size=8)
        else:
            y, h_n = hgrn2_scan(f, i, o, h0)
        loss = add(reduce_sum(mul(y, Tensor(w))), reduce_sum(h_n))
        loss.backward()
        return [t.grad for t in (f, i, o, h0)]

    for g_c, g_s in zip(run(True), run(False)):
        np.testing.assert_allclose(g_c, g_s, rtol=1e-8, atol=1e-10)


def test_chunkwise_fd_gradcheck(rng):
    from conftest import check_grad
    n, d_h = 9, 2
    fv, iv, ov, h0v = make_instance(rng, n, d_h, lo=0.2, hi=0.9)
    f = Tensor(fv, requires_grad=True)
    i = Tensor(iv, requires_grad=True)
    o = Tensor(ov, requires_grad=True)
    h0 = Tensor(h0v, requires_grad=True)
    w = Tensor(rng.standard_normal((n, d_h)))

    def build():
        y, h_n = chunkwise_hgrn2(f, i, o, h0, chunk_size=4)
        return add(reduce_sum(mul(y, w)), reduce_sum(h_n))

    check_grad(build, [f, i, o, h0], rtol=1e-5, atol=1e-8)


# ------------------------------------------------------------- gate floor

def test_gate_floor_clamps_and_counts(rng):
    n, d_h = 6, 2
    f = rng.random((n, d_h)) * 0.5 + 0.25
    f[2, 1] = 1e-9
    f[4, 0] = 0.0 + 1e-12
    i = rng.standard_normal((n, d_h))
    o = rng.standard_normal((n, d_h))
    h0 = np.zeros((d_h, d_h))
    before = cw.floor_clamp_count()
    with pytest.warns(RuntimeWarning, match="floor"):
        y, h_n = chunkwise_hgrn2(Tensor(f), Tensor(i), Tensor(o), Tensor(h0),
                                 chunk_size=4)
    assert cw.floor_clamp_count() - before == 2
    assert np.all(np.isfinite(y.data)) and np.all(np.isfinite(h_n.data))
    # clamped result equals the sequential scan run on the clamped gates
    y_s, h_s = hgrn2_scan(Tensor(np.maximum(f, cw.GATE_FLOOR)), Tensor(i),
                          Tensor(o), Tensor(h0))
    np.testing.assert_allclose(y.data, y_s.data, atol=1e-10, rtol=0)


# ------------------------------------------------------------- benchmark output

def test_benchmark_grid_row_count_and_csv(tmp_path):
    rows = benchmark_paths([8, 16], [4, 8], d_h=4, heads=2, reps=1)
    assert len(rows) == 2 * 2 * 2
    assert {r["path"] for r in rows} == {"sequential", "chunkwise"}
    assert all(r["seconds_per_token"] > 0 for r in rows)
    out = tmp_path / "bench.csv"
    write_benchmark_csv(rows, out)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == BENCH_HEADER == "path,N,C,d_h,H,seconds_per_token"
    assert len(lines) == 1 + len(rows)
