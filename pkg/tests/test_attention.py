import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstr import numerics as nx
from lstr.attention import (
    AttentionParams,
    DecoderUnitParams,
    count_macs_scope,
    directional_mask,
    multi_head_attention,
    transformer_decoder_unit,
    transformer_encoder_unit,
)
from lstr.numerics import Tensor


def naive_attention(Q, K, V, mask, p: AttentionParams, heads):
    """Triple-loop reference: per head, per query, per key."""
    wq, bq, wk = p.wq.value, p.bq.value[0], p.wk.value
    wv, bv, wo, bo = p.wv.value, p.bv.value[0], p.wo.value, p.bo.value[0]
    C = wq.shape[0]
    d = C // heads
    q = [[sum(Q[i, a] * wq[a, j] for a in range(C)) + bq[j] for j in range(C)] for i in range(len(Q))]
    k = [[sum(K[i, a] * wk[a, j] for a in range(C)) for j in range(C)] for i in range(len(K))]
    v = [[sum(V[i, a] * wv[a, j] for a in range(C)) + bv[j] for j in range(C)] for i in range(len(V))]
    merged = np.zeros((len(Q), C))
    for h in range(heads):
        cols = range(h * d, (h + 1) * d)
        for i in range(len(Q)):
            allowed = [j for j in range(len(K)) if mask is None or mask[i][j]]
            s = {j: sum(q[i][c] * k[j][c] for c in cols) / np.sqrt(d) for j in allowed}
            top = max(s.values())
            e = {j: np.exp(s[j] - top) for j in allowed}
            z = sum(e.values())
            for c in cols:
                merged[i, c] = sum(e[j] / z * v[j][c] for j in allowed)
    return merged @ wo + bo


@pytest.mark.parametrize("heads,mask", [(1, False), (2, False), (4, True)])
def test_matches_triple_loop_oracle(rng, heads, mask):
    C = 8
    p = AttentionParams.init(rng, C)
    Q = rng.standard_normal((5, C))
    K = rng.standard_normal((5, C))
    V = rng.standard_normal((5, C))
    m = directional_mask(5) if mask else None
    got = multi_head_attention(Tensor(Q), Tensor(K), Tensor(V), m, p, heads).value
    np.testing.assert_allclose(got, naive_attention(Q, K, V, m, p, heads), rtol=1e-10, atol=1e-12)


def test_single_key_returns_projected_value(rng):
    C = 4
    p = AttentionParams.init(rng, C)
    v = rng.standard_normal((1, C))
    out = multi_head_attention(Tensor(rng.standard_normal((3, C))), Tensor(rng.standard_normal((1, C))),
                               Tensor(v), None, p, heads=2).value
    want = (v @ p.wv.value + p.bv.value) @ p.wo.value + p.bo.value
    np.testing.assert_allclose(out, np.repeat(want, 3, axis=0), rtol=1e-12)


def test_identical_keys_average_values(rng):
    C = 4
    p = AttentionParams.init(rng, C)
    key = rng.standard_normal((1, C))
    V = rng.standard_normal((6, C))
    out = multi_head_attention(Tensor(rng.standard_normal((2, C))), Tensor(np.repeat(key, 6, 0)),
                               Tensor(V), None, p, heads=2).value
    want = (V @ p.wv.value + p.bv.value).mean(axis=0) @ p.wo.value + p.bo.value
    np.testing.assert_allclose(out, np.repeat(want.reshape(1, -1), 2, axis=0), rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(6)))
def test_key_value_permutation_invariance(seed, perm):
    r = np.random.default_rng(seed)
    C = 8
    p = AttentionParams.init(r, C)
    Q, K, V = (r.standard_normal((n, C)) for n in (3, 6, 6))
    perm = list(perm)
    a = multi_head_attention(Tensor(Q), Tensor(K), Tensor(V), None, p, 2).value
    b = multi_head_attention(Tensor(Q), Tensor(K[perm]), Tensor(V[perm]), None, p, 2).value
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 7), st.data())
def test_directional_mask_is_causal(seed, n, data):
    r = np.random.default_rng(seed)
    C = 8
    unit = DecoderUnitParams.init(r, C, heads=2)
    x = r.standard_normal((n, C))
    mem = Tensor(r.standard_normal((3, C)))
    t = data.draw(st.integers(0, n - 2))
    y = x.copy()
    y[t + 1:] += r.standard_normal((n - t - 1, C)) * 5
    mask = directional_mask(n)
    a = transformer_decoder_unit(Tensor(x), mem, mask, unit).value
    b = transformer_decoder_unit(Tensor(y), mem, mask, unit).value
    np.testing.assert_array_equal(a[: t + 1], b[: t + 1])
    assert not np.allclose(a[t + 1:], b[t + 1:])


def test_directional_mask_counts():
    for n in (1, 4, 16):
        m = directional_mask(n)
        assert m.sum() == n * (n + 1) // 2
        assert m.sum(axis=1).tolist() == list(range(1, n + 1))
    with pytest.raises(ValueError):
        directional_mask(0)


def test_fully_masked_row_is_rejected(rng):
    p = AttentionParams.init(rng, 4)
    x = Tensor(rng.standard_normal((2, 4)))
    with pytest.raises(ValueError, match="no allowed key"):
        multi_head_attention(x, x, x, np.array([[True, True], [False, False]]), p, 2)


def test_width_mismatch_names_shapes(rng):
    p = AttentionParams.init(rng, 4)
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\)"):
        multi_head_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))),
                             None, p, 2)


def test_score_mac_counter(rng):
    C = 8
    unit = DecoderUnitParams.init(rng, C, heads=2)
    out, inp = Tensor(rng.standard_normal((3, C))), Tensor(rng.standard_normal((7, C)))
    with count_macs_scope() as mc:
        transformer_decoder_unit(out, inp, None, unit)
    assert mc.score == (3 * 3 + 3 * 7) * C
    with count_macs_scope() as mc:
        transformer_encoder_unit(inp, None, unit)
    assert mc.score == 7 * 7 * C


def test_unit_output_is_normalized(rng):
    unit = DecoderUnitParams.init(rng, 8, heads=2)
    out = transformer_decoder_unit(Tensor(rng.standard_normal((4, 8))), Tensor(rng.standard_normal((5, 8))),
                                   None, unit).value
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=1), 1, rtol=1e-4)
