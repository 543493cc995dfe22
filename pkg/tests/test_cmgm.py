import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graftnet import tensor as T
from graftnet.cmgm import CMGM, graft
from graftnet.errors import CapacityError
from graftnet.gradcheck import grad_check
from graftnet.nn import PredictionHead, prediction_head
from graftnet.tensor import Tensor


def _module(seed=0, c_r=6, c_s=5, dim=4, heads=1, cap=4096):
    with T.default_dtype(np.float64):
        return CMGM(np.random.default_rng(seed), c_r, c_s, dim, heads, cap)


def _inputs(seed, hw=(2, 2), shw=(3, 3), c_r=6, c_s=5, n=2):
    r = np.random.default_rng(seed + 100)
    f_r = Tensor(r.standard_normal((n, c_r) + hw), dtype=np.float64)
    f_s = Tensor(r.standard_normal((n, c_s) + shw), dtype=np.float64)
    return f_r, f_s


def test_zero_query_key_gives_uniform_attention():
    m = _module()
    m.w_q.weight.data[:] = 0
    m.w_q.bias.data[:] = 0
    m.w_k.weight.data[:] = 0
    m.w_k.bias.data[:] = 0
    f_r, f_s = _inputs(0, shw=(2, 2))
    out = graft(f_r, f_s, m)
    np.testing.assert_allclose(out.y.data, 0.25, atol=1e-15)
    v = m.w_v(m.ln_r(T.flatten_spatial(f_r))).data
    np.testing.assert_allclose(out.attended.data, np.repeat(v.mean(axis=1, keepdims=True), 4, axis=1), atol=1e-12)


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def test_attention_matches_brute_force():
    m = _module(heads=1)
    f_r, f_s = _inputs(3, shw=(2, 2))
    y = graft(f_r, f_s, m).y.data[:, 0]
    fr = f_r.data.transpose(0, 2, 3, 1).reshape(2, 4, -1)
    fs = f_s.data.transpose(0, 2, 3, 1).reshape(2, 4, -1)
    q = _layer_norm(fr, m.ln_r.gamma.data, m.ln_r.beta.data) @ m.w_q.weight.data + m.w_q.bias.data
    k = _layer_norm(fs, m.ln_s.gamma.data, m.ln_s.beta.data) @ m.w_k.weight.data + m.w_k.bias.data
    d = q.shape[-1]
    for b in range(2):
        for i in range(4):
            logits = [sum(q[b, i, c] * k[b, j, c] for c in range(d)) / np.sqrt(d) for j in range(4)]
            e = np.exp(np.array(logits) - max(logits))
            np.testing.assert_allclose(y[b, i], e / e.sum(), atol=1e-5)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), heads=st.sampled_from([1, 2]), hw=st.sampled_from([(2, 2), (3, 2), (4, 4)]))
def test_attention_algebra_properties(seed, heads, hw):
    m = _module(seed, heads=heads)
    f_r, f_s = _inputs(seed, hw=hw, shw=(3, 5))
    out = graft(f_r, f_s, m)
    k = hw[0] * hw[1]
    assert out.y.shape == (2, heads, k, k)
    np.testing.assert_allclose(out.y.data.sum(-1), 1.0, atol=1e-6)
    sym = out.sym.data
    assert np.max(np.abs(sym - np.swapaxes(sym, -1, -2))) == 0.0
    cam = out.cam.data
    assert cam.shape == (2, 1, k, k)
    assert cam.min() >= 0.0 and cam.max() <= 1.0
    assert np.max(np.abs(cam - np.swapaxes(cam, -1, -2))) < 1e-6
    assert out.z.shape == (2, 4) + hw


def test_resize_of_transformer_feature():
    m = _module()
    f_r, f_s = _inputs(1, hw=(2, 2), shw=(7, 7))
    assert graft(f_r, f_s, m).z.shape[-2:] == (2, 2)


@pytest.mark.parametrize("perm", list(itertools.permutations(range(4))))
def test_permutation_consistency(perm):
    m = _module(5)
    for st_ in (s for _, s in m.named_bn_states()):
        st_.training = False
    f_r, f_s = _inputs(5, shw=(2, 2))
    perm = np.array(perm)
    # the transformer feature is permuted too so that the key set is the same multiset
    fr_p = f_r.data.reshape(2, 6, 4)[:, :, perm].reshape(2, 6, 2, 2)
    fs_p = f_s.data.reshape(2, 5, 4)[:, :, perm].reshape(2, 5, 2, 2)
    y = graft(f_r, f_s, m).y.data[:, 0]
    y_p = graft(Tensor(fr_p, dtype=np.float64), Tensor(fs_p, dtype=np.float64), m).y.data[:, 0]
    np.testing.assert_allclose(y_p, y[:, perm][:, :, perm], atol=1e-12)


def test_capacity_error():
    m = _module(cap=8)
    f_r, f_s = _inputs(0, hw=(3, 3))
    with pytest.raises(CapacityError):
        graft(f_r, f_s, m)


def test_graft_gradient():
    with T.default_dtype(np.float64):
        m = _module(2)
        f_r, f_s = _inputs(2)
        f_r.requires_grad = True
        f_r.grad = np.zeros_like(f_r.data)

        def f(_):
            out = graft(f_r, f_s, m)
            return T.tsum(out.z * out.z) * 0.1 + T.tsum(out.cam)

        assert grad_check(f, f_r) < 1e-5
        assert grad_check(f, m.w_k.weight) < 1e-5


# ---------------------------------------------------------------- prediction head


def test_head_zero_weights_gives_half():
    with T.default_dtype(np.float64):
        head = PredictionHead(np.random.default_rng(0), 3)
    head.conv.weight.data[:] = 0
    head.conv.bias.data[:] = 0
    out = prediction_head(Tensor(np.random.default_rng(1).standard_normal((2, 3, 4, 4))), head)
    assert out.shape == (2, 1, 4, 4)
    np.testing.assert_array_equal(out.data, 0.5)


def test_head_monotone_in_logit():
    with T.default_dtype(np.float64):
        head = PredictionHead(np.random.default_rng(0), 1)
        head.conv.weight.data[:] = 1.0
        x = np.random.default_rng(2).standard_normal((1, 1, 3, 3))
        base = head(Tensor(x)).data
        x2 = x.copy()
        x2[0, 0, 1, 2] += 0.3
        bumped = head(Tensor(x2)).data
    assert bumped[0, 0, 1, 2] > base[0, 0, 1, 2]
    mask = np.ones_like(base, bool)
    mask[0, 0, 1, 2] = False
    assert np.array_equal(bumped[mask], base[mask])


def test_head_gradient():
    with T.default_dtype(np.float64):
        head = PredictionHead(np.random.default_rng(0), 3)
        x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 3, 3)), requires_grad=True)
        w = Tensor(np.random.default_rng(4).standard_normal((2, 1, 3, 3)))
        assert grad_check(lambda t: T.tsum(head(t) * w), x) < 1e-5
        assert grad_check(lambda t: T.tsum(head(x) * w), head.conv.weight) < 1e-5
