import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from graftnet import losses as L
from graftnet import tensor as T
from graftnet.errors import DimensionError, DomainError
from graftnet.gradcheck import grad_check
from graftnet.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------- attention matrices


def test_attn_matrix_examples():
    assert np.all(L.attn_matrix(t64(np.zeros((2, 2)))).data == 0)
    assert np.all(L.attn_matrix(t64(np.ones((2, 2)))).data == 1)
    a = L.attn_matrix(t64([[1, 0], [0, 1]])).data
    ones = {(x, y) for x in range(4) for y in range(4) if a[x, y] == 1}
    assert ones == {(0, 0), (0, 3), (3, 0), (3, 3)}
    assert a.sum() == 4


def test_attn_matrix_domain():
    with pytest.raises(DomainError):
        L.attn_matrix(t64([[1.5, 0.0]]))
    with pytest.raises(DomainError):
        L.attn_matrix_array(np.array([[-0.1]]))


def test_attn_matrix_psd_on_random_masks():
    rng = np.random.default_rng(7)
    for _ in range(50):
        m = (rng.random((4, 5)) > 0.5).astype(np.float64)
        a = L.attn_matrix(t64(m)).data
        assert np.array_equal(a, a.T)
        assert set(np.unique(a)) <= {0.0, 1.0}
        for _ in range(5):
            x = rng.standard_normal(20)
            assert x @ a @ x >= -1e-12
        assert np.linalg.matrix_rank(a) <= 1
        np.testing.assert_array_equal(L.attn_matrix_array(m), a)


# ---------------------------------------------------------------- BCE / IoU


def test_bce_pixel_examples():
    assert abs(L.bce_pixel(1, 1.0 - 1e-12)) < 1e-6
    assert L.bce_pixel(0, 0.5) == pytest.approx(math.log(0.5))
    assert L.bce_pixel(1, 1e-9) == pytest.approx(math.log(1e-7))


def test_iou_examples():
    g = (np.random.default_rng(0).random((1, 1, 4, 4)) > 0.5).astype(np.float64)
    assert L.iou_loss(t64(g), t64(g)).item() == 0.0
    n = 9
    assert L.iou_loss(t64(np.zeros((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3)))).item() == pytest.approx(n / (n + 1))


def test_iou_scalar_oracle():
    r = np.random.default_rng(3)
    p, g = r.random((3, 3)), (r.random((3, 3)) > 0.5).astype(float)
    inter = union = 0.0
    for i in range(3):
        for j in range(3):
            inter += p[i, j] * g[i, j]
            union += p[i, j] + g[i, j] - p[i, j] * g[i, j]
    ref = 1 - (inter + 1) / (union + 1)
    assert L.iou_loss(t64(p[None, None]), t64(g[None, None])).item() == pytest.approx(ref, abs=1e-14)


# ---------------------------------------------------------------- AGL


def _mats(seed, k=4):
    r = np.random.default_rng(seed)
    g = (r.random((1, k)) > 0.5).astype(float)
    g_a = L.attn_matrix_array(g)
    rp_a = L.attn_matrix_array(r.random((1, k)))
    sp_a = L.attn_matrix_array(r.random((1, k)))
    cam = r.uniform(0.05, 0.95, (k, k))
    return g_a, cam, rp_a, sp_a


def _mean_bce(g_a, cam):
    c = np.clip(cam, 1e-7, 1 - 1e-7)
    return -np.mean(g_a * np.log(c) + (1 - g_a) * np.log(1 - c))


@pytest.mark.parametrize("seed", range(5))
def test_agl_beta_zero_is_mean_bce(seed):
    g_a, cam, rp_a, sp_a = _mats(seed)
    val = L.agl(t64(g_a), t64(cam), rp_a, sp_a, beta=0.0).item()
    assert abs(val - _mean_bce(g_a, cam)) <= 1e-12


@pytest.mark.parametrize("beta", [0.0, 0.5, 3.0])
def test_agl_perfect_branches_is_mean_bce(beta):
    g_a, cam, _, _ = _mats(1)
    val = L.agl(t64(g_a), t64(cam), g_a, g_a, beta).item()
    assert val == pytest.approx(_mean_bce(g_a, cam), abs=1e-12)


def test_agl_hand_example():
    g_a = np.array([[1.0, 0.0], [0.0, 0.0]])
    cam = np.full((2, 2), 0.5)
    rp_a, sp_a = np.zeros((2, 2)), np.ones((2, 2))
    # ω = ½(|g-0| + |g-1|) + 1 = 1.5 everywhere, so weights are 2.5 and the result is -log 0.5
    num = den = 0.0
    for i in range(2):
        for j in range(2):
            w = 1 + 1.0 * (0.5 * (abs(g_a[i, j] - rp_a[i, j]) + abs(g_a[i, j] - sp_a[i, j])) + 1)
            num += w * L.bce_pixel(g_a[i, j], cam[i, j])
            den += w
    val = L.agl(t64(g_a), t64(cam), rp_a, sp_a, 1.0).item()
    assert val == pytest.approx(-num / den, abs=1e-15)
    assert val == pytest.approx(math.log(2), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, (3, 3), elements=st.floats(0, 1)),
    hnp.arrays(np.float64, (3, 3), elements=st.floats(0, 1)),
    hnp.arrays(np.float64, (3, 3), elements=st.floats(0, 1)),
)
def test_omega_bounds(g, rp, sp):
    om = L.omega(g, rp, sp)
    assert np.all(om >= 1.0) and np.all(om <= 2.0)


def test_agl_permutation_invariant():
    g_a, cam, rp_a, sp_a = _mats(4)
    cam = (cam + cam.T) / 2
    perm = np.random.default_rng(0).permutation(4)
    p = lambda m: m[perm][:, perm]
    a = L.agl(t64(g_a), t64(cam), rp_a, sp_a, 1.0).item()
    b = L.agl(t64(p(g_a)), t64(p(cam)), p(rp_a), p(sp_a), 1.0).item()
    assert a == pytest.approx(b, abs=1e-14)


def test_agl_shape_mismatch():
    with pytest.raises(DimensionError):
        L.agl(t64(np.zeros((4, 4))), t64(np.full((3, 3), 0.5)), np.zeros((4, 4)), np.zeros((4, 4)))


def test_agl_gradient_on_4x4_masks():
    with T.default_dtype(np.float64):
        r = np.random.default_rng(9)
        g_a = L.attn_matrix_array((r.random((1, 4, 4)) > 0.5).astype(float))
        rp_a = L.attn_matrix_array(r.random((1, 4, 4)))
        sp_a = L.attn_matrix_array(r.random((1, 4, 4)))
        cam = t64(r.uniform(0.1, 0.9, (1, 16, 16)), grad=True)
        assert grad_check(lambda c: L.agl(t64(g_a), c, rp_a, sp_a, 1.0), cam) < 1e-5


# ---------------------------------------------------------------- total loss


def _perfect(n=2, hw=8, grid=2):
    g = np.zeros((n, 1, hw, hw))
    g[:, :, : hw // 2, : hw // 2] = 1
    g_small = L.downsample_mask(g, grid, grid)
    cam = L.attn_matrix_array(g_small[:, 0])[:, None]
    eps = 1e-9
    soft = lambda m: t64(np.clip(m, eps, 1 - eps))
    return g, soft(g), soft(g_small), soft(g_small), soft(cam)


def test_total_loss_perfect_prediction():
    g, p, rp, sp, cam = _perfect()
    total, parts = L.total_loss(p, rp, sp, cam, g, beta=1.0)
    assert 0 <= total.item() <= 1e-5
    assert set(parts) == {"total", "bce_P", "iou_P", "agl", "aux"}


def test_total_loss_aux_coefficient():
    r = np.random.default_rng(5)
    g = (r.random((2, 1, 8, 8)) > 0.5).astype(float)
    p = t64(r.uniform(0.1, 0.9, g.shape))
    rp = t64(r.uniform(0.1, 0.9, (2, 1, 2, 2)))
    sp = t64(r.uniform(0.1, 0.9, (2, 1, 2, 2)))
    cam = t64(r.uniform(0.1, 0.9, (2, 1, 4, 4)))
    total, parts = L.total_loss(p, rp, sp, cam, g)
    assert parts["total"] == pytest.approx(parts["bce_P"] + parts["iou_P"] + parts["agl"] + parts["aux"] / 8, abs=1e-12)
    # doubling the auxiliary term moves the total by exactly an eighth of the increase
    assert L.combine(1.0, 0.5, 2 * parts["aux"]) - L.combine(1.0, 0.5, parts["aux"]) == pytest.approx(parts["aux"] / 8)


def test_total_loss_nonnegative_random():
    r = np.random.default_rng(6)
    for _ in range(10):
        g = (r.random((2, 1, 8, 8)) > 0.5).astype(float)
        total, _ = L.total_loss(
            t64(r.random(g.shape)), t64(r.random((2, 1, 2, 2))), t64(r.random((2, 1, 4, 4))), t64(r.random((2, 1, 4, 4))), g
        )
        assert total.item() >= 0


def test_total_loss_gradient_4x4():
    with T.default_dtype(np.float64):
        r = np.random.default_rng(11)
        g = (r.random((2, 1, 4, 4)) > 0.5).astype(float)
        x = t64(r.standard_normal((2, 1, 4, 4)), grad=True)
        rp0 = r.standard_normal((2, 1, 2, 2))
        sp0 = r.standard_normal((2, 1, 2, 2))
        cam0 = r.standard_normal((2, 1, 4, 4))

        def f(t):
            # one shared leaf drives every map so the composite is exercised end to end
            p = T.sigmoid(t)
            blocks = T.permute(T.reshape(t, (2, 1, 2, 2, 2, 2)), (0, 1, 2, 4, 3, 5))
            pooled = T.mean(blocks, (4, 5))  # 2×2 average pooling
            rp = T.sigmoid(pooled + t64(rp0))
            sp = T.sigmoid(pooled * 0.5 + t64(sp0))
            flat = T.reshape(pooled, (2, 1, 4, 1))
            cam = T.sigmoid(T.matmul(flat, T.transpose(flat)) + t64(cam0))
            return L.total_loss(p, rp, sp, cam, g, beta=1.0)[0]

        with L.frozen_omega():
            assert grad_check(f, x) < 1e-5


def test_downsample_mask_area_then_threshold():
    g = np.zeros((1, 1, 4, 4))
    g[0, 0, :2, :2] = 1
    g[0, 0, 2, 2] = 1  # one of four pixels: below the 0.5 threshold
    np.testing.assert_array_equal(L.downsample_mask(g, 2, 2)[0, 0], [[1, 0], [0, 0]])
