"""Central-difference gradient checking and the named check suite run by ``graftnet gradcheck``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import BackwardError
from .tensor import Tensor

DEFAULT_STEP = 1e-5
OP_TOL = 1e-5
NETWORK_TOL = 1e-4


def grad_check(f, x: Tensor, h=DEFAULT_STEP, n_samples=None, seed=0):
    """Max over checked elements of |analytic - numeric| / max(1, |analytic|, |numeric|).

    ``f`` maps ``x`` (modified in place during the check) to a scalar tensor.
    With ``n_samples`` only that many randomly chosen elements are perturbed.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs float64 tensors; build them inside default_dtype(np.float64)")
    if not x.requires_grad:
        raise ValueError("grad_check needs x.requires_grad")
    with T.default_dtype(np.float64):
        x.zero_grad()
        with T.fresh_tape():
            y = f(x)
            if y.data.size != 1:
                raise BackwardError(f"grad_check: f must return a scalar, got shape {y.shape}")
            y.backward()
        analytic = x.grad.copy()
        flat = x.data.reshape(-1)
        if n_samples is None or n_samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.random.default_rng(seed).choice(flat.size, n_samples, replace=False)
        worst = 0.0
        with T.no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = f(x).item()
                flat[i] = orig - h
                fm = f(x).item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


# ---------------------------------------------------------------- suite


@dataclass
class Check:
    name: str
    kind: str  # "op" or "composite"
    run: Callable[[int], float]  # seed -> max relative error
    tol: float


def _rand(rng, shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weighted_sum(out, rng):
    w = Tensor(rng.standard_normal(out.shape))
    return T.tsum(out * w)


def _unary(op, lo=-2.0, hi=2.0, shape=(3, 4)):
    def run(seed):
        rng = np.random.default_rng(seed)
        x = _rand(rng, shape, lo, hi)
        w = Tensor(rng.standard_normal(shape))
        return grad_check(lambda t: T.tsum(op(t) * w), x)

    return run


def _binary(op, shape_a, shape_b, lo_b=-2.0, hi_b=2.0):
    def run(seed):
        rng = np.random.default_rng(seed)
        a = _rand(rng, shape_a)
        b = _rand(rng, shape_b, lo_b, hi_b)
        out_shape = op(a, b).shape
        w = Tensor(rng.standard_normal(out_shape))
        ea = grad_check(lambda t: T.tsum(op(t, b) * w), a)
        eb = grad_check(lambda t: T.tsum(op(a, t) * w), b)
        return max(ea, eb)

    return run


def _conv(stride, pad, k):
    def run(seed):
        rng = np.random.default_rng(seed)
        x = _rand(rng, (2, 2, 5, 5))
        wt = _rand(rng, (3, 2, k, k))
        b = _rand(rng, (3,))
        wout = Tensor(rng.standard_normal(T.conv2d(x, wt, b, stride, pad).shape))

        def f_of(which):
            def f(t):
                args = {"x": x, "w": wt, "b": b}
                args[which] = t
                return T.tsum(T.conv2d(args["x"], args["w"], args["b"], stride, pad) * wout)

            return f

        return max(grad_check(f_of("x"), x), grad_check(f_of("w"), wt), grad_check(f_of("b"), b))

    return run


def _layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _rand(rng, (2, 3, 5)), _rand(rng, (5,)), _rand(rng, (5,))
    w = Tensor(rng.standard_normal((2, 3, 5)))
    errs = [
        grad_check(lambda t: T.tsum(T.layer_norm(t, g, b) * w), x),
        grad_check(lambda t: T.tsum(T.layer_norm(x, t, b) * w), g),
        grad_check(lambda t: T.tsum(T.layer_norm(x, g, t) * w), b),
    ]
    return max(errs)


def _batch_norm(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _rand(rng, (3, 2, 3, 3)), _rand(rng, (2,)), _rand(rng, (2,))
    st = T.BatchNormState(2, dtype=np.float64)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    errs = [
        grad_check(lambda t: T.tsum(T.batch_norm2d(t, g, b, st) * w), x),
        grad_check(lambda t: T.tsum(T.batch_norm2d(x, t, b, st) * w), g),
        grad_check(lambda t: T.tsum(T.batch_norm2d(x, g, t, st) * w), b),
    ]
    st.training = False
    errs.append(grad_check(lambda t: T.tsum(T.batch_norm2d(t, g, b, st) * w), x))
    return max(errs)


def _softmax_sq(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (4, 5))
    return grad_check(lambda t: T.tsum(T.softmax_rows(t) * T.softmax_rows(t)), x)


def _resize(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (1, 2, 3, 4))
    w1 = Tensor(rng.standard_normal((1, 2, 7, 5)))
    w2 = Tensor(rng.standard_normal((1, 2, 2, 2)))
    return max(
        grad_check(lambda t: T.tsum(T.bilinear_resize(t, 7, 5) * w1), x),
        grad_check(lambda t: T.tsum(T.bilinear_resize(t, 2, 2) * w2), x),
    )


def _shape_ops(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (2, 3, 2, 2))
    w = Tensor(rng.standard_normal((2, 4, 3)))
    w2 = Tensor(rng.standard_normal((2, 3, 4)))
    w3 = Tensor(rng.standard_normal((4, 6)))
    return max(
        grad_check(lambda t: T.tsum(T.flatten_spatial(t) * w), x),
        grad_check(lambda t: T.tsum(T.transpose(T.flatten_spatial(t)) * w2), x),
        grad_check(lambda t: T.tsum(T.reshape(t, (4, 6)) * w3), x),
    )


def _reductions(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, (3, 4, 2))
    w = Tensor(rng.standard_normal((3, 2)))
    return max(
        grad_check(lambda t: T.tsum(T.tsum(t, axis=1) * w), x),
        grad_check(lambda t: T.tsum(T.mean(t, axis=1, keepdims=True) * T.reshape(w, (3, 1, 2))), x),
    )


def _attention(seed):
    from .encoders import attention

    rng = np.random.default_rng(seed)
    q, k, v = _rand(rng, (2, 4, 6)), _rand(rng, (2, 5, 6)), _rand(rng, (2, 5, 6))
    w = Tensor(rng.standard_normal((2, 4, 6)))

    def f_of(i):
        def f(t):
            args = [q, k, v]
            args[i] = t
            return T.tsum(attention(*args, heads=2)[0] * w)

        return f

    return max(grad_check(f_of(i), t) for i, t in enumerate((q, k, v)))


def _cmgm(seed):
    from .cmgm import CMGM

    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        mod = CMGM(np.random.default_rng(seed + 100), 6, 5, 4, heads=2)
        f_r = _rand(rng, (2, 6, 2, 2))
        f_s = _rand(rng, (2, 5, 3, 3))
        wz = Tensor(rng.standard_normal((2, 4, 2, 2)))
        wc = Tensor(rng.standard_normal((2, 1, 4, 4)))

        def loss(r, s):
            out = mod(r, s)
            return T.tsum(out.z * wz) + T.tsum(out.cam * wc)

        errs = [grad_check(lambda t: loss(t, f_s), f_r), grad_check(lambda t: loss(f_r, t), f_s)]
        for p in (mod.w_q.weight, mod.w_k.weight, mod.w_v.weight, mod.cam_conv.weight, mod.ln_s.gamma):
            errs.append(grad_check(lambda t: loss(f_r, f_s), p))
    return max(errs)


def _agl(seed):
    from .losses import agl, attn_matrix_array

    rng = np.random.default_rng(seed)
    g = (rng.random((4, 4)) > 0.5).astype(np.float64)
    g_a = attn_matrix_array(g)
    rp_a = attn_matrix_array(rng.random((4, 4)))
    sp_a = attn_matrix_array(rng.random((4, 4)))
    x = _rand(rng, (16, 16))
    return grad_check(lambda t: agl(Tensor(g_a), T.sigmoid(t), rp_a, sp_a, beta=1.0), x)


def _total_loss(seed):
    from .losses import frozen_omega, total_loss

    rng = np.random.default_rng(seed)
    g = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    xs = {
        "p": _rand(rng, (2, 1, 4, 4)),
        "rp": _rand(rng, (2, 1, 2, 2)),
        "sp": _rand(rng, (2, 1, 2, 2)),
        "cam": _rand(rng, (2, 1, 4, 4)),
    }

    def f_of(name):
        def f(t):
            a = dict(xs)
            a[name] = t
            return total_loss(*(T.sigmoid(a[k]) for k in ("p", "rp", "sp", "cam")), g, beta=1.0)[0]

        return f

    errs = []
    for name, x in xs.items():
        with frozen_omega():
            errs.append(grad_check(f_of(name), x))
    return max(errs)


def network_config():
    from .config import TrainConfig

    return TrainConfig(
        variant="cmgm_agl", input_hw=32, attn_input_hw=16, channel_factor=1 / 16, decoder_channels=4, cmgm_heads=1
    )


# central differences at 1e-5 straddle ReLU kinks often enough in a full network to
# swamp the comparison; a smaller step and a batch of four keep them rare
NETWORK_STEP = 1e-6
NETWORK_BATCH = 4


def _network(seed, n_samples=4):
    from .losses import frozen_omega, model_loss
    from .model import build_model

    cfg = network_config().replace(seed=seed)
    model = build_model(cfg, np.float64)
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        image = Tensor(rng.random((NETWORK_BATCH, 3, 32, 32)), requires_grad=True)
    g = (rng.random((NETWORK_BATCH, 1, 32, 32)) > 0.5).astype(np.float64)

    def f(_):
        return model_loss(model(image), g, cfg.beta, True)[0]

    params = dict(model.named_parameters())
    targets = [image] + [
        params[n]
        for n in (
            "cnn_encoder.stem.conv.weight",
            "attn_encoder.embed.weight",
            "attn_encoder.blocks.1.q.weight",
            "cmgm.w_q.weight",
            "cmgm.w_k.weight",
            "cmgm.cam_conv.weight",
            "cnn_decoder.head.conv.weight",
            "rp_head.conv.weight",
        )
    ]
    errs = []
    for i, t in enumerate(targets):
        with frozen_omega():
            errs.append(grad_check(f, t, h=NETWORK_STEP, n_samples=n_samples, seed=seed * 31 + i))
    return max(errs)


def _ops():
    return [
        Check("matmul", "op", _binary(T.matmul, (3, 4), (4, 2)), OP_TOL),
        Check("matmul_batched", "op", _binary(T.matmul, (2, 3, 4), (2, 4, 2)), OP_TOL),
        Check("add", "op", _binary(T.add, (2, 3), (1, 3)), OP_TOL),
        Check("mul", "op", _binary(T.mul, (2, 3), (2, 1)), OP_TOL),
        Check("div", "op", _binary(T.div, (2, 3), (2, 3), 0.5, 2.0), OP_TOL),
        Check("relu", "op", _unary(T.relu), OP_TOL),
        Check("sigmoid", "op", _unary(T.sigmoid), OP_TOL),
        Check("tanh", "op", _unary(T.tanh), OP_TOL),
        Check("abs", "op", _unary(T.tabs), OP_TOL),
        Check("log", "op", _unary(T.log, 0.1, 2.0), OP_TOL),
        Check("gelu", "op", _unary(T.gelu), OP_TOL),
        Check("softmax_rows", "op", _softmax_sq, OP_TOL),
        Check("conv2d", "op", _conv(1, 1, 3), OP_TOL),
        Check("conv2d_strided", "op", _conv(2, 1, 3), OP_TOL),
        Check("conv2d_patch", "op", _conv(2, 0, 2), OP_TOL),
        Check("layer_norm", "op", _layer_norm, OP_TOL),
        Check("batch_norm2d", "op", _batch_norm, OP_TOL),
        Check("bilinear_resize", "op", _resize, OP_TOL),
        Check("shape_ops", "op", _shape_ops, OP_TOL),
        Check("reductions", "op", _reductions, OP_TOL),
        Check("attention", "op", _attention, OP_TOL),
    ]


def suite():
    return _ops() + [
        Check("cmgm", "composite", _cmgm, OP_TOL),
        Check("agl", "composite", _agl, OP_TOL),
        Check("total_loss", "composite", _total_loss, OP_TOL),
        Check("network", "composite", _network, NETWORK_TOL),
    ]


def run_suite(names=None, seeds=range(5), report=print):
    """Run checks over seeds; returns {name: worst error}. ``report`` receives one line per check."""
    results = {}
    for check in suite():
        if names and check.name not in names:
            continue
        with T.default_dtype(np.float64):
            worst = max(check.run(s) for s in seeds)
        results[check.name] = (worst, check.tol)
        if report:
            report(f"{'PASS' if worst < check.tol else 'FAIL'}  {check.name:<18} max_rel_err={worst:.3e}  tol={check.tol:.0e}")
    return results
