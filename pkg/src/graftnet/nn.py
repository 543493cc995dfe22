"""Parameter containers and the small set of layers the network is built from."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor, parameter


class Module:
    """Holds parameters, batch-norm state and child modules as attributes."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{full}.{i}.")

    def named_bn_states(self, prefix=""):
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, BatchNormState):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_bn_states(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_bn_states(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_arrays(self):
        """Every array needed to restore the module: parameters and running statistics."""
        out = {}
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, st in self.named_bn_states():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays):
        params = dict(self.named_parameters())
        states = dict(self.named_bn_states())
        expected = set(params) | {f"{n}.running_{s}" for n in states for s in ("mean", "var")}
        missing = expected - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, p in params.items():
            src = np.asarray(arrays[name])
            if src.shape != p.data.shape:
                raise ValueError(f"{name}: shape {src.shape} != {p.data.shape}")
            p.data[...] = src
        for name, st in states.items():
            st.running_mean[...] = arrays[f"{name}.running_mean"]
            st.running_var[...] = arrays[f"{name}.running_var"]

    def train(self, mode=True):
        for _, st in self.named_bn_states():
            st.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast every parameter and statistic in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for _, st in self.named_bn_states():
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
        return self


def he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, pad=None, bias=False):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.weight = parameter(he_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.state = BatchNormState(channels)

    def __call__(self, x):
        return T.batch_norm2d(x, self.gamma, self.beta, self.state)


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.weight = parameter(he_uniform(rng, (d_in, d_out), d_in))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class ConvBNReLU(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1):
        self.conv = Conv2d(rng, c_in, c_out, k, stride=stride)
        self.bn = BatchNorm2d(c_out)

    def __call__(self, x):
        return T.relu(self.bn(self.conv(x)))


class PredictionHead(Module):
    """1×1 convolution to one channel followed by a sigmoid."""

    def __init__(self, rng, c_in):
        self.conv = Conv2d(rng, c_in, 1, 1, bias=True)

    def logits(self, f):
        return self.conv(f)

    def __call__(self, f):
        return T.sigmoid(self.conv(f))


def prediction_head(f, head: PredictionHead):
    return head(f)
