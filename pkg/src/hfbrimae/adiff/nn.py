"""Neural building blocks on top of :mod:`hfbrimae.adiff.tensor`."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Parameter container. Attributes that are Parameters, Modules, lists of
    Modules or numpy buffers registered via ``register_buffer`` are discovered
    automatically and named by attribute path."""

    def __init__(self):
        self.training = True
        self._buffers = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name, value):
        self._buffers[name] = value

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = [k for k in list(own) + list(bufs) if k not in state]
        unexpected = [k for k in state if k not in own and k not in bufs]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch; missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name in state:
                value = np.asarray(state[name])
                if value.shape != p.shape:
                    raise ShapeError(f"{name}: checkpoint {value.shape} vs model {p.shape}")
                p.data = value.astype(p.dtype).copy()
        for name, b in bufs.items():
            if name in state:
                value = np.asarray(state[name])
                if value.shape != b.shape:
                    raise ShapeError(f"{name}: checkpoint {value.shape} vs model {b.shape}")
                b[...] = value

    def astype(self, dtype):
        """Cast all parameters in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name, b in m._buffers.items():
                m._buffers[name] = b.astype(dtype)
        return self

    def reseed(self, rng):
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng
        return self


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map; weights uniform in +-sqrt(1/fan_in), bias zero."""

    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        bound = math.sqrt(1.0 / in_features)
        self.weight = Parameter(_uniform(rng, (in_features, out_features), bound))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm(Module):
    """Channels-last batch norm; statistics over all leading axes."""

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(dim, dtype=T.get_dtype()))
        self.register_buffer("running_var", np.ones(dim, dtype=T.get_dtype()))

    @property
    def running_mean(self):
        return self._buffers["running_mean"]

    @property
    def running_var(self):
        return self._buffers["running_var"]

    def forward(self, x):
        return T.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Dropout(Module):
    def __init__(self, p, rng=None):
        super().__init__()
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x):
        return T.dropout(x, self.p, self.rng, self.training)


def multi_head_attention(x, qkv, proj, heads):
    """Scaled dot-product self-attention over the token axis of x (B, T, D).

    No masking: every token attends to every token.
    """
    b, t, d = x.shape
    if d % heads:
        raise ShapeError(f"embedding dim {d} is not divisible by {heads} heads")
    dk = d // heads
    packed = qkv(x).reshape(b, t, 3, heads, dk).transpose(2, 0, 3, 1, 4)
    q, k, v = packed[0], packed[1], packed[2]
    scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dk))
    att = T.softmax_lastdim(scores)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return proj(out)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"embedding dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x):
        return multi_head_attention(x, self.qkv, self.proj, self.heads)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio * dim, rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
