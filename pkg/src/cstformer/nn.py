"""Module containers and the layers the model is built from."""
import math
import zlib

import numpy as np

from . import functional as F
from .errors import ConfigError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor; ``init`` names how it is (re)initialized."""

    __slots__ = ("init", "fan_in")

    def __init__(self, shape, init="kaiming", fan_in=None, dtype=np.float32):
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.init = init
        self.fan_in = fan_in

    def reset(self, rng):
        if self.init == "zeros":
            self.data[...] = 0
        elif self.init == "ones":
            self.data[...] = 1
        elif self.init == "kaiming":
            # kaiming-uniform with negative slope sqrt(5): bound = 1/sqrt(fan_in)
            bound = math.sqrt(3.0 / self.fan_in) * math.sqrt(2.0 / (1.0 + 5.0))
            self.data[...] = rng.uniform(-bound, bound, size=self.shape)
        else:
            raise ValueError(f"unknown init {self.init!r}")


class Module:
    """Minimal module tree: parameters, buffers and train/eval flags."""

    training = True
    _buffer_names = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key in self._buffer_names:
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def reset_parameters(self, seed):
        """Initialize every parameter from a generator keyed on (seed, name).

        Keying on the name keeps a parameter's initial value independent of
        which other layers exist in the model.
        """
        for name, p in self.named_parameters():
            p.reset(np.random.default_rng([seed, zlib.crc32(name.encode())]))
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def set_rng(self, rng):
        for m in self.modules():
            m.rng = rng
        return self

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for key in m._buffer_names:
                setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = [n for n in params if n not in state]
        if missing:
            raise KeyError(f"state is missing parameters: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for m_prefix, m in self._named_modules():
            for key in m._buffer_names:
                full = f"buffer:{m_prefix}{key}"
                if full in state:
                    setattr(m, key, np.asarray(state[full], dtype=getattr(m, key).dtype).copy())

    def _named_modules(self, prefix=""):
        yield prefix, self
        for key, child in self.children():
            yield from child._named_modules(f"{prefix}{key}.")


class Linear(Module):
    def __init__(self, din, dout, bias=True):
        self.weight = Parameter((dout, din), fan_in=din)
        self.bias = Parameter((dout,), init="zeros") if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def pair(self):
        return self.weight, self.bias


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, bias=True):
        kh, kw = F._pair(kernel)
        self.weight = Parameter((cout, cin, kh, kw), fan_in=cin * kh * kw)
        self.bias = Parameter((cout,), init="zeros") if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel, padding=0, bias=True):
        kh, kw = F._pair(kernel)
        self.weight = Parameter((channels, 1, kh, kw), fan_in=kh * kw)
        self.bias = Parameter((channels,), init="zeros") if bias else None
        self.padding = padding

    def forward(self, x):
        return F.depthwise_conv2d(x, self.weight, self.bias, 1, self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.weight = Parameter((channels,), init="ones")
        self.bias = Parameter((channels,), init="zeros")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = Parameter((dim,), init="ones")
        self.bias = Parameter((dim,), init="zeros")
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    rng = None

    def __init__(self, p):
        self.p = p

    def forward(self, x):
        return F.dropout(x, self.p, self.training, self.rng)


class MultiheadSelfAttention(Module):
    rng = None

    def __init__(self, embed, heads, dropout=0.0):
        if embed % heads:
            raise ConfigError(f"embedding dim {embed} is not divisible by {heads} heads")
        self.q_proj = Linear(embed, embed)
        self.k_proj = Linear(embed, embed)
        self.v_proj = Linear(embed, embed)
        self.out_proj = Linear(embed, embed)
        self.heads = heads
        self.dropout = dropout

    def params(self):
        return {
            "q": self.q_proj.pair(),
            "k": self.k_proj.pair(),
            "v": self.v_proj.pair(),
            "out": self.out_proj.pair(),
        }

    def forward(self, x, return_weights=False):
        return F.mhsa(
            x, self.params(), self.heads, self.dropout, self.training, self.rng,
            return_weights=return_weights,
        )
