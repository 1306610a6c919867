"""Neural-network building blocks on top of the autodiff engine.

Modules own named parameters and submodules; ``parameters()`` yields a
flat ``name -> Tensor`` mapping with stable, checkpoint-friendly names.
All initialisation draws from an explicit ``numpy.random.Generator`` so
that construction is fully deterministic.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class with automatic parameter/submodule registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_mods", {})

    def __setattr__(self, name, value):
        if name.startswith("_"):
            object.__setattr__(self, name, value)
            return
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._mods[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            value = ModuleList(value)
            self._mods[name] = value
        object.__setattr__(self, name, value)

    def parameters(self, prefix=""):
        """Flat ordered mapping of parameter names to tensors."""
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, m in self._mods.items():
            out.update(m.parameters(prefix + name + "."))
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def set_requires_grad(self, flag):
        for p in self.parameters().values():
            p.requires_grad = bool(flag)

    def set_dtype(self, dtype):
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)

    def num_params(self):
        return sum(p.data.size for p in self.parameters().values())

    def state_arrays(self):
        return {name: p.data for name, p in self.parameters().items()}

    def load_state(self, arrays):
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self._list = list(mods)
        for i, m in enumerate(self._list):
            self._mods[str(i)] = m

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def _glorot(rng, shape, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.w = Tensor(_glorot(rng, (n_in, n_out), n_in, n_out, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=(1, 1), padding=None, bias=True, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = (stride, stride) if isinstance(stride, int) else stride
        self.padding = (kh // 2, kw // 2) if padding is None else padding
        fan_in = c_in * kh * kw
        fan_out = c_out * kh * kw
        self.w = Tensor(_glorot(rng, (c_out, c_in, kh, kw), fan_in, fan_out, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=(1, 1), padding=None, output_padding=(0, 0), bias=True, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = (stride, stride) if isinstance(stride, int) else stride
        self.padding = (kh // 2, kw // 2) if padding is None else padding
        self.output_padding = output_padding
        fan_in = c_in * kh * kw
        fan_out = c_out * kh * kw
        self.w = Tensor(_glorot(rng, (c_in, c_out, kh, kw), fan_in, fan_out, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.w, self.b, self.stride, self.padding, self.output_padding)


class Conv1d(Module):
    """1-D convolution over (B, C, T), implemented on the 2-D kernel."""

    def __init__(self, c_in, c_out, width, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, (1, width), rng, stride=(1, 1), padding=(0, width // 2), bias=bias, dtype=dtype)
        self.even = width % 2 == 0

    def __call__(self, x):
        b, c, t = x.shape
        y = self.conv(ad.reshape(x, (b, c, 1, t)))
        if self.even:
            # even widths with floor(w/2) padding overshoot by one frame
            y = y[:, :, :, :t]
        return ad.reshape(y, (y.shape[0], y.shape[1], y.shape[3]))


class Embedding(Module):
    def __init__(self, vocab, dim, rng, dtype=np.float32):
        super().__init__()
        self.vocab = vocab
        self.w = Tensor((rng.standard_normal((vocab, dim)) * (1.0 / np.sqrt(dim))).astype(dtype), requires_grad=True)

    def __call__(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ValueError(f"token id out of range [0, {self.vocab})")
        return ad.embedding(self.w, ids)


class InstanceNorm2d(Module):
    """Per-sample, per-channel normalisation over the spatial axes.

    Batch-statistics free, so batch size 1 is well defined.
    """

    def __init__(self, channels, rng=None, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)

    def __call__(self, x):
        mu = ad.tmean(x, axis=(2, 3), keepdims=True)
        xc = x - mu
        var = ad.tmean(ad.square(xc), axis=(2, 3), keepdims=True)
        return xc / ad.sqrt(var + self.eps) * self.gamma + self.beta


def pixel_norm(x, eps=1e-5):
    """Normalize each spatial location's channel vector to unit RMS.

    Stabilizes generator activations without destroying spatially constant
    channels (unlike instance norm, which zeroes any flat plane).
    """
    ms = ad.tmean(ad.square(x), axis=1, keepdims=True)
    return x / ad.sqrt(ms + eps)


class GRU(Module):
    """Single-layer gated recurrent unit over (B, T, F) sequences."""

    def __init__(self, n_in, n_hidden, rng, dtype=np.float32):
        super().__init__()
        self.n_hidden = n_hidden
        self.wx = Tensor(_glorot(rng, (n_in, 3 * n_hidden), n_in, n_hidden, dtype), requires_grad=True)
        self.bx = Tensor(np.zeros(3 * n_hidden, dtype=dtype), requires_grad=True)
        self.wh_ru = Tensor(_glorot(rng, (n_hidden, 2 * n_hidden), n_hidden, n_hidden, dtype), requires_grad=True)
        self.wh_c = Tensor(_glorot(rng, (n_hidden, n_hidden), n_hidden, n_hidden, dtype), requires_grad=True)

    def step(self, x_t, h):
        n = self.n_hidden
        xg = x_t @ self.wx + self.bx
        hg = h @ self.wh_ru
        r = ad.sigmoid(xg[:, :n] + hg[:, :n])
        u = ad.sigmoid(xg[:, n : 2 * n] + hg[:, n:])
        c = ad.tanh(xg[:, 2 * n :] + (r * h) @ self.wh_c)
        return u * h + (1.0 - u) * c

    def __call__(self, x, h0=None, return_sequence=True):
        b, t, _ = x.shape
        h = h0 if h0 is not None else ad.as_tensor(np.zeros((b, self.n_hidden), dtype=x.dtype))
        states = []
        for i in range(t):
            h = self.step(x[:, i, :], h)
            if return_sequence:
                states.append(ad.reshape(h, (b, 1, self.n_hidden)))
        if return_sequence:
            return ad.concat(states, axis=1), h
        return None, h


class BiGRU(Module):
    """Bidirectional GRU; outputs forward/backward states concatenated."""

    def __init__(self, n_in, n_hidden, rng, dtype=np.float32):
        super().__init__()
        self.fwd = GRU(n_in, n_hidden, rng, dtype)
        self.bwd = GRU(n_in, n_hidden, rng, dtype)

    def __call__(self, x):
        b, t, f = x.shape
        seq_f, _ = self.fwd(x)
        rev = ad.concat([x[:, i : i + 1, :] for i in range(t - 1, -1, -1)], axis=1) if t > 1 else x
        seq_b, _ = self.bwd(rev)
        if t > 1:
            seq_b = ad.concat([seq_b[:, i : i + 1, :] for i in range(t - 1, -1, -1)], axis=1)
        return ad.concat([seq_f, seq_b], axis=2)
