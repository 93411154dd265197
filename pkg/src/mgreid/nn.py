"""Minimal numpy neural-network layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during forward and accumulates
parameter gradients into ``d_<param>`` attributes. All math is float64.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import NumericError

Array = np.ndarray

LN_EPS = 1e-6
NORM_EPS = 1e-5
L2_GUARD = 1e-12
RUNNING_MOMENTUM = 0.1


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Array:
    """Normal(0, std) samples with values beyond ±2 std resampled."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return x * std


def softmax(logits: Array, axis: int = -1) -> Array:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def l2_normalize(x: Array, axis: int = -1) -> Array:
    """Unit-normalize along ``axis``; raises NumericError on a ~zero vector."""
    norms = np.linalg.norm(x, axis=axis, keepdims=True)
    if (norms < L2_GUARD).any():
        raise NumericError("cannot L2-normalize a zero vector")
    return x / norms


def l2_normalize_backward(dout: Array, out: Array, norms: Array) -> Array:
    # out = x / ||x||; d x = (dout - out * <out, dout>) / ||x||
    inner = (out * dout).sum(axis=-1, keepdims=True)
    return (dout - out * inner) / norms


class Module:
    """Base class: tracks parameters, gradients and non-trainable state."""

    param_names: tuple[str, ...] = ()
    state_names: tuple[str, ...] = ()

    def __init__(self) -> None:
        self._children: dict[str, Module] = {}

    def add_child(self, name: str, mod: "Module") -> "Module":
        self._children[name] = mod
        return mod

    def named_params(self, prefix: str = ""):
        for name in self.param_names:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_params(prefix + cname + ".")

    def named_grads(self, prefix: str = ""):
        for name in self.param_names:
            yield prefix + name, getattr(self, "d_" + name)
        for cname, child in self._children.items():
            yield from child.named_grads(prefix + cname + ".")

    def named_state(self, prefix: str = ""):
        for name in self.state_names:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_state(prefix + cname + ".")

    def zero_grads(self) -> None:
        for name in self.param_names:
            getattr(self, "d_" + name).fill(0.0)
        for child in self._children.values():
            child.zero_grads()

    def _register(self, name: str, value: Array) -> None:
        setattr(self, name, value)
        setattr(self, "d_" + name, np.zeros_like(value))


class Linear(Module):
    param_names = ("w", "b")

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, std: float = 0.02):
        super().__init__()
        self._register("w", trunc_normal(rng, (d_in, d_out), std))
        self._register("b", np.zeros(d_out))

    def forward(self, x: Array) -> Array:
        self._x = x
        return x @ self.w + self.b

    def backward(self, dout: Array) -> Array:
        x2 = self._x.reshape(-1, self._x.shape[-1])
        g2 = dout.reshape(-1, dout.shape[-1])
        self.d_w += x2.T @ g2
        self.d_b += g2.sum(axis=0)
        return dout @ self.w.T


def _norm_stats(x: Array, axes) -> tuple[Array, Array, Array]:
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return mean, var, 1.0 / np.sqrt(var + NORM_EPS)


def _norm_backward(dxhat: Array, xhat: Array, inv_std: Array, axes) -> Array:
    # Shared backward for (x - mean)/std style normalizations.
    m = dxhat.mean(axis=axes, keepdims=True)
    mx = (dxhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (dxhat - m - xhat * mx)


class LayerNorm(Module):
    param_names = ("gamma", "beta")

    def __init__(self, dim: int, eps: float = LN_EPS):
        super().__init__()
        self.eps = eps
        self._register("gamma", np.ones(dim))
        self._register("beta", np.zeros(dim))

    def forward(self, x: Array) -> Array:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std)
        return xhat * self.gamma + self.beta

    def backward(self, dout: Array) -> Array:
        xhat, inv_std = self._cache
        red = tuple(range(dout.ndim - 1))
        self.d_gamma += (dout * xhat).sum(axis=red)
        self.d_beta += dout.sum(axis=red)
        return _norm_backward(dout * self.gamma, xhat, inv_std, axes=-1)


class BatchNorm(Module):
    """Batch normalization over all axes but the last (channel/feature axis).

    Works for [B, D] feature batches and [B, H, W, C] maps alike. Uses batch
    statistics in training mode and running statistics in inference mode.
    """

    param_names = ("gamma", "beta")
    state_names = ("running_mean", "running_var")

    def __init__(self, dim: int):
        super().__init__()
        self._register("gamma", np.ones(dim))
        self._register("beta", np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def forward(self, x: Array, train: bool) -> Array:
        axes = tuple(range(x.ndim - 1))
        if train:
            mean, var, inv_std = _norm_stats(x, axes)
            self.running_mean += RUNNING_MOMENTUM * (mean.reshape(-1) - self.running_mean)
            self.running_var += RUNNING_MOMENTUM * (var.reshape(-1) - self.running_var)
        else:
            mean = self.running_mean
            var = self.running_var
            inv_std = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train, axes)
        return xhat * self.gamma + self.beta

    def backward(self, dout: Array) -> Array:
        xhat, inv_std, train, axes = self._cache
        self.d_gamma += (dout * xhat).sum(axis=axes)
        self.d_beta += dout.sum(axis=axes)
        dxhat = dout * self.gamma
        if train:
            return _norm_backward(dxhat, xhat, inv_std, axes)
        return dxhat * inv_std


class InstanceNorm(Module):
    """Per-sample, per-channel normalization over spatial axes of [B, H, W, C]."""

    param_names = ("gamma", "beta")

    def __init__(self, channels: int):
        super().__init__()
        self._register("gamma", np.ones(channels))
        self._register("beta", np.zeros(channels))

    def forward(self, x: Array) -> Array:
        mean, var, inv_std = _norm_stats(x, axes=(1, 2))
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std)
        return xhat * self.gamma + self.beta

    def backward(self, dout: Array) -> Array:
        xhat, inv_std = self._cache
        self.d_gamma += (dout * xhat).sum(axis=(0, 1, 2))
        self.d_beta += dout.sum(axis=(0, 1, 2))
        return _norm_backward(dout * self.gamma, xhat, inv_std, axes=(1, 2))


class Conv3x3Stride2(Module):
    """3x3 convolution, stride 2, padding 1, NHWC layout (even H and W)."""

    param_names = ("w", "b")

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        super().__init__()
        fan_in = 9 * c_in
        self._register("w", trunc_normal(rng, (3, 3, c_in, c_out), math.sqrt(2.0 / fan_in)))
        self._register("b", np.zeros(c_out))

    def forward(self, x: Array) -> Array:
        b, h, w, _ = x.shape
        ho, wo = h // 2, w // 2
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        out = np.tile(self.b, (b, ho, wo, 1))
        for di in range(3):
            for dj in range(3):
                patch = xp[:, di : di + 2 * ho : 2, dj : dj + 2 * wo : 2, :]
                out += patch @ self.w[di, dj]
        self._cache = (xp, (b, h, w), (ho, wo))
        return out

    def backward(self, dout: Array) -> Array:
        xp, (b, h, w), (ho, wo) = self._cache
        dxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                patch = xp[:, di : di + 2 * ho : 2, dj : dj + 2 * wo : 2, :]
                self.d_w[di, dj] += np.einsum("bijc,bijo->co", patch, dout)
                dxp[:, di : di + 2 * ho : 2, dj : dj + 2 * wo : 2, :] += dout @ self.w[di, dj].T
        self.d_b += dout.sum(axis=(0, 1, 2))
        return dxp[:, 1 : h + 1, 1 : w + 1, :]


class ReLU(Module):
    def forward(self, x: Array) -> Array:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout: Array) -> Array:
        return np.where(self._mask, dout, 0.0)


def gelu(x: Array) -> Array:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: Array) -> Array:
    phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * phi


class Mlp(Module):
    """Two-layer token MLP with GELU, hidden size 4x."""

    def __init__(self, rng: np.random.Generator, dim: int):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(rng, dim, 4 * dim))
        self.fc2 = self.add_child("fc2", Linear(rng, 4 * dim, dim))

    def forward(self, x: Array) -> Array:
        h = self.fc1.forward(x)
        self._h = h
        return self.fc2.forward(gelu(h))

    def backward(self, dout: Array) -> Array:
        dg = self.fc2.backward(dout)
        return self.fc1.backward(dg * gelu_grad(self._h))


class MultiHeadAttention(Module):
    """Standard multi-head self-attention; keeps the last attention maps."""

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError("dim must divide evenly across heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = self.add_child("qkv", Linear(rng, dim, 3 * dim))
        self.proj = self.add_child("proj", Linear(rng, dim, dim))
        self.last_attention: Array | None = None

    def forward(self, x: Array) -> Array:
        b, t, d = x.shape
        h, hd = self.num_heads, self.head_dim
        qkv = self.qkv.forward(x).reshape(b, t, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # each [b, h, t, hd]
        scale = 1.0 / math.sqrt(hd)
        attn = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        ctx = attn @ v
        self._cache = (q, k, v, attn, scale, (b, t, d))
        self.last_attention = attn
        return self.proj.forward(ctx.transpose(0, 2, 1, 3).reshape(b, t, d))

    def backward(self, dout: Array) -> Array:
        q, k, v, attn, scale, (b, t, d) = self._cache
        h, hd = self.num_heads, self.head_dim
        dctx = self.proj.backward(dout).reshape(b, t, h, hd).transpose(0, 2, 1, 3)
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dlogits = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = (dlogits @ k) * scale
        dk = (dlogits.transpose(0, 1, 3, 2) @ q) * scale
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(b, t, 3 * d)
        return self.qkv.backward(dqkv)


class TransformerLayer(Module):
    """Pre-LN transformer layer: z' = z + MSA(LN(z)); out = z' + MLP(LN(z'))."""

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int):
        super().__init__()
        self.ln1 = self.add_child("ln1", LayerNorm(dim))
        self.attn = self.add_child("attn", MultiHeadAttention(rng, dim, num_heads))
        self.ln2 = self.add_child("ln2", LayerNorm(dim))
        self.mlp = self.add_child("mlp", Mlp(rng, dim))

    def forward(self, x: Array) -> Array:
        zhat = x + self.attn.forward(self.ln1.forward(x))
        return zhat + self.mlp.forward(self.ln2.forward(zhat))

    def backward(self, dout: Array) -> Array:
        dzhat = dout + self.ln2.backward(self.mlp.backward(dout))
        return dzhat + self.ln1.backward(self.attn.backward(dzhat))

    @property
    def last_attention(self) -> Array | None:
        return self.attn.last_attention


class SGD:
    """SGD with classical momentum and decoupled-from-nothing weight decay:
    v <- mu*v + grad + wd*param; param <- param - lr*v (in place)."""

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[str, Array] = {}

    def step(self, model: Module, lr: float) -> None:
        grads = dict(model.named_grads())
        for name, param in model.named_params():
            g = grads[name] + self.weight_decay * param
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(param)
                self._velocity[name] = v
            v *= self.momentum
            v += g
            param -= lr * v


def check_finite(x: Array, context: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {context}")
