"""Small neural blocks with hand-written adjoints.

Every block follows the same calling convention::

    y, cache = block.forward(x)
    dx = block.backward(cache, dy)   # accumulates parameter grads

Caches are plain tuples so one block may be applied several times before
any backward pass (e.g. the mapping heads are evaluated on several query
batches). Parameter gradients accumulate until ``zero_grad`` is called.
"""

from __future__ import annotations

from collections.abc import Iterator
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from ..errors import ConfigError, DimensionError

_PARAM_GRADS = True


@contextmanager
def no_param_grads():
    """Backward passes inside the block return input gradients and leave parameter grads alone."""
    global _PARAM_GRADS
    prev, _PARAM_GRADS = _PARAM_GRADS, False
    try:
        yield
    finally:
        _PARAM_GRADS = prev


def param_grads_enabled() -> bool:
    return _PARAM_GRADS


class Module:
    def __init__(self) -> None:
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.ascontiguousarray(value, dtype=np.float64)
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def p(self, name: str) -> np.ndarray:
        return self._params[name]

    def g(self, name: str) -> np.ndarray:
        return self._grads[name]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, value in self._params.items():
            yield prefix + name, value, self._grads[name]
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def zero_grad(self) -> None:
        for _, _, grad in self.named_parameters():
            grad.fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, value, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, value, _ in self.named_parameters():
            key = prefix + name
            if key not in state:
                raise ConfigError(f"checkpoint is missing parameter {key!r}")
            src = np.asarray(state[key], dtype=np.float64)
            if src.shape != value.shape:
                raise DimensionError(f"parameter {key!r}: expected {value.shape}, got {src.shape}")
            value[...] = src

    def num_params(self) -> int:
        return sum(v.size for _, v, _ in self.named_parameters())


# --- activations -----------------------------------------------------------

def _silu(x):
    return x * expit(x)


def _silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def _tanh_grad(x):
    t = np.tanh(x)
    return 1.0 - t * t


_ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(np.float64)),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


class Activation(Module):
    def __init__(self, kind: str = "silu") -> None:
        super().__init__()
        if kind not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {kind!r}")
        self.kind = kind
        self._f, self._df = _ACTIVATIONS[kind]

    def forward(self, x):
        if self.kind == "silu":  # keep the sigmoid for the backward pass
            sig = expit(x)
            return x * sig, (x, sig)
        return self._f(x), x

    def backward(self, cache, dy):
        if self.kind == "identity":
            return dy
        if self.kind == "silu":
            x, sig = cache
            return dy * (sig * (1.0 + x * (1.0 - sig)))
        return dy * self._df(cache)


# --- dense -----------------------------------------------------------------

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 gain: float = 1.0) -> None:
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.add_param("weight", rng.normal(0.0, gain / np.sqrt(d_in), size=(d_in, d_out)))
        self.bias = bias
        if bias:
            self.add_param("bias", np.zeros(d_out))

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects last dim {self.d_in}, got {x.shape[-1]}")
        y = x @ self._params["weight"]
        if self.bias:
            y = y + self._params["bias"]
        return y, x

    def backward(self, cache, dy):
        x = cache
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        if _PARAM_GRADS:
            self._grads["weight"] += x2.T @ dy2
            if self.bias:
                self._grads["bias"] += dy2.sum(axis=0)
        return dy @ self._params["weight"].T


class Sequential(Module):
    def __init__(self, *layers: Module) -> None:
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, cache, dy):
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            dy = layer.backward(c, dy)
        return dy


class MLP(Sequential):
    """Fully connected stack; ``sizes`` lists every width including in/out."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, act: str = "silu",
                 final_act: str = "identity", final_gain: float = 1.0) -> None:
        if len(sizes) < 2:
            raise ConfigError("MLP needs at least input and output widths")
        layers: list[Module] = []
        for i in range(len(sizes) - 1):
            last = i == len(sizes) - 2
            layers.append(Linear(sizes[i], sizes[i + 1], rng, gain=final_gain if last else 1.0))
            kind = final_act if last else act
            if kind != "identity":
                layers.append(Activation(kind))
        super().__init__(*layers)
        self.sizes = list(sizes)

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    @property
    def d_out(self) -> int:
        return self.sizes[-1]


def mlp_apply(net: MLP, x: np.ndarray) -> np.ndarray:
    return net.forward(x)[0]


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.add_param("gamma", np.ones(dim))
        self.add_param("beta", np.zeros(dim))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * rstd
        return xhat * self._params["gamma"] + self._params["beta"], (xhat, rstd)

    def backward(self, cache, dy):
        xhat, rstd = cache
        d = xhat.shape[-1]
        if _PARAM_GRADS:
            self._grads["gamma"] += (dy * xhat).reshape(-1, d).sum(axis=0)
            self._grads["beta"] += dy.reshape(-1, d).sum(axis=0)
        dxhat = dy * self._params["gamma"]
        return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                       - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


# --- attention -------------------------------------------------------------

def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with learned q/k/v/out projections.

    Inputs are (batch, tokens, width); 2D inputs are treated as batch 1.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 d_kv: int | None = None, out_gain: float = 1.0) -> None:
        super().__init__()
        if n_heads < 1 or d_model % n_heads:
            raise ConfigError(f"{n_heads} heads do not divide width {d_model}")
        d_kv = d_model if d_kv is None else d_kv
        self.d_model, self.d_kv, self.n_heads = d_model, d_kv, n_heads
        self.d_head = d_model // n_heads
        self.q = self.add_child("q", Linear(d_model, d_model, rng))
        # a key bias only shifts every score of a query equally, so it is omitted
        self.k = self.add_child("k", Linear(d_kv, d_model, rng, bias=False))
        self.v = self.add_child("v", Linear(d_kv, d_model, rng))
        self.o = self.add_child("o", Linear(d_model, d_model, rng, gain=out_gain))

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, n, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)

    def weights(self, xq, xkv):
        """Softmax attention weights, shape (batch, heads, n_q, n_kv)."""
        q = self._split(self.q.forward(xq)[0])
        k = self._split(self.k.forward(xkv)[0])
        return softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.d_head))

    def forward(self, xq, xkv):
        squeeze = xq.ndim == 2
        if squeeze:
            xq, xkv = xq[None], xkv[None]
        if xq.shape[-1] != self.d_model or xkv.shape[-1] != self.d_kv:
            raise DimensionError("attention input widths do not match the block")
        qf, cq = self.q.forward(xq)
        kf, ck = self.k.forward(xkv)
        vf, cv = self.v.forward(xkv)
        q, k, v = self._split(qf), self._split(kf), self._split(vf)
        a = softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.d_head))
        o = self._merge(a @ v)
        y, co = self.o.forward(o)
        if squeeze:
            y = y[0]
        return y, (squeeze, cq, ck, cv, co, q, k, v, a)

    def backward(self, cache, dy):
        squeeze, cq, ck, cv, co, q, k, v, a = cache
        if squeeze:
            dy = dy[None]
        do = self._split(self.o.backward(co, dy))
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(self.d_head)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dxq = self.q.backward(cq, self._merge(dq))
        dxkv = self.k.backward(ck, self._merge(dk)) + self.v.backward(cv, self._merge(dv))
        if squeeze:
            return dxq[0], dxkv[0]
        return dxq, dxkv


def attention_apply(block: MultiHeadAttention, queries: np.ndarray, keys_values: np.ndarray) -> np.ndarray:
    return block.forward(queries, keys_values)[0]


class TransformerBlock(Module):
    """Pre-norm self-attention block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 2,
                 act: str = "silu", norm: bool = True) -> None:
        super().__init__()
        # norm=False swaps the layer norms for identities (used by linear test modes)
        self.ln1 = self.add_child("ln1", LayerNorm(d) if norm else Activation("identity"))
        self.attn = self.add_child("attn", MultiHeadAttention(d, n_heads, rng, out_gain=0.5))
        self.ln2 = self.add_child("ln2", LayerNorm(d) if norm else Activation("identity"))
        self.mlp = self.add_child("mlp", MLP([d, mlp_ratio * d, d], rng, act=act, final_gain=0.5))

    def forward(self, x):
        h, c1 = self.ln1.forward(x)
        a, ca = self.attn.forward(h, h)
        x = x + a
        h2, c2 = self.ln2.forward(x)
        m, cm = self.mlp.forward(h2)
        return x + m, (c1, ca, c2, cm)

    def backward(self, cache, dy):
        c1, ca, c2, cm = cache
        dx = dy + self.ln2.backward(c2, self.mlp.backward(cm, dy))
        dq, dkv = self.attn.backward(ca, dx)
        return dx + self.ln1.backward(c1, dq + dkv)


class CrossAttentionBlock(Module):
    """Queries attend to a separate key/value set, followed by an MLP."""

    def __init__(self, d_q: int, d_kv: int, n_heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 2, act: str = "silu") -> None:
        super().__init__()
        self.ln_q = self.add_child("ln_q", LayerNorm(d_q))
        self.ln_kv = self.add_child("ln_kv", LayerNorm(d_kv))
        self.attn = self.add_child("attn", MultiHeadAttention(d_q, n_heads, rng, d_kv=d_kv))
        self.ln2 = self.add_child("ln2", LayerNorm(d_q))
        self.mlp = self.add_child("mlp", MLP([d_q, mlp_ratio * d_q, d_q], rng, act=act, final_gain=0.5))

    def forward(self, xq, xkv):
        hq, cq = self.ln_q.forward(xq)
        hkv, ckv = self.ln_kv.forward(xkv)
        a, ca = self.attn.forward(hq, hkv)
        x = xq + a
        h2, c2 = self.ln2.forward(x)
        m, cm = self.mlp.forward(h2)
        return x + m, (cq, ckv, ca, c2, cm)

    def backward(self, cache, dy):
        cq, ckv, ca, c2, cm = cache
        dx = dy + self.ln2.backward(c2, self.mlp.backward(cm, dy))
        dhq, dhkv = self.attn.backward(ca, dx)
        return dx + self.ln_q.backward(cq, dhq), self.ln_kv.backward(ckv, dhkv)


# --- convolution (channels-last: batch, height, width, channels) -------------

class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3,
                 gain: float = 1.0) -> None:
        super().__init__()
        if kernel % 2 != 1:
            raise ConfigError("only odd kernels with same-padding are supported")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        fan_in = c_in * kernel * kernel
        self.add_param("weight", rng.normal(0.0, gain / np.sqrt(fan_in), size=(kernel, kernel, c_in, c_out)))
        self.add_param("bias", np.zeros(c_out))

    def forward(self, x):
        if x.ndim != 4 or x.shape[-1] != self.c_in:
            raise DimensionError(f"Conv2d expects (B,H,W,{self.c_in}), got {x.shape}")
        k, pad = self.kernel, self.kernel // 2
        b, h, w, _ = x.shape
        wt = self._params["weight"]
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        # one matmul per kernel tap on a shifted view; avoids materializing the k*k*c column buffer
        y = np.broadcast_to(self._params["bias"], (b, h, w, self.c_out)).copy()
        for i in range(k):
            for j in range(k):
                y += xp[:, i:i + h, j:j + w, :] @ wt[i, j]
        return y, xp

    def backward(self, cache, dy):
        xp = cache
        k, pad = self.kernel, self.kernel // 2
        b, h, w, _ = dy.shape
        wt = self._params["weight"]
        dy2 = dy.reshape(-1, self.c_out)
        if _PARAM_GRADS:
            self._grads["bias"] += dy2.sum(axis=0)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                if _PARAM_GRADS:
                    self._grads["weight"][i, j] += xp[:, i:i + h, j:j + w, :].reshape(-1, self.c_in).T @ dy2
                dxp[:, i:i + h, j:j + w, :] += dy @ wt[i, j].T
        return dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp


class Upsample2x(Module):
    """Nearest-neighbour doubling of both spatial axes."""

    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2), None

    def backward(self, cache, dy):
        b, h, w, c = dy.shape
        return dy.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, act: str = "silu") -> None:
        super().__init__()
        self.act1 = self.add_child("act1", Activation(act))
        self.conv1 = self.add_child("conv1", Conv2d(c_in, c_out, rng))
        self.act2 = self.add_child("act2", Activation(act))
        self.conv2 = self.add_child("conv2", Conv2d(c_out, c_out, rng, gain=0.5))
        self.skip = self.add_child("skip", Conv2d(c_in, c_out, rng, kernel=1)) if c_in != c_out else None

    def forward(self, x):
        h, ca1 = self.act1.forward(x)
        h, cc1 = self.conv1.forward(h)
        h, ca2 = self.act2.forward(h)
        h, cc2 = self.conv2.forward(h)
        if self.skip is None:
            return x + h, (ca1, cc1, ca2, cc2, None)
        s, cs = self.skip.forward(x)
        return s + h, (ca1, cc1, ca2, cc2, cs)

    def backward(self, cache, dy):
        ca1, cc1, ca2, cc2, cs = cache
        dh = self.conv2.backward(cc2, dy)
        dh = self.act2.backward(ca2, dh)
        dh = self.conv1.backward(cc1, dh)
        dx = self.act1.backward(ca1, dh)
        return dx + (dy if self.skip is None else self.skip.backward(cs, dy))


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb
