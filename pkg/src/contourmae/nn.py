"""Minimal float64 transformer layers with hand-written backward passes.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by dotted names
("enc.0.attn.Wqkv", ...). Forward functions return a cache consumed by the
matching backward function, which accumulates into a gradient dict with the
same keys. Gradients are checked against central finite differences in the
test suite, so keep forward and backward in exact correspondence.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


# ---------------------------------------------------------------------------
# Primitive layers
# ---------------------------------------------------------------------------

def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(dy, cache, grads, wname, bname):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads[wname] = grads.get(wname, 0.0) + x2.T @ dy2
    grads[bname] = grads.get(bname, 0.0) + dy2.sum(axis=0)
    return dy @ w.T


def layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def layernorm_backward(dy, cache, grads, gname, bname):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    grads[gname] = grads.get(gname, 0.0) + (dy * xhat).sum(axis=axes)
    grads[bname] = grads.get(bname, 0.0) + dy.sum(axis=axes)
    dxhat = dy * g
    mean_d = dxhat.mean(axis=-1, keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - mean_d - xhat * mean_dx)


def gelu_forward(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy, s):
    return (dy - (dy * s).sum(axis=-1, keepdims=True)) * s


# ---------------------------------------------------------------------------
# Multi-head self-attention
# ---------------------------------------------------------------------------

def attention_forward(params, prefix, x, num_heads):
    b, t, d = x.shape
    dh = d // num_heads
    qkv, c_in = linear_forward(x, params[f"{prefix}.Wqkv"], params[f"{prefix}.bqkv"])
    qkv = qkv.reshape(b, t, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # each (B, h, T, dh)
    scale = 1.0 / np.sqrt(dh)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    attn = softmax(scores)
    ctx = attn @ v                       # (B, h, T, dh)
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
    y, c_out = linear_forward(merged, params[f"{prefix}.Wo"], params[f"{prefix}.bo"])
    return y, (c_in, c_out, q, k, v, attn, scale, num_heads)


def attention_backward(dy, cache, params, prefix, grads):
    c_in, c_out, q, k, v, attn, scale, num_heads = cache
    b, h, t, dh = q.shape
    d = h * dh
    dmerged = linear_backward(dy, c_out, grads, f"{prefix}.Wo", f"{prefix}.bo")
    dctx = dmerged.reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = softmax_backward(dattn, attn)
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
    dqkv = np.stack([dq, dk, dv], axis=0)          # (3, B, h, T, dh)
    dqkv = dqkv.transpose(1, 3, 0, 2, 4).reshape(b, t, 3 * d)
    return linear_backward(dqkv, c_in, grads, f"{prefix}.Wqkv", f"{prefix}.bqkv")


# ---------------------------------------------------------------------------
# Transformer blocks and stacks (pre-LN, residual)
# ---------------------------------------------------------------------------

def block_forward(params, prefix, x, num_heads):
    h1, c_ln1 = layernorm_forward(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    a, c_att = attention_forward(params, f"{prefix}.attn", h1, num_heads)
    x1 = x + a
    h2, c_ln2 = layernorm_forward(x1, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    u, c_fc1 = linear_forward(h2, params[f"{prefix}.mlp.W1"], params[f"{prefix}.mlp.b1"])
    g, c_act = gelu_forward(u)
    o, c_fc2 = linear_forward(g, params[f"{prefix}.mlp.W2"], params[f"{prefix}.mlp.b2"])
    return x1 + o, (c_ln1, c_att, c_ln2, c_fc1, c_act, c_fc2)


def block_backward(dy, cache, params, prefix, grads):
    c_ln1, c_att, c_ln2, c_fc1, c_act, c_fc2 = cache
    dg = linear_backward(dy, c_fc2, grads, f"{prefix}.mlp.W2", f"{prefix}.mlp.b2")
    du = gelu_backward(dg, c_act)
    dh2 = linear_backward(du, c_fc1, grads, f"{prefix}.mlp.W1", f"{prefix}.mlp.b1")
    dx1 = dy + layernorm_backward(dh2, c_ln2, grads, f"{prefix}.ln2.g", f"{prefix}.ln2.b")
    da = attention_backward(dx1, c_att, params, f"{prefix}.attn", grads)
    return dx1 + layernorm_backward(da, c_ln1, grads, f"{prefix}.ln1.g", f"{prefix}.ln1.b")


def stack_forward(params, prefix, depth, x, num_heads):
    """Blocks ``prefix.0 .. prefix.{depth-1}`` followed by ``prefix.norm``."""
    caches = []
    for i in range(depth):
        x, c = block_forward(params, f"{prefix}.{i}", x, num_heads)
        caches.append(c)
    y, c_norm = layernorm_forward(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    caches.append(c_norm)
    return y, caches


def stack_backward(dy, caches, params, prefix, depth, grads):
    dx = layernorm_backward(dy, caches[-1], grads, f"{prefix}.norm.g", f"{prefix}.norm.b")
    for i in range(depth - 1, -1, -1):
        dx = block_backward(dx, caches[i], params, f"{prefix}.{i}", grads)
    return dx


def init_stack_params(params, prefix, depth, dim, mlp_dim, rng, std=0.02):
    for i in range(depth):
        p = f"{prefix}.{i}"
        params[f"{p}.ln1.g"] = np.ones(dim)
        params[f"{p}.ln1.b"] = np.zeros(dim)
        params[f"{p}.attn.Wqkv"] = rng.normal(0.0, std, (dim, 3 * dim))
        params[f"{p}.attn.bqkv"] = np.zeros(3 * dim)
        params[f"{p}.attn.Wo"] = rng.normal(0.0, std, (dim, dim))
        params[f"{p}.attn.bo"] = np.zeros(dim)
        params[f"{p}.ln2.g"] = np.ones(dim)
        params[f"{p}.ln2.b"] = np.zeros(dim)
        params[f"{p}.mlp.W1"] = rng.normal(0.0, std, (dim, mlp_dim))
        params[f"{p}.mlp.b1"] = np.zeros(mlp_dim)
        params[f"{p}.mlp.W2"] = rng.normal(0.0, std, (mlp_dim, dim))
        params[f"{p}.mlp.b2"] = np.zeros(dim)
    params[f"{prefix}.norm.g"] = np.ones(dim)
    params[f"{prefix}.norm.b"] = np.zeros(dim)


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------

def sincos_position_table(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2-D sin/cos table, one row per grid cell in row-major order.

    Half the channels encode the row coordinate, half the column; ``dim``
    must be divisible by 4 so each axis gets sin/cos pairs.
    """
    if dim % 4 != 0:
        raise ValueError(f"position encoding dim must be divisible by 4, got {dim}")
    half = dim // 2

    def axis_table(positions):
        omega = 1.0 / (10000.0 ** (np.arange(half // 2) / (half / 2.0)))
        angles = np.outer(positions, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    rows = np.repeat(np.arange(grid_h), grid_w)
    cols = np.tile(np.arange(grid_w), grid_h)
    return np.concatenate([axis_table(rows), axis_table(cols)], axis=1)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; iteration order is key-sorted."""

    def __init__(self, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[name] -= self.lr * (update + self.weight_decay * params[name])

    def state_arrays(self) -> dict:
        out = {}
        for name, arr in self.m.items():
            out[f"opt.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"opt.v.{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        self.t = t
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self.m[key[len("opt.m.") :]] = arr.copy()
            elif key.startswith("opt.v."):
                self.v[key[len("opt.v.") :]] = arr.copy()
