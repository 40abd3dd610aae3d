"""Independent float64 reference implementations written with numpy and plain loops.

Nothing here imports the package; weights are pulled out of torch modules
as numpy arrays and every computation is redone from the definitions.
"""

from __future__ import annotations

import math

import numpy as np
import torch


def arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().double().numpy().copy() for k, v in module.state_dict().items()}


def sub(params: dict, prefix: str) -> dict:
    prefix = prefix + "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def linear(x, p):
    return x @ p["weight"].T + p["bias"]


def layernorm(x, p, eps=1e-5):
    out = np.empty_like(x)
    for idx in np.ndindex(*x.shape[:-1]):
        v = x[idx]
        mu = sum(v) / len(v)
        var = sum((a - mu) ** 2 for a in v) / len(v)
        out[idx] = (v - mu) / math.sqrt(var + eps) * p["weight"] + p["bias"]
    return out


def gelu(x):
    return np.vectorize(lambda a: 0.5 * a * (1.0 + math.erf(a / math.sqrt(2.0))))(x)


def softmax_row(scores):
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    z = sum(e)
    return [a / z for a in e]


def attention(x, context, p, heads):
    """x (n, d), context (m, d_kv) -> output (n, d), weights (heads, n, m); explicit loops."""
    q, k, v = linear(x, sub(p, "wq")), linear(context, sub(p, "wk")), linear(context, sub(p, "wv"))
    n, d = q.shape
    m = k.shape[0]
    dh = d // heads
    out = np.zeros((n, d))
    weights = np.zeros((heads, n, m))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = [sum(q[i, cols][t] * k[j, cols][t] for t in range(dh)) / math.sqrt(dh) for j in range(m)]
            w = softmax_row(scores)
            weights[h, i] = w
            for j in range(m):
                out[i, cols] += w[j] * v[j, cols]
    return linear(out, sub(p, "wo")), weights


def ffn(x, p):
    return linear(gelu(linear(x, sub(p, "fc1"))), sub(p, "fc2"))


def block(x, p, heads):
    """Pre-norm block on one sequence x (n, d)."""
    n = layernorm(x, sub(p, "ln1"))
    a, w = attention(n, n, sub(p, "msa"), heads)
    o = x + a
    return o + ffn(layernorm(o, sub(p, "ln2")), sub(p, "ffn")), w


def cross_stream(token, pair, p, heads):
    """One mca stream: token (1, d) queries both tokens pair (2, d)."""
    a, w = attention(layernorm(token, sub(p, "ln1")), layernorm(pair, sub(p, "ln1")), sub(p, "mca"), heads)
    o = token + a
    return o + ffn(layernorm(o, sub(p, "ln2")), sub(p, "ffn")), w


def mca_block(x, p, heads):
    xm, wm = cross_stream(x[:1], x, sub(p, "stream_m"), heads)
    xv, wv = cross_stream(x[1:], x, sub(p, "stream_v"), heads)
    return np.concatenate([xm, xv]), np.concatenate([wm, wv], axis=1)


def mixer_block(x, p):
    n = layernorm(x, sub(p, "token_norm"))
    W, b = p["token_mix.weight"], p["token_mix.bias"]
    mixed = np.zeros_like(x)
    for i in range(x.shape[0]):
        for c in range(x.shape[1]):
            mixed[i, c] = sum(W[i, j] * n[j, c] for j in range(x.shape[0])) + b[i]
    y = x + mixed
    return y + ffn(layernorm(y, sub(p, "channel_norm")), sub(p, "ffn"))


def cross_block(x, context, p, heads):
    """Cross-attention baseline block: visual tokens x (n, d) query context (m, d_kv)."""
    a, w = attention(layernorm(x, sub(p, "ln_q")), layernorm(context, sub(p, "ln_kv")), sub(p, "attn"), heads)
    o = x + a
    return o + ffn(layernorm(o, sub(p, "ln2")), sub(p, "ffn")), w


def patches(image, p):
    """(H, W, ch) -> (n, p*p*ch): patches row-major, pixels (row, col, ch) inside a patch."""
    H, W, ch = image.shape
    out = []
    for r in range(0, H, p):
        for c in range(0, W, p):
            vec = []
            for i in range(p):
                for j in range(p):
                    for k in range(ch):
                        vec.append(image[r + i, c + j, k])
            out.append(vec)
    return np.array(out)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max()
    return z - m - math.log(sum(math.exp(a - m) for a in z))


def ce(z, y):
    return -log_softmax(z)[y]


def kl(p_logits, q_logits):
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    return sum(math.exp(a) * (a - b) for a, b in zip(lp, lq))
