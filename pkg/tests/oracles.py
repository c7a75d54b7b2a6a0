"""Slow, loop-based reference implementations used as independent oracles.

Only numpy scalars/vectors and the math module are used here; nothing from
the tape engine.
"""

import math

import numpy as np


def softmax_vec(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def layer_norm_vec(x, gain, bias, eps=1e-5):
    n = len(x)
    mu = sum(x) / n
    var = sum((xi - mu) ** 2 for xi in x) / n
    return np.array([(x[i] - mu) / math.sqrt(var + eps) * gain[i] + bias[i] for i in range(n)])


def gelu_scalar(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def linear_vec(x, w, b):
    d_in, d_out = w.shape
    return np.array([sum(x[i] * w[i, j] for i in range(d_in)) + b[j] for j in range(d_out)])


def single_head_attention(xq, xkv, sd, prefix):
    """Rows of xq attend over rows of xkv; weights from state dict ``sd``."""
    w = lambda n: (sd[f"{prefix}.{n}.weight"], sd[f"{prefix}.{n}.bias"])  # noqa: E731
    d = xq.shape[1]
    qs = [linear_vec(x, *w("q")) for x in xq]
    ks = [linear_vec(x, *w("k")) for x in xkv]
    vs = [linear_vec(x, *w("v")) for x in xkv]
    out = []
    for q in qs:
        scores = [float(np.dot(q, k)) / math.sqrt(d) for k in ks]
        p = softmax_vec(scores)
        ctx = sum(p[j] * vs[j] for j in range(len(vs)))
        out.append(linear_vec(ctx, *w("o")))
    return np.array(out)


def ln_rows(x, sd, prefix):
    return np.array([layer_norm_vec(r, sd[f"{prefix}.gain"], sd[f"{prefix}.bias"]) for r in x])


def generate_experts(tokens, sd, d_s, d_t):
    q = sd["generator.queries"].astype(np.float64)
    q = q + single_head_attention(ln_rows(q, sd, "generator.norm_sa"), ln_rows(q, sd, "generator.norm_sa"),
                                  sd, "generator.self_attn")
    q = q + single_head_attention(ln_rows(q, sd, "generator.norm_q"), ln_rows(tokens, sd, "generator.norm_kv"),
                                  sd, "generator.cross_attn")
    experts = []
    for row in ln_rows(q, sd, "generator.norm_ffn"):
        pre = linear_vec(row, sd["generator.fc1.weight"], sd["generator.fc1.bias"])
        hidden = np.array([gelu_scalar(v) for v in pre])
        flat = linear_vec(hidden, sd["generator.fc2.weight"], sd["generator.fc2.bias"])
        w = flat[: d_s * d_t].reshape(d_s, d_t) / math.sqrt(d_s)
        experts.append((w, flat[d_s * d_t:]))
    return experts


def route(tokens, sd):
    rt = sd["router.router_token"][None, :].astype(np.float64)
    pooled = rt + single_head_attention(rt, ln_rows(tokens, sd, "router.norm"), sd, "router.attn")
    logits = linear_vec(pooled[0], sd["router.head.weight"], sd["router.head.bias"])
    return softmax_vec(list(logits))


def decode(tokens, sd, d_s, d_t):
    """Per-token, per-expert loop over one image's tokens (N x D_s) -> N x D_t."""
    experts = generate_experts(tokens, sd, d_s, d_t)
    weights = route(tokens, sd)
    x = tokens + single_head_attention(tokens, tokens, sd, "self_attn")
    out = np.zeros((len(x), d_t))
    for n in range(len(x)):
        for e, (w, b) in enumerate(experts):
            y = np.array([sum(x[n, i] * w[i, j] for i in range(d_s)) + b[j] for j in range(d_t)])
            out[n] += weights[e] * y
    return out, experts, weights


def relation(patches, temperature_dim):
    n = len(patches)
    out = np.zeros((n, n))
    for i in range(n):
        scores = [float(np.dot(patches[i], patches[j])) / math.sqrt(temperature_dim) for j in range(n)]
        out[i] = softmax_vec(scores)
    return out


def kl_rows(t, s, clamp=1e-8):
    total = 0.0
    for i in range(len(t)):
        row = 0.0
        for j in range(len(t[i])):
            if t[i][j] > 0:
                row += t[i][j] * math.log(t[i][j] / max(s[i][j], clamp))
        total += row
    return total / len(t)


def adamw_trajectory(p0, grad_fn, steps, lr, b1, b2, wd, eps):
    """Scalar AdamW via explicit moment recursion."""
    p, m, v = p0, 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(p)
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out
