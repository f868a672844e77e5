"""Pure NumPy implementations of the hot kernels.

Reference backend: every function here has a signature-identical compiled
twin in `_ckernels.pyx`. Keep the math in sync — the compiled module is
selected at import time and the test suite runs both.
"""

import numpy as np

GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
GELU_C1 = 0.044715


def gelu_fwd(x):
    """Tanh-approximation GELU: 0.5*x*(1 + tanh(c0*(x + c1*x^3)))."""
    t = np.tanh(GELU_C0 * (x + GELU_C1 * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_bwd(x, dy):
    """d/dx of tanh-approximation GELU, times upstream dy."""
    t = np.tanh(GELU_C0 * (x + GELU_C1 * x * x * x))
    du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layernorm_fwd(x, gain, bias, eps):
    """Row-wise layernorm over the last axis of a 2-D array.

    Returns (y, xhat, rstd); xhat and rstd are cached for the backward pass.
    """
    mu = x.mean(axis=1, keepdims=True)
    var = np.square(x - mu).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_bwd(dy, xhat, rstd, gain):
    """Backward of layernorm_fwd. Returns (dx, dgain, dbias)."""
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def softmax_causal_fwd(scores):
    """In-place causal softmax over the last axis of (rows, T, T) scores.

    Row i of each (T, T) slice is normalized over positions 0..i; entries
    above the diagonal come out exactly zero.
    """
    T = scores.shape[-1]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores[:, mask] = -np.inf
    m = scores.max(axis=-1, keepdims=True)
    np.exp(scores - m, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def softmax_causal_bwd(weights, dweights):
    """Backward of causal softmax: dscores from cached weights."""
    inner = (weights * dweights).sum(axis=-1, keepdims=True)
    return weights * (dweights - inner)


def _bmm(a, b, out, transpose_b=False):
    """Loop of 2-D GEMMs over the leading axis; faster here than np.matmul."""
    for r in range(a.shape[0]):
        np.matmul(a[r], b[r].T if transpose_b else b[r], out=out[r])
    return out


def attention_causal_fwd(q, k, v):
    """Causal attention over (R, T, hd) heads; q comes in pre-scaled.

    Returns (ctx, weights): ctx = weights @ v with weights the causal
    softmax of q @ k^T (exact zeros above the diagonal).
    """
    R, T, _ = q.shape
    scores = np.empty((R, T, T), dtype=q.dtype)
    weights = softmax_causal_fwd(_bmm(q, k, scores, transpose_b=True))
    ctx = _bmm(weights, v, np.empty_like(q))
    return ctx, weights


def attention_causal_bwd(q, k, v, weights, dctx):
    """Backward of attention_causal_fwd. Returns (dq, dk, dv); dq is the
    gradient w.r.t. the pre-scaled q that was passed to the forward."""
    dw = _bmm(dctx, v, np.empty_like(weights), transpose_b=True)
    ds = softmax_causal_bwd(weights, dw)
    dq = _bmm(ds, k, np.empty_like(q))
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    for r in range(q.shape[0]):
        np.matmul(ds[r].T, q[r], out=dk[r])
        np.matmul(weights[r].T, dctx[r], out=dv[r])
    return dq, dk, dv


def cross_entropy_fwd(logits, targets):
    """Mean negative log-likelihood over rows of (N, V) logits.

    Returns (mean_loss, probs); probs is cached for the backward pass.
    """
    m = logits.max(axis=1, keepdims=True)
    z = np.exp(logits - m)
    s = z.sum(axis=1, keepdims=True)
    probs = z / s
    n = np.arange(logits.shape[0])
    losses = np.log(s[:, 0]) + m[:, 0] - logits[n, targets]
    return float(losses.mean()), probs


def cross_entropy_bwd(probs, targets):
    """dlogits = (softmax - onehot) / N for the mean loss."""
    d = probs.copy()
    n = np.arange(probs.shape[0])
    d[n, targets] -= 1.0
    d /= probs.shape[0]
    return d


def adamw_update(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    """One decoupled-weight-decay Adam step on flat views, in place.

    Decay is applied directly to the weights (not through the moments);
    bias correction uses the per-group step count t (1-based).
    """
    p *= 1.0 - lr * wd
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    p -= (lr / bc1) * m / (np.sqrt(v) / np.sqrt(bc2) + eps)


def scatter_add_rows(table, idx, src):
    """table[idx[n], :] += src[n, :] with repeated indices accumulated."""
    np.add.at(table, idx, src)
