"""Dense forward/backward primitives for a decoder-only transformer.

No autodiff: every op has an explicit backward companion that consumes the
context object returned by the forward. Matrix products go through BLAS;
elementwise/rowwise work goes through the selected kernel backend.

Finite-value checking: float64 arrays are the verification mode and are
always checked on entry; float32 arrays are checked only when strict mode
is enabled (`set_strict_checks(True)` or INCGPT_STRICT_CHECKS=1).
"""

import contextlib
import math
import os
from dataclasses import dataclass

import numpy as np

from incgpt import kernels
from incgpt.errors import DataError, DimensionError, NumericError

_strict_checks = os.environ.get("INCGPT_STRICT_CHECKS", "") == "1"


def _make_blas_limiter():
    """Context holding BLAS to one thread inside the compiled attention
    kernels (they parallelize with OpenMP themselves; nested BLAS threading
    on the small per-head GEMMs collapses throughput)."""
    if kernels.BACKEND != "compiled":
        return contextlib.nullcontext
    try:
        from threadpoolctl import ThreadpoolController
        controller = ThreadpoolController()
        return lambda: controller.limit(limits=1, user_api="blas")
    except ImportError:
        return contextlib.nullcontext


_blas_single = _make_blas_limiter()


def set_strict_checks(on):
    """Force finite-value checks on float32 arrays too."""
    global _strict_checks
    _strict_checks = bool(on)


def _check_finite(name, *arrays):
    for a in arrays:
        if a.dtype == np.float64 or _strict_checks:
            if not np.isfinite(a).all():
                raise NumericError(f"non-finite values in {name}")


def _flat2d(x):
    """View (..., D) as (N, D)."""
    return x.reshape(-1, x.shape[-1])


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def linear(x, w, b):
    """y = x @ w + b for x (..., Din), w (Din, Dout), b (Dout,)."""
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(
            f"linear: x {x.shape} w {w.shape} b {b.shape} do not chain"
        )
    _check_finite("linear input", x, w, b)
    y = _flat2d(x) @ w
    y += b
    return y.reshape(x.shape[:-1] + (w.shape[1],))


def linear_backward(dy, x, w):
    """Gradients of linear: returns (dx, dw, db)."""
    dy2 = _flat2d(dy)
    x2 = _flat2d(x)
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy2 @ w.T
    return dx.reshape(x.shape), dw, db


# ---------------------------------------------------------------------------
# layernorm
# ---------------------------------------------------------------------------


@dataclass
class LayerNormCtx:
    xhat: np.ndarray  # (N, D)
    rstd: np.ndarray  # (N,)
    shape: tuple


def layernorm(x, gain, bias, eps=1e-5):
    """Row-wise layernorm over the last axis. Returns (y, ctx)."""
    if x.shape[-1] == 0:
        raise DimensionError("layernorm: zero-length feature dimension")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError("layernorm: gain/bias must match feature dim")
    if eps <= 0:
        raise ValueError("layernorm: eps must be > 0")
    _check_finite("layernorm input", x, gain, bias)
    x2 = _flat2d(x)
    y, xhat, rstd = kernels.layernorm_fwd(x2, gain, bias, eps)
    return y.reshape(x.shape), LayerNormCtx(xhat, rstd, x.shape)


def layernorm_backward(ctx, dy, gain):
    """Backward of layernorm. Returns (dx, dgain, dbias)."""
    dx, dgain, dbias = kernels.layernorm_bwd(_flat2d(dy), ctx.xhat, ctx.rstd, gain)
    return dx.reshape(ctx.shape), dgain, dbias


# ---------------------------------------------------------------------------
# gelu
# ---------------------------------------------------------------------------


def gelu(x):
    """Tanh-approximation GELU. Returns (y, ctx); ctx is just x."""
    _check_finite("gelu input", x)
    return kernels.gelu_fwd(x), x


def gelu_backward(ctx, dy):
    return kernels.gelu_bwd(ctx, dy)


# ---------------------------------------------------------------------------
# causal self-attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionCtx:
    x: np.ndarray        # (B, T, D) block input
    q: np.ndarray        # (B*H, T, hd), already scaled by 1/sqrt(hd)
    k: np.ndarray        # (B*H, T, hd)
    v: np.ndarray        # (B*H, T, hd)
    weights: np.ndarray  # (B*H, T, T) causal attention weights
    merged: np.ndarray   # (B, T, D) heads merged, pre output projection
    n_heads: int


def _split_heads(u, B, T, H, hd):
    """(B, T, D) -> contiguous (B*H, T, hd)."""
    return np.ascontiguousarray(
        u.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
    ).reshape(B * H, T, hd)


def _merge_heads(u, B, T, H, hd):
    """(B*H, T, hd) -> (B, T, D)."""
    return np.ascontiguousarray(
        u.reshape(B, H, T, hd).transpose(0, 2, 1, 3)
    ).reshape(B, T, H * hd)


def causal_self_attention(x, w_qkv, b_qkv, w_out, b_out, n_heads):
    """Multi-head causal self-attention with fused QKV projection.

    Returns (y, ctx). Attention weights are an exact probability
    distribution over positions <= each query position.
    """
    B, T, D = x.shape
    if D % n_heads != 0:
        raise DimensionError(f"attention: d_model {D} not divisible by {n_heads} heads")
    hd = D // n_heads
    u = linear(x, w_qkv, b_qkv)
    q = _split_heads(u[..., :D], B, T, n_heads, hd)
    k = _split_heads(u[..., D:2 * D], B, T, n_heads, hd)
    v = _split_heads(u[..., 2 * D:], B, T, n_heads, hd)
    q *= np.asarray(1.0 / math.sqrt(hd), dtype=x.dtype)

    with _blas_single():
        heads, weights = kernels.attention_causal_fwd(q, k, v)
    merged = _merge_heads(heads, B, T, n_heads, hd)
    y = linear(merged, w_out, b_out)
    return y, AttentionCtx(x, q, k, v, weights, merged, n_heads)


def causal_self_attention_backward(ctx, dy, w_qkv, w_out):
    """Backward of causal self-attention.

    Returns (dx, dw_qkv, db_qkv, dw_out, db_out).
    """
    B, T, D = ctx.x.shape
    H = ctx.n_heads
    hd = D // H

    d_merged, dw_out, db_out = linear_backward(dy, ctx.merged, w_out)
    d_heads = _split_heads(d_merged, B, T, H, hd)

    with _blas_single():
        dq, dk, dv = kernels.attention_causal_bwd(ctx.q, ctx.k, ctx.v,
                                                  ctx.weights, d_heads)
    # q in ctx already carries the 1/sqrt(hd) factor, so dq needs it too
    dq *= np.asarray(1.0 / math.sqrt(hd), dtype=dq.dtype)

    du = np.concatenate(
        [
            _merge_heads(dq, B, T, H, hd),
            _merge_heads(dk, B, T, H, hd),
            _merge_heads(dv, B, T, H, hd),
        ],
        axis=-1,
    )
    dx, dw_qkv, db_qkv = linear_backward(du, ctx.x, w_qkv)
    return dx, dw_qkv, db_qkv, dw_out, db_out


# ---------------------------------------------------------------------------
# cross entropy on logits
# ---------------------------------------------------------------------------


@dataclass
class CrossEntropyCtx:
    probs: np.ndarray    # (N, V)
    targets: np.ndarray  # (N,)
    shape: tuple


def cross_entropy_logits(logits, targets):
    """Mean next-token log loss over all positions of (B, T, V) logits.

    Returns (loss, ctx). `targets` must lie in [0, V).
    """
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    t = targets.reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= V):
        raise DataError(f"cross_entropy: target ids outside [0, {V})")
    _check_finite("cross_entropy input", logits)
    loss, probs = kernels.cross_entropy_fwd(_flat2d(logits), t)
    return loss, CrossEntropyCtx(probs, t, logits.shape)


def cross_entropy_logits_backward(ctx):
    """dlogits = (softmax - onehot) / (number of positions)."""
    d = kernels.cross_entropy_bwd(ctx.probs, ctx.targets)
    return d.reshape(ctx.shape)
