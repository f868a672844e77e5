# Compiled twins of _pykernels.py. Same signatures, same math.
#
# Parallelism notes: prange is used only where iterations write disjoint
# rows/elements and there is no cross-iteration reduction, so results are
# bit-identical for any thread count. Reductions (cross-entropy loss,
# layernorm gain/bias sums, scatter-add) stay sequential.

import numpy as np

from cython cimport floating
from cython.parallel cimport prange
from libc.math cimport exp, expf, log, sqrt, tanh, tanhf
from scipy.linalg.cython_blas cimport dgemm, sgemm

cdef double GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_C1 = 0.044715

# query rows per attention GEMM chunk; keys run only up to the chunk's last
# row, which is where the causal flop savings come from
cdef int ATT_CHUNK = 64


def _gelu_fwd_flat(floating[::1] x, floating[::1] y):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef floating xi, u, t
    for i in prange(n, nogil=True, schedule="static"):
        xi = x[i]
        u = <floating>GELU_C0 * (xi + <floating>GELU_C1 * xi * xi * xi)
        if floating is float:
            t = tanhf(u)
        else:
            t = tanh(u)
        y[i] = <floating>0.5 * xi * (<floating>1.0 + t)


def gelu_fwd(x):
    """Tanh-approximation GELU: 0.5*x*(1 + tanh(c0*(x + c1*x^3)))."""
    y = np.empty_like(x)
    _gelu_fwd_flat(x.reshape(-1), y.reshape(-1))
    return y


def _gelu_bwd_flat(floating[::1] x, floating[::1] dy, floating[::1] dx):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef floating xi, u, t, du
    for i in prange(n, nogil=True, schedule="static"):
        xi = x[i]
        u = <floating>GELU_C0 * (xi + <floating>GELU_C1 * xi * xi * xi)
        if floating is float:
            t = tanhf(u)
        else:
            t = tanh(u)
        du = <floating>GELU_C0 * (<floating>1.0 + <floating>(3.0 * GELU_C1) * xi * xi)
        dx[i] = dy[i] * (<floating>0.5 * (<floating>1.0 + t)
                         + <floating>0.5 * xi * (<floating>1.0 - t * t) * du)


def gelu_bwd(x, dy):
    """d/dx of tanh-approximation GELU, times upstream dy."""
    dx = np.empty_like(x)
    _gelu_bwd_flat(x.reshape(-1), dy.reshape(-1), dx.reshape(-1))
    return dx


def _layernorm_fwd_impl(floating[:, ::1] x, floating[::1] gain, floating[::1] bias,
                        double eps, floating[:, ::1] y, floating[:, ::1] xhat,
                        floating[::1] rstd):
    cdef Py_ssize_t n, j, N = x.shape[0], D = x.shape[1]
    cdef double mu, var, d, rs
    cdef floating xh
    for n in prange(N, nogil=True, schedule="static"):
        mu = 0.0
        for j in range(D):
            mu = mu + x[n, j]
        mu = mu / D
        var = 0.0
        for j in range(D):
            d = x[n, j] - mu
            var = var + d * d
        var = var / D
        rs = 1.0 / sqrt(var + eps)
        rstd[n] = <floating>rs
        for j in range(D):
            xh = <floating>((x[n, j] - mu) * rs)
            xhat[n, j] = xh
            y[n, j] = xh * gain[j] + bias[j]


def layernorm_fwd(x, gain, bias, eps):
    """Row-wise layernorm over the last axis of a 2-D array.

    Returns (y, xhat, rstd); xhat and rstd are cached for the backward pass.
    """
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _layernorm_fwd_impl(x, gain, bias, eps, y, xhat, rstd)
    return y, xhat, rstd


def _layernorm_bwd_impl(floating[:, ::1] dy, floating[:, ::1] xhat, floating[::1] rstd,
                        floating[::1] gain, floating[:, ::1] dx,
                        double[::1] dgain, double[::1] dbias):
    cdef Py_ssize_t n, j, N = dy.shape[0], D = dy.shape[1]
    cdef double s1, s2, dxh
    for n in prange(N, nogil=True, schedule="static"):
        s1 = 0.0
        s2 = 0.0
        for j in range(D):
            dxh = dy[n, j] * gain[j]
            s1 = s1 + dxh
            s2 = s2 + dxh * xhat[n, j]
        s1 = s1 / D
        s2 = s2 / D
        for j in range(D):
            dxh = dy[n, j] * gain[j]
            dx[n, j] = <floating>((dxh - s1 - xhat[n, j] * s2) * rstd[n])
    # gain/bias sums reduce across rows: keep a fixed order
    with nogil:
        for n in range(N):
            for j in range(D):
                dgain[j] += dy[n, j] * xhat[n, j]
                dbias[j] += dy[n, j]


def layernorm_bwd(dy, xhat, rstd, gain):
    """Backward of layernorm_fwd. Returns (dx, dgain, dbias)."""
    dx = np.empty_like(dy)
    dgain = np.zeros(dy.shape[1], dtype=np.float64)
    dbias = np.zeros(dy.shape[1], dtype=np.float64)
    _layernorm_bwd_impl(dy, xhat, rstd, gain, dx, dgain, dbias)
    return dx, dgain.astype(dy.dtype), dbias.astype(dy.dtype)


cdef void _softmax_causal_rows(floating[:, :, ::1] w, Py_ssize_t r,
                               Py_ssize_t i0, Py_ssize_t i1) noexcept nogil:
    """Causal softmax of rows [i0, i1) of slice r, zeroing past each row's
    position (entries beyond the written key range included)."""
    cdef Py_ssize_t i, j, T = w.shape[1]
    cdef double m, z, inv
    cdef floating e
    for i in range(i0, i1):
        m = w[r, i, 0]
        for j in range(1, i + 1):
            if w[r, i, j] > m:
                m = w[r, i, j]
        z = 0.0
        for j in range(i + 1):
            if floating is float:
                e = expf(w[r, i, j] - <float>m)
            else:
                e = exp(w[r, i, j] - m)
            w[r, i, j] = e
            z += e
        inv = 1.0 / z
        for j in range(i + 1):
            w[r, i, j] = <floating>(w[r, i, j] * inv)
        for j in range(i + 1, T):
            w[r, i, j] = <floating>0.0


def _softmax_causal_fwd_impl(floating[:, :, ::1] scores):
    cdef Py_ssize_t r, R = scores.shape[0], T = scores.shape[1]
    for r in prange(R, nogil=True, schedule="static"):
        _softmax_causal_rows(scores, r, 0, T)


def softmax_causal_fwd(scores):
    """In-place causal softmax over the last axis of (rows, T, T) scores.

    Row i of each (T, T) slice is normalized over positions 0..i; entries
    above the diagonal come out exactly zero.
    """
    _softmax_causal_fwd_impl(scores)
    return scores


cdef void _softmax_causal_bwd_rows(floating[:, :, ::1] w, floating[:, :, ::1] ds,
                                   Py_ssize_t r, Py_ssize_t i0,
                                   Py_ssize_t i1) noexcept nogil:
    """In place: ds rows hold dL/dweights on entry, dL/dscores on exit."""
    cdef Py_ssize_t i, j, T = w.shape[1]
    cdef double inner
    for i in range(i0, i1):
        inner = 0.0
        for j in range(i + 1):
            inner += w[r, i, j] * ds[r, i, j]
        for j in range(i + 1):
            ds[r, i, j] = <floating>(w[r, i, j] * (ds[r, i, j] - inner))
        for j in range(i + 1, T):
            ds[r, i, j] = <floating>0.0


def _softmax_causal_bwd_impl(floating[:, :, ::1] w, floating[:, :, ::1] ds):
    cdef Py_ssize_t r, R = w.shape[0], T = w.shape[1]
    for r in prange(R, nogil=True, schedule="static"):
        _softmax_causal_bwd_rows(w, ds, r, 0, T)


def softmax_causal_bwd(weights, dweights):
    """Backward of causal softmax: dscores from cached weights."""
    ds = dweights.copy()
    _softmax_causal_bwd_impl(weights, ds)
    return ds


# ---------------------------------------------------------------------------
# fused causal attention core: chunked BLAS GEMMs + in-loop softmax
# ---------------------------------------------------------------------------


cdef inline void _gemm_nt(floating* a, floating* b, floating* c,
                          int m, int n, int k, int lda, int ldb, int ldc,
                          floating beta) noexcept nogil:
    """Row-major C(m,n) += A(m,k) @ B(n,k)^T (beta scales existing C)."""
    cdef float onef = 1.0
    cdef double oned = 1.0
    cdef float betaf
    cdef double betad
    if floating is float:
        betaf = beta
        sgemm("T", "N", &n, &m, &k, &onef, <float*>b, &ldb, <float*>a, &lda,
              &betaf, <float*>c, &ldc)
    else:
        betad = beta
        dgemm("T", "N", &n, &m, &k, &oned, <double*>b, &ldb, <double*>a, &lda,
              &betad, <double*>c, &ldc)


cdef inline void _gemm_nn(floating* a, floating* b, floating* c,
                          int m, int n, int k, int lda, int ldb, int ldc,
                          floating beta) noexcept nogil:
    """Row-major C(m,n) += A(m,k) @ B(k,n)."""
    cdef float onef = 1.0
    cdef double oned = 1.0
    cdef float betaf
    cdef double betad
    if floating is float:
        betaf = beta
        sgemm("N", "N", &n, &m, &k, &onef, <float*>b, &ldb, <float*>a, &lda,
              &betaf, <float*>c, &ldc)
    else:
        betad = beta
        dgemm("N", "N", &n, &m, &k, &oned, <double*>b, &ldb, <double*>a, &lda,
              &betad, <double*>c, &ldc)


cdef inline void _gemm_tn(floating* a, floating* b, floating* c,
                          int m, int n, int k, int lda, int ldb, int ldc,
                          floating beta) noexcept nogil:
    """Row-major C(m,n) += A(k,m)^T @ B(k,n)."""
    cdef float onef = 1.0
    cdef double oned = 1.0
    cdef float betaf
    cdef double betad
    if floating is float:
        betaf = beta
        sgemm("N", "T", &n, &m, &k, &onef, <float*>b, &ldb, <float*>a, &lda,
              &betaf, <float*>c, &ldc)
    else:
        betad = beta
        dgemm("N", "T", &n, &m, &k, &oned, <double*>b, &ldb, <double*>a, &lda,
              &betad, <double*>c, &ldc)


def _attention_fwd_impl(floating[:, :, ::1] q, floating[:, :, ::1] k,
                        floating[:, :, ::1] v, floating[:, :, ::1] w,
                        floating[:, :, ::1] ctx):
    cdef Py_ssize_t r, R = q.shape[0]
    cdef int T = <int>q.shape[1], hd = <int>q.shape[2]
    cdef int i0, i1, kl
    for r in prange(R, nogil=True, schedule="static"):
        i0 = 0
        while i0 < T:
            i1 = i0 + ATT_CHUNK
            if i1 > T:
                i1 = T
            kl = i1  # causal: queries in this chunk see keys < i1
            _gemm_nt(&q[r, i0, 0], &k[r, 0, 0], &w[r, i0, 0],
                     i1 - i0, kl, hd, hd, hd, T, <floating>0.0)
            _softmax_causal_rows(w, r, i0, i1)
            _gemm_nn(&w[r, i0, 0], &v[r, 0, 0], &ctx[r, i0, 0],
                     i1 - i0, hd, kl, T, hd, hd, <floating>0.0)
            i0 = i1


def attention_causal_fwd(q, k, v):
    """Causal attention over (R, T, hd) heads; q comes in pre-scaled.

    Returns (ctx, weights): ctx = weights @ v with weights the causal
    softmax of q @ k^T (exact zeros above the diagonal).
    """
    w = np.empty((q.shape[0], q.shape[1], q.shape[1]), dtype=q.dtype)
    ctx = np.empty_like(q)
    _attention_fwd_impl(q, k, v, w, ctx)
    return ctx, w


def _attention_bwd_impl(floating[:, :, ::1] q, floating[:, :, ::1] k,
                        floating[:, :, ::1] v, floating[:, :, ::1] w,
                        floating[:, :, ::1] dctx, floating[:, :, ::1] ds,
                        floating[:, :, ::1] dq, floating[:, :, ::1] dk,
                        floating[:, :, ::1] dv):
    cdef Py_ssize_t r, R = q.shape[0]
    cdef int T = <int>q.shape[1], hd = <int>q.shape[2]
    cdef int i0, i1, kl
    for r in prange(R, nogil=True, schedule="static"):
        # zero the accumulators for this slice
        dk[r, :, :] = <floating>0.0
        dv[r, :, :] = <floating>0.0
        i0 = 0
        while i0 < T:
            i1 = i0 + ATT_CHUNK
            if i1 > T:
                i1 = T
            kl = i1
            # dW chunk (into ds), then softmax backward in place
            _gemm_nt(&dctx[r, i0, 0], &v[r, 0, 0], &ds[r, i0, 0],
                     i1 - i0, kl, hd, hd, hd, T, <floating>0.0)
            _softmax_causal_bwd_rows(w, ds, r, i0, i1)
            # dq = ds @ k ; dk += ds^T @ q ; dv += w^T @ dctx
            _gemm_nn(&ds[r, i0, 0], &k[r, 0, 0], &dq[r, i0, 0],
                     i1 - i0, hd, kl, T, hd, hd, <floating>0.0)
            _gemm_tn(&ds[r, i0, 0], &q[r, i0, 0], &dk[r, 0, 0],
                     kl, hd, i1 - i0, T, hd, hd, <floating>1.0)
            _gemm_tn(&w[r, i0, 0], &dctx[r, i0, 0], &dv[r, 0, 0],
                     kl, hd, i1 - i0, T, hd, hd, <floating>1.0)
            i0 = i1


def attention_causal_bwd(q, k, v, weights, dctx):
    """Backward of attention_causal_fwd. Returns (dq, dk, dv); dq is the
    gradient w.r.t. the pre-scaled q that was passed to the forward."""
    ds = np.empty_like(weights)
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    _attention_bwd_impl(q, k, v, weights, dctx, ds, dq, dk, dv)
    return dq, dk, dv


def _cross_entropy_fwd_impl(floating[:, ::1] logits, const long long[::1] targets,
                            floating[:, ::1] probs):
    cdef Py_ssize_t n, j, N = logits.shape[0], V = logits.shape[1]
    cdef double m, z, total = 0.0
    cdef floating e
    with nogil:
        for n in range(N):
            m = logits[n, 0]
            for j in range(1, V):
                if logits[n, j] > m:
                    m = logits[n, j]
            z = 0.0
            for j in range(V):
                if floating is float:
                    e = expf(logits[n, j] - <float>m)
                else:
                    e = exp(logits[n, j] - m)
                probs[n, j] = e
                z += e
            for j in range(V):
                probs[n, j] = <floating>(probs[n, j] / z)
            total += log(z) + m - logits[n, targets[n]]
    return total / N


def cross_entropy_fwd(logits, targets):
    """Mean negative log-likelihood over rows of (N, V) logits.

    Returns (mean_loss, probs); probs is cached for the backward pass.
    """
    probs = np.empty_like(logits)
    loss = _cross_entropy_fwd_impl(logits, targets.astype(np.int64, copy=False), probs)
    return float(loss), probs


def _cross_entropy_bwd_impl(floating[:, ::1] probs, const long long[::1] targets,
                            floating[:, ::1] d):
    cdef Py_ssize_t n, j, N = probs.shape[0], V = probs.shape[1]
    cdef double inv = 1.0 / N
    for n in prange(N, nogil=True, schedule="static"):
        for j in range(V):
            d[n, j] = <floating>(probs[n, j] * inv)
        d[n, targets[n]] -= <floating>inv


def cross_entropy_bwd(probs, targets):
    """dlogits = (softmax - onehot) / N for the mean loss."""
    d = np.empty_like(probs)
    _cross_entropy_bwd_impl(probs, targets.astype(np.int64, copy=False), d)
    return d


def _adamw_update_impl(floating[::1] p, floating[::1] g, floating[::1] m,
                       floating[::1] v, long long t, double lr, double beta1,
                       double beta2, double eps, double wd):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double decay = 1.0 - lr * wd
    cdef double step_size = lr / bc1
    cdef double rbc2 = sqrt(bc2)
    cdef double mi, vi, gi
    for i in prange(n, nogil=True, schedule="static"):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = <floating>mi
        v[i] = <floating>vi
        p[i] = <floating>(p[i] * decay - step_size * mi / (sqrt(vi) / rbc2 + eps))


def adamw_update(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    """One decoupled-weight-decay Adam step on flat views, in place.

    Decay is applied directly to the weights (not through the moments);
    bias correction uses the per-group step count t (1-based).
    """
    _adamw_update_impl(p, g, m, v, t, lr, beta1, beta2, eps, wd)


def _scatter_add_rows_impl(floating[:, ::1] table, const long long[::1] idx,
                           floating[:, ::1] src):
    cdef Py_ssize_t n, j, N = src.shape[0], D = src.shape[1]
    with nogil:
        for n in range(N):
            for j in range(D):
                table[idx[n], j] += src[n, j]


def scatter_add_rows(table, idx, src):
    """table[idx[n], :] += src[n, :] with repeated indices accumulated."""
    _scatter_add_rows_impl(table, idx.astype(np.int64, copy=False), src)
