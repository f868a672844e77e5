"""Benchmark the compiled kernel backend against the pure-NumPy fallback.

Times each kernel at desk-scale shapes plus one full training step per
backend. Kernel selection is swapped in place, so matmuls and everything
else stay identical between rows.

Usage: python benchmarks/bench_kernels.py [--repeats 5] [--full-step]
"""

import argparse
import time

import numpy as np

from incgpt import data, kernels, model, ops, optim

B, T, D, H, V = 32, 256, 128, 4, 259
HD = D // H


def timeit(f, repeats):
    f()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        f()
        best = min(best, time.perf_counter() - t0)
    return best


def _blas_limit_for(backend_name):
    """Compiled attention runs under a one-thread BLAS limit in ops; the
    benchmark reproduces that so each row measures the real execution path."""
    if backend_name != "compiled":
        import contextlib
        return contextlib.nullcontext
    from threadpoolctl import ThreadpoolController
    controller = ThreadpoolController()
    return lambda: controller.limit(limits=1, user_api="blas")


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    x4 = rng.standard_normal((B * T, 4 * D)).astype(dtype)
    x1 = rng.standard_normal((B * T, D)).astype(dtype)
    gain = np.ones(D, dtype=dtype)
    bias = np.zeros(D, dtype=dtype)
    q = rng.standard_normal((B * H, T, HD)).astype(dtype)
    scores = rng.standard_normal((B * H, T, T)).astype(dtype)
    logits = rng.standard_normal((B * T, V)).astype(dtype)
    targets = rng.integers(0, V, B * T)
    p = rng.standard_normal(1_500_000).astype(dtype)
    g = rng.standard_normal(1_500_000).astype(dtype)
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    def attention_pair(k, limiter):
        with limiter():
            ctx, w = k.attention_causal_fwd(q, q, q)
            k.attention_causal_bwd(q, q, q, w, ctx)

    return [
        ("gelu fwd (B*T,4D)", lambda k, _: k.gelu_fwd(x4)),
        ("gelu bwd", lambda k, _: k.gelu_bwd(x4, x4)),
        ("layernorm fwd (B*T,D)", lambda k, _: k.layernorm_fwd(x1, gain, bias, 1e-5)),
        ("softmax causal fwd", lambda k, _: k.softmax_causal_fwd(scores.copy())),
        ("attention fwd+bwd", attention_pair),
        ("cross entropy fwd", lambda k, _: k.cross_entropy_fwd(logits, targets)),
        ("adamw update 1.5M", lambda k, _: k.adamw_update(
            p, g, m, v, 1, 6e-4, 0.9, 0.95, 1e-8, 0.1)),
    ]


def bench_kernels(repeats, dtype):
    backends = {name: (kernels.get_backend(name), _blas_limit_for(name))
                for name in kernels.available_backends()}
    print(f"\nkernels at B={B} T={T} D={D} H={H}, {np.dtype(dtype).name} "
          f"(best of {repeats})")
    header = f"{'kernel':<26}" + "".join(f"{n:>12}" for n in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, fn in kernel_cases(dtype):
        times = [timeit(lambda i=impl, l=lim: fn(i, l), repeats)
                 for impl, lim in backends.values()]
        row = f"{name:<26}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[1] / times[0]:>9.1f}x"
        print(row)


def bench_full_step(repeats, corpus=None):
    cfg = model.ModelConfig(8, D, H, T, V, "fast32", 0)
    spec = data.BatchSpec(B, T)
    if corpus:
        stream = data.load_cache(corpus + "/train")
    else:
        rng = np.random.default_rng(0)
        toks = rng.integers(0, V, spec.tokens_per_step * 4 + 1)
        stream = data.TokenStream(toks.astype(data.TOKEN_DTYPE), "synth",
                                  "train", 1)
    cur = data.BatchCursor(stream, spec)
    ocfg = optim.AdamWConfig(warmup_steps=10)

    print(f"\nfull training step, L=8 d={D} B={B} T={T} fast32")
    for name in kernels.available_backends():
        impl = kernels.get_backend(name)
        saved = {fn: getattr(kernels, fn) for fn in dir(impl)
                 if not fn.startswith("_") and hasattr(kernels, fn)}
        for fn in saved:
            setattr(kernels, fn, getattr(impl, fn))
        try:
            store = model.init_model(cfg)
            state = optim.OptState()
            optim.register_new_groups(state, store, store.group_names())

            def step(it):
                inputs, targets = cur.batch_at(it)
                logits, tape = model.forward(store, inputs, 8)
                _, ctx = ops.cross_entropy_logits(logits, targets)
                store.zero_grads()
                model.backward(store, tape,
                               ops.cross_entropy_logits_backward(ctx), 8, 1)
                del tape
                optim.step(store, state, ocfg, it)

            t = timeit(lambda: step(0), repeats)
            print(f"{name:<10} {t:.2f} s/step")
        finally:
            for fn, val in saved.items():
                setattr(kernels, fn, val)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    ap.add_argument("--full-step", action="store_true",
                    help="also time a complete training step per backend")
    ap.add_argument("--corpus", default=None,
                    help="token cache dir for the full-step benchmark")
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}; "
          f"available: {kernels.available_backends()}")
    bench_kernels(args.repeats, np.dtype(args.dtype).type)
    if args.full_step:
        bench_full_step(max(2, args.repeats // 2), args.corpus)


if __name__ == "__main__":
    main()
