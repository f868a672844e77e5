import numpy as np
import pytest

from incgpt import data, kernels

KERNEL_FUNCS = [
    "gelu_fwd", "gelu_bwd", "layernorm_fwd", "layernorm_bwd",
    "softmax_causal_fwd", "softmax_causal_bwd",
    "attention_causal_fwd", "attention_causal_bwd",
    "cross_entropy_fwd", "cross_entropy_bwd",
    "adamw_update", "scatter_add_rows",
]


@pytest.fixture(params=kernels.available_backends())
def backend(request, monkeypatch):
    """Run the test once per importable kernel backend."""
    impl = kernels.get_backend(request.param)
    for name in KERNEL_FUNCS:
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


def relerr(a, b, floor=1e-6):
    """Elementwise |a-b| / max(|a|, |b|, floor), reduced with max."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def fd_grad(f, x, h=1e-5):
    """Central finite differences of scalar f w.r.t. every element of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def fd_grad_sampled(f, x, rng, n, h=1e-5):
    """Central differences at n random elements; returns (idx, grads)."""
    flat = x.ravel()
    idx = rng.choice(flat.size, size=min(n, flat.size), replace=False)
    grads = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grads[j] = (fp - fm) / (2 * h)
    return idx, grads


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Small deterministic byte-level corpus cached for harness tests."""
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(0)
    words = ["alpha", "beta", "gamma", "delta", "zeta", "omega"]
    docs = [" ".join(rng.choice(words, rng.integers(4, 30)))
            for _ in range(300)]
    src = root / "text.txt"
    src.write_text("\n\n".join(docs))
    data.ingest_to_dir([src], root / "cache", val_fraction=0.15, seed=1)
    return root / "cache"
