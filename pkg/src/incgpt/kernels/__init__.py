"""Hot numerical kernels with a compiled core and a pure-NumPy fallback.

The Cython extension `_ckernels` is used when it importable; otherwise (or
when INCGPT_PURE_PYTHON=1 is set) the NumPy twin `_pykernels` is selected.
Both expose the same functions; `BACKEND` names the one in use.
"""

import os

from incgpt.kernels import _pykernels

_FORCE_PURE = os.environ.get("INCGPT_PURE_PYTHON", "") == "1"

if not _FORCE_PURE:
    try:
        from incgpt.kernels import _ckernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"
else:
    _impl = _pykernels
    BACKEND = "python"

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
softmax_causal_fwd = _impl.softmax_causal_fwd
softmax_causal_bwd = _impl.softmax_causal_bwd
attention_causal_fwd = _impl.attention_causal_fwd
attention_causal_bwd = _impl.attention_causal_bwd
cross_entropy_fwd = _impl.cross_entropy_fwd
cross_entropy_bwd = _impl.cross_entropy_bwd
adamw_update = _impl.adamw_update
scatter_add_rows = _impl.scatter_add_rows


def available_backends():
    """Names of the kernel backends importable in this environment."""
    names = ["python"]
    try:
        from incgpt.kernels import _ckernels  # noqa: F401
        names.insert(0, "compiled")
    except ImportError:
        pass
    return names


def get_backend(name):
    """Fetch a backend module by name ("compiled" or "python")."""
    if name == "python":
        return _pykernels
    if name == "compiled":
        from incgpt.kernels import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend: {name!r}")
