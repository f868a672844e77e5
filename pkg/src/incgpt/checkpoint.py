"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic "ICK1", u32 version
    model config: u32 n_layers, d_model, n_heads, context_len, vocab_size;
                  u8 precision code; u64 init_seed
    params section: u32 n_groups, then per group
        str name, u8 trainable, u32 n_arrays, then per array (str name, array)
    opt section: u8 present; if present: u32 n_groups, then per group
        str name, u64 step count, u32 n_params, then per param
        (str name, array m, array v)
    run section: u8 present; if present: u64 step, u64 tokens,
        str cumulative cost (exact fraction "p/q" or integer)

    str  = u16 byte length + utf8
    array = u8 itemsize (4|8), u8 ndim, ndim * u64 dims, raw LE values

Values are written byte-for-byte, so a save/load round trip is bit-exact.
"""

import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

from incgpt.errors import DataError
from incgpt.model import ModelConfig, DualBuffer, ParameterStore
from incgpt.optim import GroupState, OptState

MAGIC = b"ICK1"
VERSION = 1

_PRECISION_CODES = {"verify64": 0, "fast32": 1}
_PRECISION_NAMES = {v: k for k, v in _PRECISION_CODES.items()}
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def _w_str(out, s):
    raw = s.encode("utf-8")
    out.append(struct.pack("<H", len(raw)))
    out.append(raw)


def _w_array(out, a):
    itemsize = a.dtype.itemsize
    if itemsize not in _DTYPES:
        raise DataError(f"unsupported checkpoint dtype {a.dtype}")
    out.append(struct.pack("<BB", itemsize, a.ndim))
    out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
    out.append(np.ascontiguousarray(a).astype(_DTYPES[itemsize], copy=False).tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        b = self.buf[self.pos:self.pos + n]
        if len(b) != n:
            raise DataError("truncated checkpoint")
        self.pos += n
        return b

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def r_str(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def r_array(self):
        itemsize, ndim = self.unpack("<BB")
        shape = self.unpack(f"<{ndim}Q")
        dt = _DTYPES[itemsize]
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(count * itemsize), dtype=dt)
        return data.reshape(shape).copy()


def save_checkpoint(path, store, opt_state=None, run_state=None):
    """Atomically write store (+ optimizer + run position) to path."""
    cfg = store.cfg
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(struct.pack(
        "<5IBQ", cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.context_len,
        cfg.vocab_size, _PRECISION_CODES[cfg.precision], cfg.init_seed,
    ))

    out.append(struct.pack("<I", len(store.groups)))
    for gname, group in store.groups.items():
        _w_str(out, gname)
        out.append(struct.pack("<B", int(store.trainable[gname])))
        out.append(struct.pack("<I", len(group)))
        for pname, buf in group.items():
            _w_str(out, pname)
            _w_array(out, buf.value)

    out.append(struct.pack("<B", int(opt_state is not None)))
    if opt_state is not None:
        out.append(struct.pack("<I", len(opt_state.groups)))
        for gname, gs in opt_state.groups.items():
            _w_str(out, gname)
            out.append(struct.pack("<Q", gs.t))
            out.append(struct.pack("<I", len(gs.m)))
            for pname in gs.m:
                _w_str(out, pname)
                _w_array(out, gs.m[pname])
                _w_array(out, gs.v[pname])

    out.append(struct.pack("<B", int(run_state is not None)))
    if run_state is not None:
        out.append(struct.pack("<QQ", run_state["step"], run_state["tokens"]))
        _w_str(out, str(Fraction(run_state["cum_cost"])))

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


def load_checkpoint(path):
    """Read a checkpoint; returns (store, opt_state | None, run_state | None)."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")

    L, D, H, C, V, prec, seed = r.unpack("<5IBQ")
    cfg = ModelConfig(L, D, H, C, V, _PRECISION_NAMES[prec], seed)

    (n_groups,) = r.unpack("<I")
    groups = {}
    trainable = {}
    for _ in range(n_groups):
        gname = r.r_str()
        (flag,) = r.unpack("<B")
        trainable[gname] = bool(flag)
        (n_arrays,) = r.unpack("<I")
        group = {}
        for _ in range(n_arrays):
            pname = r.r_str()
            group[pname] = DualBuffer(r.r_array())
        groups[gname] = group
    store = ParameterStore(cfg, groups)
    store.trainable.update(trainable)

    opt_state = None
    (has_opt,) = r.unpack("<B")
    if has_opt:
        opt_state = OptState()
        (n_groups,) = r.unpack("<I")
        for _ in range(n_groups):
            gname = r.r_str()
            gs = GroupState({})
            (gs.t,) = r.unpack("<Q")
            (n_params,) = r.unpack("<I")
            for _ in range(n_params):
                pname = r.r_str()
                gs.m[pname] = r.r_array()
                gs.v[pname] = r.r_array()
            opt_state.groups[gname] = gs

    run_state = None
    (has_run,) = r.unpack("<B")
    if has_run:
        step, tokens = r.unpack("<QQ")
        run_state = {
            "step": step,
            "tokens": tokens,
            "cum_cost": Fraction(r.r_str()),
        }
    return store, opt_state, run_state
