"""Decoder-only transformer assembled from ops, with per-layer parameter
groups, partial-depth forward/backward, and freeze masks.

Layout is the GPT-2 block: pre-layernorm, causal multi-head attention,
4x MLP with GELU, learned positional embeddings, weight-tied LM head.
The forward can run through only the first `active_depth` blocks; the
backward can stop at `grad_depth_lo`, leaving everything below untouched.
"""

from dataclasses import dataclass, field

import numpy as np

from incgpt import ops
from incgpt.errors import ConfigError, DataError, DimensionError, ScheduleError
from incgpt.kernels import scatter_add_rows

LN_EPS = 1e-5
INIT_STD = 0.02

PRECISION_DTYPES = {"verify64": np.float64, "fast32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    context_len: int
    vocab_size: int
    precision: str = "verify64"
    init_seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1 or self.context_len < 1 or self.vocab_size < 2:
            raise ConfigError(f"invalid model dims: {self}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must be a positive multiple of "
                f"n_heads {self.n_heads}"
            )
        if self.precision not in PRECISION_DTYPES:
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return PRECISION_DTYPES[self.precision]


class DualBuffer:
    """A parameter array paired with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad.fill(0.0)

    @property
    def shape(self):
        return self.value.shape


# parameter names inside each block group, in storage order
BLOCK_PARAMS = (
    "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_out", "b_out",
    "ln2_g", "ln2_b", "w_fc", "b_fc", "w_proj", "b_proj",
)


class ParameterStore:
    """All trainable arrays, grouped by layer index plus embeddings/final.

    Group names: "embeddings" (wte, wpe — wte doubles as the tied LM head),
    "block0".."block{L-1}", and "final" (final layernorm). Each group has a
    trainable flag consulted by the optimizer.
    """

    def __init__(self, cfg, groups):
        self.cfg = cfg
        self.groups = groups
        self.trainable = {name: True for name in groups}

    def group_names(self):
        return list(self.groups)

    def block(self, j):
        """Parameters of 0-based block j."""
        return self.groups[f"block{j}"]

    def param(self, group, name):
        return self.groups[group][name]

    def iter_params(self, trainable_only=False):
        for gname, group in self.groups.items():
            if trainable_only and not self.trainable[gname]:
                continue
            for pname, buf in group.items():
                yield gname, pname, buf

    def zero_grads(self):
        for _, _, buf in self.iter_params():
            buf.zero_grad()

    def param_count(self):
        return sum(buf.value.size for _, _, buf in self.iter_params())

    def snapshot(self, group):
        """Raw bytes of a group's values, for freeze-soundness checks."""
        return b"".join(buf.value.tobytes() for buf in self.groups[group].values())

    def set_trainable(self, train_embeddings_head, grad_depth_lo, active_depth):
        """Apply a step directive's freeze mask to all groups."""
        self.trainable["embeddings"] = train_embeddings_head
        self.trainable["final"] = train_embeddings_head
        for j in range(self.cfg.n_layers):
            self.trainable[f"block{j}"] = grad_depth_lo <= j + 1 <= active_depth


def init_model(cfg):
    """GPT-2-style initialization, deterministic in cfg.init_seed.

    Weights are normal(0, 0.02); residual projections are scaled down by
    1/sqrt(2L); biases and layernorm offsets are zero, layernorm gains one.
    All L blocks draw from one seeded stream at construction time, so a
    block's initial values are identical whether it is used from step 0 or
    first activated at a later stage.
    """
    rng = np.random.default_rng(cfg.init_seed)
    dt = cfg.dtype
    D, V, C, L = cfg.d_model, cfg.vocab_size, cfg.context_len, cfg.n_layers
    resid_std = INIT_STD / np.sqrt(2.0 * L)

    def normal(std, *shape):
        return DualBuffer(rng.normal(0.0, std, shape).astype(dt))

    def zeros(*shape):
        return DualBuffer(np.zeros(shape, dtype=dt))

    def ones(*shape):
        return DualBuffer(np.ones(shape, dtype=dt))

    groups = {"embeddings": {"wte": normal(INIT_STD, V, D), "wpe": normal(INIT_STD, C, D)}}
    for j in range(L):
        groups[f"block{j}"] = {
            "ln1_g": ones(D), "ln1_b": zeros(D),
            "w_qkv": normal(INIT_STD, D, 3 * D), "b_qkv": zeros(3 * D),
            "w_out": normal(resid_std, D, D), "b_out": zeros(D),
            "ln2_g": ones(D), "ln2_b": zeros(D),
            "w_fc": normal(INIT_STD, D, 4 * D), "b_fc": zeros(4 * D),
            "w_proj": normal(resid_std, 4 * D, D), "b_proj": zeros(D),
        }
    groups["final"] = {"ln_f_g": ones(D), "ln_f_b": zeros(D)}
    return ParameterStore(cfg, groups)


def count_params(cfg):
    """Closed-form parameter count for the tied-embedding layout."""
    D = cfg.d_model
    per_block = 12 * D * D + 13 * D
    return (cfg.vocab_size * D + cfg.context_len * D
            + cfg.n_layers * per_block + 2 * D)


@dataclass
class BlockTape:
    ln1: ops.LayerNormCtx
    attn: ops.AttentionCtx
    x_mid: np.ndarray      # input to the MLP half (post-attention residual)
    ln2: ops.LayerNormCtx
    mlp_in: np.ndarray     # ln2 output
    pre_gelu: np.ndarray
    post_gelu: np.ndarray


@dataclass
class ActivationTape:
    tokens: np.ndarray
    active_depth: int
    blocks: list = field(default_factory=list)
    ln_f: ops.LayerNormCtx = None
    head_in: np.ndarray = None  # final layernorm output


def _block_forward(params, x, n_heads):
    a, ln1 = ops.layernorm(x, params["ln1_g"].value, params["ln1_b"].value, LN_EPS)
    att, attn = ops.causal_self_attention(
        a, params["w_qkv"].value, params["b_qkv"].value,
        params["w_out"].value, params["b_out"].value, n_heads,
    )
    x_mid = x + att
    b, ln2 = ops.layernorm(x_mid, params["ln2_g"].value, params["ln2_b"].value, LN_EPS)
    h = ops.linear(b, params["w_fc"].value, params["b_fc"].value)
    g, _ = ops.gelu(h)
    m = ops.linear(g, params["w_proj"].value, params["b_proj"].value)
    out = x_mid + m
    return out, BlockTape(ln1, attn, x_mid, ln2, b, h, g)


def _block_backward(params, tape, dout):
    """Backward through one block; returns dx at the block input.

    Parameter gradients accumulate into the group's DualBuffers.
    """
    dg, dw_proj, db_proj = ops.linear_backward(dout, tape.post_gelu, params["w_proj"].value)
    dh = ops.gelu_backward(tape.pre_gelu, dg)
    db_, dw_fc, db_fc = ops.linear_backward(dh, tape.mlp_in, params["w_fc"].value)
    dx_mid, dln2_g, dln2_b = ops.layernorm_backward(tape.ln2, db_, params["ln2_g"].value)
    dx_mid = dx_mid + dout

    da, dw_qkv, db_qkv, dw_out, db_out = ops.causal_self_attention_backward(
        tape.attn, dx_mid, params["w_qkv"].value, params["w_out"].value
    )
    dx, dln1_g, dln1_b = ops.layernorm_backward(tape.ln1, da, params["ln1_g"].value)
    dx = dx + dx_mid

    params["w_proj"].grad += dw_proj
    params["b_proj"].grad += db_proj
    params["w_fc"].grad += dw_fc
    params["b_fc"].grad += db_fc
    params["ln2_g"].grad += dln2_g
    params["ln2_b"].grad += dln2_b
    params["w_qkv"].grad += dw_qkv
    params["b_qkv"].grad += db_qkv
    params["w_out"].grad += dw_out
    params["b_out"].grad += db_out
    params["ln1_g"].grad += dln1_g
    params["ln1_b"].grad += dln1_b
    return dx


def forward(store, tokens, active_depth):
    """Run embeddings, blocks 1..active_depth, final norm, and the tied head.

    Blocks above active_depth are neither read nor written. Returns
    (logits, tape); the tape is consumed by `backward`.
    """
    cfg = store.cfg
    if not 1 <= active_depth <= cfg.n_layers:
        raise ScheduleError(
            f"active_depth {active_depth} outside [1, {cfg.n_layers}]"
        )
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be (B, T), got {tokens.shape}")
    B, T = tokens.shape
    if T > cfg.context_len:
        raise DimensionError(f"sequence length {T} exceeds context {cfg.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise DataError("token ids outside vocabulary")

    emb = store.groups["embeddings"]
    x = emb["wte"].value[tokens] + emb["wpe"].value[:T]

    tape = ActivationTape(tokens=tokens, active_depth=active_depth)
    for j in range(active_depth):
        x, btape = _block_forward(store.block(j), x, cfg.n_heads)
        tape.blocks.append(btape)

    fin = store.groups["final"]
    xf, ln_f = ops.layernorm(x, fin["ln_f_g"].value, fin["ln_f_b"].value, LN_EPS)
    tape.ln_f = ln_f
    tape.head_in = xf

    logits = ops._flat2d(xf) @ emb["wte"].value.T
    return logits.reshape(B, T, cfg.vocab_size), tape


def backward(store, tape, dlogits, active_depth, grad_depth_lo,
             train_embeddings_head=True):
    """Accumulate gradients for blocks grad_depth_lo..active_depth.

    Blocks below grad_depth_lo are not traversed at all (zero gradient, no
    compute). Embedding/head/final-norm gradients are accumulated only when
    train_embeddings_head is set, which in turn requires grad_depth_lo == 1.
    """
    cfg = store.cfg
    if tape.active_depth != active_depth:
        raise ScheduleError(
            f"tape depth {tape.active_depth} != active_depth {active_depth}"
        )
    if not 1 <= grad_depth_lo <= active_depth:
        raise ScheduleError(
            f"grad_depth_lo {grad_depth_lo} outside [1, {active_depth}]"
        )
    if train_embeddings_head and grad_depth_lo != 1:
        raise ScheduleError("embeddings/head can only train with grad_depth_lo == 1")

    emb = store.groups["embeddings"]
    fin = store.groups["final"]
    B, T = tape.tokens.shape
    dl2 = ops._flat2d(dlogits)
    xf2 = ops._flat2d(tape.head_in)

    # tied head: logits = xf @ wte^T. The head and lookup contributions are
    # combined before touching the grad buffer so that repeated backwards
    # accumulate bit-exactly (grads double without an intervening zero).
    dxf = (dl2 @ emb["wte"].value).reshape(B, T, cfg.d_model)
    dwte = dl2.T @ xf2 if train_embeddings_head else None

    dx, dg, db = ops.layernorm_backward(tape.ln_f, dxf, fin["ln_f_g"].value)
    if train_embeddings_head:
        fin["ln_f_g"].grad += dg
        fin["ln_f_b"].grad += db

    for j in range(active_depth - 1, grad_depth_lo - 2, -1):
        dx = _block_backward(store.block(j), tape.blocks[j], dx)

    if train_embeddings_head:
        scatter_add_rows(dwte, tape.tokens.reshape(-1), ops._flat2d(dx))
        emb["wte"].grad += dwte
        emb["wpe"].grad[:T] += dx.sum(axis=0)
