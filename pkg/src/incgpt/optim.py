"""AdamW with per-group freeze masks and late registration of new groups.

Groups added at a later stage start with zero moments and step counter 0;
bias correction therefore uses each group's own age, not the global step.
"""

from dataclasses import dataclass

import numpy as np

from incgpt import kernels
from incgpt.errors import ConfigError, NumericError, ScheduleError


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_steps: int = 0
    grad_clip_norm: float | None = 1.0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr must be > 0, weight_decay >= 0, eps > 0")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive or None")


class GroupState:
    """First/second moment arrays and step counter for one parameter group."""

    def __init__(self, params):
        self.m = {name: np.zeros_like(buf.value) for name, buf in params.items()}
        self.v = {name: np.zeros_like(buf.value) for name, buf in params.items()}
        self.t = 0


class OptState:
    def __init__(self):
        self.groups = {}

    def has(self, gname):
        return gname in self.groups


def register_new_groups(state, store, group_names):
    """Create zeroed optimizer state for groups that gain training now.

    Existing groups are untouched; re-registering one is a schedule error.
    """
    for gname in group_names:
        if state.has(gname):
            raise ScheduleError(f"group {gname!r} already registered")
        state.groups[gname] = GroupState(store.groups[gname])
    return state


def lr_at(cfg, global_step):
    """Linear warmup from 0 over warmup_steps, then constant at cfg.lr.

    Warmup is anchored to the run start and never restarts at stage
    boundaries.
    """
    if global_step < 0:
        raise ValueError("global_step must be >= 0")
    if cfg.warmup_steps > 0 and global_step < cfg.warmup_steps:
        return cfg.lr * (global_step / cfg.warmup_steps)
    return cfg.lr


def _grad_sq_norm(buf, gname, pname):
    """Squared gradient norm, doubling as the finiteness probe.

    A non-finite dot product from finite values (float32 overflow) falls
    back to a float64 pass; non-finite values raise.
    """
    g = buf.grad.ravel()
    sq = float(np.dot(g, g))
    if not np.isfinite(sq):
        if not np.isfinite(buf.grad).all():
            raise NumericError(f"non-finite gradient in {gname}/{pname}")
        g64 = g.astype(np.float64)
        sq = float(np.dot(g64, g64))
    return sq


def grad_global_norm(store):
    """L2 norm over all trainable groups' gradients."""
    total = 0.0
    for gname, pname, buf in store.iter_params(trainable_only=True):
        total += _grad_sq_norm(buf, gname, pname)
    return float(np.sqrt(total))


def step(store, state, cfg, global_step):
    """One AdamW step over the trainable groups. Frozen groups untouched.

    Optional global grad-norm clipping (in place, before the update). Raises
    NumericError naming the group if any trainable gradient is non-finite.
    """
    trainable = [g for g in store.group_names() if store.trainable[g]]
    for gname in trainable:
        if not state.has(gname):
            raise ScheduleError(f"group {gname!r} stepped before registration")

    norm = grad_global_norm(store)  # also validates finiteness
    if cfg.grad_clip_norm is not None and norm > cfg.grad_clip_norm:
        scale = cfg.grad_clip_norm / norm
        for gname in trainable:
            for buf in store.groups[gname].values():
                buf.grad *= scale

    lr = lr_at(cfg, global_step)
    for gname in trainable:
        gs = state.groups[gname]
        gs.t += 1
        for pname, buf in store.groups[gname].items():
            kernels.adamw_update(
                buf.value.ravel(), buf.grad.ravel(),
                gs.m[pname].ravel(), gs.v[pname].ravel(),
                gs.t, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay,
            )
