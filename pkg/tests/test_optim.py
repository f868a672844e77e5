"""Optimizer contracts: hand oracles, freezing, late registration, warmup."""

import numpy as np
import pytest

from incgpt import model, optim
from incgpt.errors import ConfigError, NumericError, ScheduleError


def small_store():
    cfg = model.ModelConfig(2, 4, 1, 4, 5, "verify64", 0)
    return model.init_model(cfg)


def test_single_param_hand_oracle():
    store = small_store()
    state = optim.OptState()
    optim.register_new_groups(state, store, store.group_names())
    cfg = optim.AdamWConfig(lr=0.1, beta1=0.9, beta2=0.95, weight_decay=0.0,
                            warmup_steps=0, grad_clip_norm=None)
    buf = store.groups["final"]["ln_f_g"]
    buf.value[:] = 1.0
    for _, _, b in store.iter_params():
        b.zero_grad()
    buf.grad[:] = 1.0
    optim.step(store, state, cfg, 0)
    assert np.abs(buf.value - 0.9).max() < 1e-8


def test_zero_grad_zero_decay_is_identity():
    store = small_store()
    state = optim.OptState()
    optim.register_new_groups(state, store, store.group_names())
    cfg = optim.AdamWConfig(weight_decay=0.0, warmup_steps=0)
    before = {g: store.snapshot(g) for g in store.group_names()}
    store.zero_grads()
    optim.step(store, state, cfg, 0)
    for g in store.group_names():
        assert store.snapshot(g) == before[g]


def test_decoupled_decay_shrinks_exactly():
    store = small_store()
    state = optim.OptState()
    optim.register_new_groups(state, store, store.group_names())
    lr, wd = 0.01, 0.5
    cfg = optim.AdamWConfig(lr=lr, weight_decay=wd, warmup_steps=0)
    store.zero_grads()
    before = {(g, p): b.value.copy() for g, p, b in store.iter_params()}
    optim.step(store, state, cfg, 0)
    for g, p, b in store.iter_params():
        assert np.array_equal(b.value, before[(g, p)] * (1.0 - lr * wd)), (g, p)


def test_frozen_group_untouched_despite_grads():
    store = small_store()
    state = optim.OptState()
    optim.register_new_groups(state, store, store.group_names())
    store.trainable["block0"] = False
    for buf in store.block(0).values():
        buf.grad[:] = 1.0
    before = store.snapshot("block0")
    optim.step(store, state, optim.AdamWConfig(warmup_steps=0), 0)
    assert store.snapshot("block0") == before


def test_duplicate_registration_rejected():
    store = small_store()
    state = optim.OptState()
    optim.register_new_groups(state, store, ["block0"])
    with pytest.raises(ScheduleError):
        optim.register_new_groups(state, store, ["block0"])


def test_step_requires_registration():
    store = small_store()
    state = optim.OptState()
    with pytest.raises(ScheduleError):
        optim.step(store, state, optim.AdamWConfig(), 0)


def test_registration_adds_only_new_groups():
    store = small_store()
    state = optim.OptState()
    optim.register_new_groups(state, store, ["embeddings"])
    m_before = {k: v.copy() for k, v in state.groups["embeddings"].m.items()}
    optim.register_new_groups(state, store, ["block0", "block1", "final"])
    assert sorted(state.groups) == ["block0", "block1", "embeddings", "final"]
    for k, v in state.groups["embeddings"].m.items():
        assert np.array_equal(v, m_before[k])


def test_late_group_uses_fresh_bias_correction():
    """Two scalar groups, one stepped k times before the other exists: the
    younger one's first update must use t=1 correction (hand-computed)."""
    store = small_store()
    state = optim.OptState()
    optim.register_new_groups(state, store, ["final"])
    cfg = optim.AdamWConfig(lr=0.1, beta1=0.9, beta2=0.95, weight_decay=0.0,
                            warmup_steps=0, grad_clip_norm=None)
    old = store.groups["final"]["ln_f_g"]
    store.set_trainable(True, 1, 0)  # nothing but embeddings/final trainable
    store.trainable["embeddings"] = False

    for _ in range(3):
        store.zero_grads()
        old.grad[:] = 1.0
        optim.step(store, state, cfg, 0)
    assert state.groups["final"].t == 3

    # now a new group joins; its t starts at 0 and first step uses t=1
    optim.register_new_groups(state, store, ["block0"])
    store.trainable["block0"] = True
    new = store.block(0)["ln1_g"]
    w_old_before = old.value.copy()
    store.zero_grads()
    old.grad[:] = 1.0
    new.grad[:] = 1.0
    optim.step(store, state, cfg, 0)
    # young group: mhat = vhat = 1 -> step of exactly lr (up to eps)
    assert np.abs((1.0 - new.value) - 0.1).max() < 1e-8
    assert state.groups["block0"].t == 1
    assert state.groups["final"].t == 4
    # old group's moments carried over: same grad stream, same update
    assert np.abs((w_old_before - old.value) - 0.1).max() < 1e-7


def test_lr_warmup_schedule():
    cfg = optim.AdamWConfig(lr=6e-4, warmup_steps=100)
    assert optim.lr_at(cfg, 0) == 0.0
    assert abs(optim.lr_at(cfg, 50) - 3e-4) < 1e-18
    assert optim.lr_at(cfg, 100) == 6e-4
    assert optim.lr_at(cfg, 5000) == 6e-4
    assert optim.lr_at(optim.AdamWConfig(warmup_steps=0), 0) == 6e-4


def test_nonfinite_grad_names_group():
    store = small_store()
    state = optim.OptState()
    optim.register_new_groups(state, store, store.group_names())
    store.zero_grads()
    store.block(1)["w_fc"].grad[0, 0] = np.nan
    with pytest.raises(NumericError) as ei:
        optim.step(store, state, optim.AdamWConfig(), 0)
    assert "block1" in str(ei.value)


def test_grad_clipping_scales_to_limit():
    store = small_store()
    state = optim.OptState()
    optim.register_new_groups(state, store, store.group_names())
    store.zero_grads()
    for _, _, b in store.iter_params():
        b.grad[:] = 1.0
    n_params = store.param_count()
    expected = np.sqrt(float(n_params))
    assert abs(optim.grad_global_norm(store) - expected) < 1e-9
    cfg = optim.AdamWConfig(grad_clip_norm=1.0, warmup_steps=0)
    optim.step(store, state, cfg, 0)
    # grads were rescaled in place to unit global norm
    assert abs(optim.grad_global_norm(store) - 1.0) < 1e-9


def test_config_validation():
    with pytest.raises(ConfigError):
        optim.AdamWConfig(lr=-1)
    with pytest.raises(ConfigError):
        optim.AdamWConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        optim.AdamWConfig(grad_clip_norm=0.0)


def test_optimizer_deterministic():
    results = []
    for _ in range(2):
        store = small_store()
        state = optim.OptState()
        optim.register_new_groups(state, store, store.group_names())
        cfg = optim.AdamWConfig(warmup_steps=10)
        rng = np.random.default_rng(3)
        for it in range(5):
            store.zero_grads()
            for _, _, b in store.iter_params():
                b.grad[:] = rng.standard_normal(b.shape)
            optim.step(store, state, cfg, it)
        results.append(b"".join(store.snapshot(g) for g in store.group_names()))
    assert results[0] == results[1]
