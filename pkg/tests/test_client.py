import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import randomize_delta, tiny_manifest
from fedmm.client import (
    LocalTrainConfig,
    RegContext,
    RegularizerConfig,
    cosine_lr,
    gamma_for_client,
    local_train,
    make_reg_context,
    mask_vector,
    reg_value_and_grad,
)
from fedmm.model import AdapterDelta, LayerSpec, ModelConfig, compose_delta, init_model
from fedmm.partitioner import ClientSlot, dirichlet_partition
from test_model import central_difference, relative_errors


# ---------- mask ----------

def test_mask_vector_middle_band():
    mask = mask_vector(8, 2)
    assert mask.tolist() == [False, False, True, True, True, True, False, False]


def test_mask_vector_zero_margin_all_on():
    assert mask_vector(5, 0).all()


def test_mask_vector_degenerate_warns():
    with pytest.warns(UserWarning, match="inert"):
        mask = mask_vector(4, 2)
    assert not mask.any()


# ---------- gamma ----------

def test_gamma_mapping():
    assert gamma_for_client(0.1, "aligned", 0.0) == 0.0
    assert gamma_for_client(0.1, "single_modality", 0.5) == 0.1
    assert gamma_for_client(0.1, "partial_missing", 0.25) == pytest.approx(0.025)
    with pytest.raises(ValueError, match="kind"):
        gamma_for_client(0.1, "weird", 0.0)
    with pytest.raises(ValueError, match="missing_rate"):
        gamma_for_client(0.1, "partial_missing", 1.5)


# ---------- proximal term ----------

def one_by_one_delta(up, down, alpha=1.0):
    specs = (LayerSpec("head", 1, 1, 0),)
    return AdapterDelta(
        specs=specs,
        rank=1,
        adapter_alpha=alpha,
        up=[np.array([[up]])],
        down=[np.array([[down]])],
    )


def test_reg_hand_case_scalar():
    # composed update 0.2, target 0, gamma 10: value = 10 * 0.04
    delta = one_by_one_delta(0.4, 0.5)
    assert compose_delta(delta, 0)[0, 0] == pytest.approx(0.2)
    ctx = RegContext(targets=[np.zeros((1, 1))], mask=np.array([True]), gamma=10.0)
    value, grad = reg_value_and_grad(delta, ctx)
    assert value == pytest.approx(0.4)
    # d/dup of gamma*(s*u*d)^2 = 2*gamma*(s*u*d)*s*d
    assert grad.up[0][0, 0] == pytest.approx(2.0 * 10.0 * 0.2 * 0.5)
    assert grad.down[0][0, 0] == pytest.approx(2.0 * 10.0 * 0.2 * 0.4)


def test_reg_zero_at_target():
    delta = one_by_one_delta(0.4, 0.5)
    ctx = RegContext(targets=[compose_delta(delta, 0)], mask=np.array([True]), gamma=5.0)
    value, grad = reg_value_and_grad(delta, ctx)
    assert value == 0.0
    assert np.array_equal(grad.to_vector(), np.zeros(2))


def test_reg_masked_layer_contributes_nothing():
    delta = one_by_one_delta(0.4, 0.5)
    ctx = RegContext(targets=[np.zeros((1, 1))], mask=np.array([False]), gamma=10.0)
    value, grad = reg_value_and_grad(delta, ctx)
    assert value == 0.0
    assert np.array_equal(grad.to_vector(), np.zeros(2))


def test_reg_gamma_zero_contributes_nothing(tiny_model):
    _, _, delta = tiny_model
    delta = randomize_delta(delta, seed=3)
    ctx = make_reg_context(delta.zeros_like(), margin=0, gamma=0.0)
    value, grad = reg_value_and_grad(delta, ctx)
    assert value == 0.0
    assert np.array_equal(grad.to_vector(), np.zeros_like(grad.to_vector()))


def test_reg_gradient_matches_central_differences(tiny_model):
    _, _, delta = tiny_model
    delta = randomize_delta(delta, seed=9, scale=0.3)
    target_delta = randomize_delta(delta, seed=10, scale=0.2)
    ctx = make_reg_context(target_delta, margin=1, gamma=0.7)
    _, grad = reg_value_and_grad(delta, ctx)

    def fn(vec):
        value, _ = reg_value_and_grad(delta.from_vector(vec), ctx)
        return value

    numeric = central_difference(fn, delta.to_vector())
    errs = relative_errors(grad.to_vector(), numeric)
    assert errs.max() < 1e-4


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(
        modality_dims=(4, 3), hidden=6, encoder_depth=2, trunk_depth=2,
        class_count=3, rank=2, adapter_alpha=2.0, seed=7,
    )
    base, delta = init_model(cfg)
    return cfg, base, delta


# ---------- schedule ----------

def test_cosine_peak_and_tail():
    total, ratio, lr0 = 100, 0.1, 0.5
    warmup = math.ceil(ratio * total)
    assert cosine_lr(warmup, total, ratio, lr0) == pytest.approx(lr0)
    mid = warmup + (total - warmup) // 2
    assert cosine_lr(mid, total, ratio, lr0) == pytest.approx(lr0 / 2.0)
    assert cosine_lr(total - 1, total, ratio, lr0) < 0.01 * lr0


def test_cosine_warmup_ramp():
    lrs = [cosine_lr(s, 100, 0.1, 1.0) for s in range(10)]
    assert lrs == pytest.approx([(s + 1) / 10 for s in range(10)])


def test_cosine_no_warmup_starts_at_peak():
    assert cosine_lr(0, 50, 0.0, 1.0) == pytest.approx(1.0)


def test_cosine_full_warmup_never_decays():
    lrs = [cosine_lr(s, 10, 1.0, 1.0) for s in range(10)]
    assert lrs == pytest.approx([(s + 1) / 10 for s in range(10)])


def test_cosine_step_bounds():
    with pytest.raises(ValueError, match="outside"):
        cosine_lr(10, 10, 0.1, 1.0)
    with pytest.raises(ValueError, match="outside"):
        cosine_lr(-1, 10, 0.1, 1.0)


@settings(max_examples=50, deadline=None)
@given(
    total=st.integers(min_value=1, max_value=400),
    ratio=st.floats(min_value=0.0, max_value=1.0),
    lr0=st.floats(min_value=1e-6, max_value=10.0),
)
def test_cosine_nonnegative_peak_once(total, ratio, lr0):
    lrs = np.array([cosine_lr(s, total, ratio, lr0) for s in range(total)])
    assert (lrs >= 0).all()
    assert lrs.max() <= lr0 * (1 + 1e-12)
    # the peak value appears on one contiguous run of at most two steps
    # (the last warmup step and the first decay step can both hit lr0)
    peaks = np.flatnonzero(np.isclose(lrs, lrs.max(), rtol=1e-12, atol=0.0))
    assert len(peaks) <= 2
    assert peaks.max() - peaks.min() == len(peaks) - 1


# ---------- local training ----------

def make_setup(seed=0):
    manifest = tiny_manifest(class_count=3, per_class=12, seed=seed)
    cfg = ModelConfig(
        modality_dims=(4, 3), hidden=8, encoder_depth=1, trunk_depth=1,
        class_count=3, rank=2, adapter_alpha=2.0, seed=seed,
    )
    base, delta = init_model(cfg)
    partition = dirichlet_partition(manifest, 3, 2.0, seed=seed)
    return manifest, base, delta, partition


def test_local_train_zero_epochs_noop():
    manifest, base, delta, partition = make_setup()
    out, trace = local_train(
        base, delta, manifest, partition.clients[0],
        LocalTrainConfig(epochs=0), RegularizerConfig(), seed=1,
    )
    assert trace == []
    assert np.array_equal(out.to_vector(), delta.to_vector())


def test_local_train_deterministic_and_pure():
    manifest, base, delta, partition = make_setup()
    before = delta.to_vector().copy()
    cfg = LocalTrainConfig(epochs=2, batch_size=8)
    a, trace_a = local_train(base, delta, manifest, partition.clients[0], cfg, RegularizerConfig(), seed=5)
    b, trace_b = local_train(base, delta, manifest, partition.clients[0], cfg, RegularizerConfig(), seed=5)
    assert np.array_equal(a.to_vector(), b.to_vector())
    assert trace_a == trace_b
    assert np.array_equal(delta.to_vector(), before)


def test_local_train_empty_client_rejected():
    manifest, base, delta, _ = make_setup()
    with pytest.raises(ValueError, match="no samples"):
        local_train(base, delta, manifest, ClientSlot(), LocalTrainConfig(), RegularizerConfig(), seed=1)


def test_local_train_descends_across_seeds():
    firsts, lasts = [], []
    for seed in range(3):
        manifest, base, delta, partition = make_setup(seed=seed)
        slot = max(partition.clients, key=len)
        _, trace = local_train(
            base, delta, manifest, slot,
            LocalTrainConfig(epochs=5, batch_size=8, lr=5e-3),
            RegularizerConfig(enabled=False), seed=seed,
        )
        firsts.append(trace[0])
        lasts.append(trace[-1])
    assert np.mean(lasts) < np.mean(firsts)


def test_local_train_reg_pulls_toward_global():
    # single-modality client: large gamma should keep the trained delta
    # closer to the global one than no regularizer does
    manifest, base, delta, partition = make_setup(seed=2)
    slot = max(partition.clients, key=len)
    mono = ClientSlot(
        sample_ids=list(slot.sample_ids),
        masks=[(True, False)] * len(slot),
    )
    start = randomize_delta(delta, seed=20, scale=0.05)
    cfg = LocalTrainConfig(epochs=3, batch_size=8)
    free, _ = local_train(base, start, manifest, mono, cfg, RegularizerConfig(enabled=False), seed=3)
    tied, _ = local_train(
        base, start, manifest, mono, cfg,
        RegularizerConfig(enabled=True, gamma_max=50.0, margin=0), seed=3,
    )
    dist_free = np.linalg.norm(free.to_vector() - start.to_vector())
    dist_tied = np.linalg.norm(tied.to_vector() - start.to_vector())
    assert dist_tied < dist_free


def test_local_train_aligned_client_skips_reg():
    # aligned clients get gamma 0, so enabled/disabled must coincide
    manifest, base, delta, partition = make_setup(seed=4)
    slot = max(partition.clients, key=len)
    cfg = LocalTrainConfig(epochs=1, batch_size=8)
    on, trace_on = local_train(base, delta, manifest, slot, cfg, RegularizerConfig(enabled=True), seed=6)
    off, trace_off = local_train(base, delta, manifest, slot, cfg, RegularizerConfig(enabled=False), seed=6)
    assert np.array_equal(on.to_vector(), off.to_vector())
    assert trace_on == trace_off
