import numpy as np
import pytest

from conftest import manual_manifest, randomize_delta, tiny_manifest
from fedmm.model import (
    AdapterDelta,
    BaseWeights,
    Batch,
    LayerSpec,
    ModelConfig,
    compose_delta,
    forward,
    init_model,
    layer_specs,
    load_checkpoint,
    loss_and_grad,
    make_batch,
    save_checkpoint,
)


def central_difference(fn, vec, h=1e-5):
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        left = vec.copy()
        right = vec.copy()
        left[i] -= h
        right[i] += h
        grad[i] = (fn(right) - fn(left)) / (2.0 * h)
    return grad


def relative_errors(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-10)
    return np.abs(analytic - numeric) / denom


# ---------- structure ----------

def test_layer_specs_depths():
    cfg = ModelConfig(modality_dims=(4, 3), hidden=6, encoder_depth=3, trunk_depth=4, class_count=3, rank=2)
    specs = layer_specs(cfg)
    assert cfg.depth == 8
    by_name = {s.name: s for s in specs}
    assert [by_name[f"enc0.{e}"].depth for e in range(3)] == [0, 1, 2]
    assert [by_name[f"enc1.{e}"].depth for e in range(3)] == [0, 1, 2]
    assert [by_name[f"trunk.{t}"].depth for t in range(4)] == [3, 4, 5, 6]
    assert by_name["head"].depth == 7
    assert by_name["enc0.0"].fan_in == 5  # features plus presence bit
    assert by_name["trunk.0"].fan_in == 12


def test_rank_too_large_rejected():
    cfg = ModelConfig(modality_dims=(2, 2), hidden=4, encoder_depth=1, trunk_depth=1, class_count=2, rank=3)
    with pytest.raises(ValueError, match="rank 3 exceeds"):
        init_model(cfg)


def test_init_deterministic_and_zero_composition(tiny_model):
    cfg, base, delta = tiny_model
    base2, delta2 = init_model(cfg)
    for w1, w2 in zip(base.weights, base2.weights):
        assert np.array_equal(w1, w2)
    for i in range(len(delta.up)):
        assert np.array_equal(delta.up[i], np.zeros_like(delta.up[i]))
        assert np.array_equal(delta.down[i], delta2.down[i])
        assert np.array_equal(compose_delta(delta, i), np.zeros((delta.specs[i].fan_out, delta.specs[i].fan_in)))


def test_base_weights_frozen(tiny_model):
    _, base, _ = tiny_model
    with pytest.raises(ValueError):
        base.weights[0][0, 0] = 1.0
    with pytest.raises(ValueError):
        base.biases[0][0] = 1.0


# ---------- composition ----------

def test_compose_rank_one_hand_product():
    spec = (LayerSpec("head", 2, 2, 0),)
    delta = AdapterDelta(
        specs=spec,
        rank=1,
        adapter_alpha=1.0,
        up=[np.array([[2.0], [0.0]])],
        down=[np.array([[3.0, 4.0]])],
    )
    assert np.array_equal(compose_delta(delta, 0), np.array([[6.0, 8.0], [0.0, 0.0]]))


def test_compose_alpha_scaling(tiny_model):
    _, _, delta = tiny_model
    delta = randomize_delta(delta, seed=1)
    doubled = delta.copy()
    doubled = AdapterDelta(
        specs=doubled.specs,
        rank=doubled.rank,
        adapter_alpha=2.0 * doubled.adapter_alpha,
        up=doubled.up,
        down=doubled.down,
    )
    for i in range(len(delta.up)):
        assert np.allclose(2.0 * compose_delta(delta, i), compose_delta(doubled, i))


def test_compose_linear_in_up(tiny_model):
    _, _, delta = tiny_model
    delta = randomize_delta(delta, seed=2)
    scaled = delta.copy()
    scaled.up = [3.0 * u for u in scaled.up]
    for i in range(len(delta.up)):
        assert np.allclose(3.0 * compose_delta(delta, i), compose_delta(scaled, i))


def test_vector_roundtrip(tiny_model):
    _, _, delta = tiny_model
    delta = randomize_delta(delta, seed=3)
    vec = delta.to_vector()
    back = delta.from_vector(vec)
    for i in range(len(delta.up)):
        assert np.array_equal(delta.up[i], back.up[i])
        assert np.array_equal(delta.down[i], back.down[i])
    with pytest.raises(ValueError, match="length"):
        delta.from_vector(vec[:-1])


# ---------- forward ----------

def test_single_affine_hand_computation():
    # no encoders, no trunk: logits = [features0, bit0, features1, bit1] @ W.T
    cfg = ModelConfig(modality_dims=(1, 1), hidden=4, encoder_depth=0, trunk_depth=0, class_count=2, rank=1, adapter_alpha=1.0, seed=0)
    specs = layer_specs(cfg)
    assert len(specs) == 1 and specs[0].fan_in == 4
    w = np.arange(8.0).reshape(2, 4)
    b = np.array([0.5, -0.5])
    base = BaseWeights(specs=specs, weights=[w], biases=[b])
    delta = AdapterDelta(specs=specs, rank=1, adapter_alpha=1.0, up=[np.zeros((2, 1))], down=[np.zeros((1, 4))])
    batch = Batch(
        features=[np.array([[2.0]]), np.array([[3.0]])],
        presence=[np.array([1.0]), np.array([1.0])],
        labels=np.array([0]),
    )
    logits = forward(base, delta, batch)
    x = np.array([2.0, 1.0, 3.0, 1.0])
    assert np.allclose(logits[0], w @ x + b)


def test_zero_adapter_equals_base_and_adapters_shift(tiny_model):
    cfg, base, delta = tiny_model
    manifest = tiny_manifest()
    batch = make_batch(manifest, [s.id for s in manifest.samples[:5]])
    zeroed = delta.zeros_like()
    base_logits = forward(base, zeroed, batch)
    init_logits = forward(base, delta, batch)  # up is zero at init
    assert np.array_equal(base_logits, init_logits)
    shifted = randomize_delta(delta, seed=4)
    assert not np.allclose(forward(base, shifted, batch), base_logits)


def test_forward_row_permutation(tiny_model):
    _, base, delta = tiny_model
    delta = randomize_delta(delta, seed=5)
    manifest = tiny_manifest()
    ids = [s.id for s in manifest.samples[:8]]
    logits = forward(base, delta, make_batch(manifest, ids))
    perm = [5, 2, 7, 0, 1, 6, 3, 4]
    logits_perm = forward(base, delta, make_batch(manifest, [ids[i] for i in perm]))
    assert np.allclose(logits[perm], logits_perm)


def test_absent_modality_features_ignored():
    manifest = manual_manifest()
    cfg = ModelConfig(modality_dims=(2, 2), hidden=4, encoder_depth=1, trunk_depth=1, class_count=2, rank=2, adapter_alpha=2.0, seed=3)
    base, delta = init_model(cfg)
    delta = randomize_delta(delta, seed=6)
    # sample b has image only; its assembled batch is zero-filled with bit 0
    batch = make_batch(manifest, ["b"], None)
    assert batch.presence[1][0] == 0.0
    assert np.array_equal(batch.features[1][0], np.zeros(2))
    # masking a modality off makes stored feature values irrelevant
    other = manual_manifest()
    other.samples[3].features["text"] = np.array([-7.0, 4.0])
    mask = [(True, False)]
    a = forward(base, delta, make_batch(manifest, ["d"], mask))
    b = forward(base, delta, make_batch(other, ["d"], mask))
    assert np.array_equal(a, b)


def test_make_batch_rejects_absent_request():
    manifest = manual_manifest()
    with pytest.raises(ValueError, match="absent modality"):
        make_batch(manifest, ["b"], [(True, True)])
    with pytest.raises(ValueError, match="empty"):
        make_batch(manifest, ["a"], [(False, False)])


# ---------- loss ----------

def test_uniform_logits_loss_is_log_class_count():
    cfg = ModelConfig(modality_dims=(2, 2), hidden=3, encoder_depth=1, trunk_depth=1, class_count=4, rank=1, adapter_alpha=1.0, seed=0)
    specs = layer_specs(cfg)
    base = BaseWeights(
        specs=specs,
        weights=[np.zeros((s.fan_out, s.fan_in)) for s in specs],
        biases=[np.zeros(s.fan_out) for s in specs],
    )
    delta = AdapterDelta(
        specs=specs,
        rank=1,
        adapter_alpha=1.0,
        up=[np.zeros((s.fan_out, 1)) for s in specs],
        down=[np.zeros((1, s.fan_in)) for s in specs],
    )
    batch = Batch(
        features=[np.ones((4, 2)), np.ones((4, 2))],
        presence=[np.ones(4), np.ones(4)],
        labels=np.arange(4),
    )
    loss, _ = loss_and_grad(base, delta, batch)
    assert abs(loss - np.log(4)) < 1e-6


def test_batch_duplication_keeps_loss_and_grad(tiny_model):
    _, base, delta = tiny_model
    delta = randomize_delta(delta, seed=7)
    manifest = tiny_manifest()
    ids = [s.id for s in manifest.samples[:4]]
    loss1, grad1 = loss_and_grad(base, delta, make_batch(manifest, ids))
    loss2, grad2 = loss_and_grad(base, delta, make_batch(manifest, ids + ids))
    assert abs(loss1 - loss2) < 1e-12
    assert np.allclose(grad1.to_vector(), grad2.to_vector())


@pytest.mark.parametrize(
    "dims,hidden,enc,trunk,classes,rank",
    [
        ((3, 2), 4, 2, 2, 3, 2),
        ((2, 2), 3, 1, 0, 2, 1),
        ((2, 3), 4, 0, 1, 4, 2),
        ((2, 2), 3, 0, 0, 2, 1),
        ((2, 2, 2), 3, 1, 1, 3, 1),
    ],
)
def test_gradients_match_central_differences(dims, hidden, enc, trunk, classes, rank):
    cfg = ModelConfig(
        modality_dims=dims,
        hidden=hidden,
        encoder_depth=enc,
        trunk_depth=trunk,
        class_count=classes,
        rank=rank,
        adapter_alpha=1.5,
        seed=11,
    )
    base, delta = init_model(cfg)
    delta = randomize_delta(delta, seed=13, scale=0.2)
    gen = np.random.Generator(np.random.Philox(key=99))
    n = 6
    batch = Batch(
        features=[gen.normal(0, 1, (n, d)) for d in dims],
        presence=[(gen.random(n) < 0.8).astype(float) for _ in dims],
        labels=gen.integers(0, classes, n),
    )
    # every sample keeps at least one modality
    for row in range(n):
        if all(batch.presence[m][row] == 0.0 for m in range(len(dims))):
            batch.presence[0][row] = 1.0
    for m in range(len(dims)):
        batch.features[m] *= batch.presence[m][:, None]

    _, grad = loss_and_grad(base, delta, batch)

    def fn(vec):
        loss, _ = loss_and_grad(base, delta.from_vector(vec), batch)
        return loss

    numeric = central_difference(fn, delta.to_vector())
    errs = relative_errors(grad.to_vector(), numeric)
    assert errs.max() < 1e-4


# ---------- persistence ----------

def test_checkpoint_roundtrip_bit_exact(tmp_path, tiny_model):
    _, base, delta = tiny_model
    delta = randomize_delta(delta, seed=8)
    p1 = tmp_path / "model1.bin"
    p2 = tmp_path / "model2.bin"
    save_checkpoint(p1, base, delta)
    base2, delta2 = load_checkpoint(p1)
    save_checkpoint(p2, base2, delta2)
    assert p1.read_bytes() == p2.read_bytes()
    for i in range(len(base.specs)):
        assert np.array_equal(base.weights[i], base2.weights[i])
        assert np.array_equal(delta.down[i], delta2.down[i])
    assert base2.specs == base.specs
    assert not base2.weights[0].flags.writeable
