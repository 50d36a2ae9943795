import numpy as np
import pytest

from skattn.autodiff import ShapeMismatch, backward, constant, sum_all
from skattn.config import Config
from skattn.pose import PoseRT
from skattn.synth import make_sample
from skattn.unet import (
    build_model,
    reference_pass,
    temporal_mix,
    time_embedding_table,
    unet_forward,
    unet_forward_frames,
)
from skattn.video import build_control, sample_conditions

CFG = Config(
    unet_channels=(8, 12, 16),
    time_embed_width=16,
    time_hidden_width=24,
    null_ctx_width=12,
    expr_width=12,
    stem_width=6,
    diffusion_steps=50,
)


@pytest.fixture(scope="module")
def model():
    return build_model(CFG)


@pytest.fixture(scope="module")
def conditioning(model):
    sample = make_sample(PoseRT.identity(), 0.3, 0.7, CFG)
    control = build_control(sample_conditions(sample), model)
    ref = reference_pass(constant(2.0 * sample.reference_image - 1.0), model)
    return control, ref


def test_forward_shape_and_determinism(model, rng):
    z = constant(rng.standard_normal((4, 16, 16)))
    a = unet_forward(z, 7, None, None, model)
    b = unet_forward(z, 7, None, None, model)
    assert a.shape == (4, 16, 16)
    assert np.array_equal(a.data, b.data)


def test_fresh_adapters_are_bit_transparent(model, conditioning, rng):
    control, ref = conditioning
    for _ in range(20):
        z = constant(rng.standard_normal((4, 16, 16)))
        t = int(rng.integers(0, CFG.diffusion_steps))
        bare = unet_forward(z, t, None, None, model)
        adapted = unet_forward(z, t, control, ref, model)
        assert np.array_equal(bare.data, adapted.data)


def test_base_weights_frozen(model):
    assert len(model.store.frozen()) > 0
    for name, t in model.store.items():
        if name.startswith("base."):
            assert not t.requires_grad, name
        else:
            assert t.requires_grad, name


def test_base_untouched_by_adapter_gradients(model, conditioning, rng):
    control, ref = conditioning
    digest_before = model.store.digest(names=[n for n, _ in model.store.frozen()])
    z = constant(rng.standard_normal((4, 16, 16)))
    out = unet_forward(z, 3, control, ref, model)
    backward(sum_all(out))
    for name, t in model.store.frozen():
        assert t.grad is None, f"{name} received a gradient"
    # gates sit on every conditioned path, so gradients reach them first
    gate_grads = [
        t.grad for n, t in model.store.trainable() if ".gate." in n and t.grad is not None
    ]
    assert gate_grads and any(np.abs(g).max() > 0 for g in gate_grads)
    for _, t in model.store.items():
        t.grad = None
    assert model.store.digest(names=[n for n, _ in model.store.frozen()]) == digest_before


def test_reference_pass_capture_shapes(model):
    sizes = {"down0": 16, "down1": 8, "down2": 4, "up2": 4, "up1": 8, "up0": 16}
    widths = dict(zip(("down0", "down1", "down2"), CFG.unet_channels))
    widths |= {"up2": CFG.unet_channels[2], "up1": CFG.unet_channels[1], "up0": CFG.unet_channels[0]}
    ref = reference_pass(constant(np.zeros((4, 16, 16))), model)
    assert ref.timestep == CFG.reference_timestep
    assert set(ref.sites) == set(sizes)
    for name, feat in ref.sites.items():
        assert feat.shape == (widths[name], sizes[name], sizes[name])
        assert not feat.requires_grad  # captured features carry no gradient path


def test_multi_frame_matches_single_frame_at_init(model, conditioning, rng):
    control, ref = conditioning
    frames = [constant(rng.standard_normal((4, 16, 16))) for _ in range(3)]
    joint = unet_forward_frames(frames, 5, [control] * 3, ref, model, motion=True)
    for f, j in zip(frames, joint):
        single = unet_forward(f, 5, control, ref, model)
        assert np.array_equal(single.data, j.data)


def test_forward_frames_validates_controls(model, conditioning, rng):
    control, ref = conditioning
    frames = [constant(rng.standard_normal((4, 16, 16))) for _ in range(2)]
    with pytest.raises(ShapeMismatch):
        unet_forward_frames(frames, 0, [control], ref, model)


def test_temporal_mix_identity_and_training_effect(model, rng):
    site = model.adapters.motion["up1"]
    c = CFG.unet_channels[1]
    frames = [constant(rng.standard_normal((c, 3, 3))) for _ in range(4)]
    out = temporal_mix(frames, site)
    for f, o in zip(frames, out):
        assert np.array_equal(f.data, o.data)
    site.gate.w.data[:] = 0.05
    mixed = temporal_mix(frames, site)
    assert any(not np.array_equal(f.data, o.data) for f, o in zip(frames, mixed))
    site.gate.w.data[:] = 0.0


def test_time_embedding_table():
    emb = time_embedding_table(3, 8)
    assert emb.shape == (1, 8)
    t = 3 * np.exp(-np.log(10000.0) * np.arange(4) / 4)
    want = np.concatenate([np.sin(t), np.cos(t)])[None]
    assert np.allclose(emb, want, atol=1e-12)
    assert not np.array_equal(time_embedding_table(3, 8), time_embedding_table(4, 8))
