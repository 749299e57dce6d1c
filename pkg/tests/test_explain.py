import numpy as np
import pytest

from fairvit.autodiff import ShapeError
from fairvit.data import SyntheticSpec, generate, split
from fairvit.explain import (
    Heatmap,
    attention_rollout,
    explain_rollout,
    export_heatmap,
    grad_cam,
    normalize_map,
    overlay,
    rollout_matrices,
    spatial_entropy,
)
from fairvit.imaging import read_image
from fairvit.model import ModelConfig, VariantError, build_model
from fairvit.trainer import TrainConfig, train

from conftest import tiny_config


def random_attention(rng, layers, heads, tokens):
    maps = []
    for _ in range(layers):
        a = rng.uniform(0, 1, (heads, tokens, tokens)) ** 3
        maps.append(a / a.sum(axis=-1, keepdims=True))
    return maps


def rollout_oracle(maps):
    t = maps[0].shape[-1]
    r = np.eye(t)
    for a in maps:
        m = np.zeros((t, t))
        for i in range(t):
            row = [0.5 * np.mean(a[:, i, j]) + 0.5 * (i == j) for j in range(t)]
            s = sum(row)
            m[i] = [v / s for v in row]
        r = m @ r
    return r


def test_normalize_map():
    np.testing.assert_array_equal(normalize_map(np.full((3, 3), 7.0)), np.full((3, 3), 0.5))
    out = normalize_map(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert out.min() == 0 and out.max() == 1


@pytest.mark.parametrize("seed", range(5))
def test_rollout_rows_are_stochastic(seed):
    rng = np.random.default_rng(seed)
    maps = random_attention(rng, layers=int(rng.integers(1, 5)), heads=3, tokens=17)
    mats = rollout_matrices(maps)
    for m in mats:
        np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-6)
        assert m.min() >= 0
    np.testing.assert_allclose(mats[-1], rollout_oracle(maps), rtol=1e-12)


@pytest.mark.parametrize("layers", [1, 2, 5])
def test_identity_attention_rolls_out_to_identity(layers):
    maps = [np.broadcast_to(np.eye(5), (2, 5, 5)) for _ in range(layers)]
    for m in rollout_matrices(maps):
        np.testing.assert_array_equal(m, np.eye(5))
    hm = attention_rollout(maps, image_size=8)
    assert hm.values.shape == (8, 8)
    np.testing.assert_array_equal(hm.values, np.full((8, 8), 0.5))


def test_rollout_token_mismatch_is_a_shape_error():
    rng = np.random.default_rng(0)
    maps = random_attention(rng, 1, 2, 5) + random_attention(rng, 1, 2, 10)
    with pytest.raises(ShapeError):
        rollout_matrices(maps)
    with pytest.raises(ShapeError):
        attention_rollout(random_attention(rng, 1, 2, 6))  # 5 patch tokens is not a square grid


def test_rollout_grid_layout_follows_patch_order():
    # class token attends only to patch 2 (top-right of a 2x2 grid)
    a = np.full((1, 5, 5), 0.0)
    a[0] = np.eye(5)
    a[0, 0] = 0
    a[0, 0, 2] = 1.0
    hm = attention_rollout([a])
    assert np.unravel_index(np.argmax(hm.values), hm.values.shape) == (0, 1)


@pytest.mark.parametrize("seed", range(5))
def test_grad_cam_raw_is_non_negative_and_shaped(seed):
    rng = np.random.default_rng(seed)
    m = build_model(tiny_config("hybrid"), seed=seed)
    img = rng.uniform(0, 1, (3, 8, 8))
    hm = grad_cam(m, img, "s1")
    assert hm.raw.min() >= 0
    assert hm.values.shape == (8, 8) and hm.values.min() >= 0 and hm.values.max() <= 1
    assert hm.source == "grad_cam" and hm.sample_id == "s1"


def test_grad_cam_constant_activations_give_neutral_map():
    m = build_model(tiny_config("cnn_only"), seed=0)
    for name, p in m.params.theta_F.items():
        p.data[...] = 0.0 if name.endswith(".w") else 1.0
    hm = grad_cam(m, np.random.default_rng(0).uniform(0, 1, (3, 8, 8)))
    np.testing.assert_array_equal(hm.values, np.full((8, 8), 0.5))


def test_explainers_require_their_branch():
    img = np.zeros((3, 8, 8))
    with pytest.raises(VariantError):
        grad_cam(build_model(tiny_config("vit_only")), img)
    with pytest.raises(VariantError):
        explain_rollout(build_model(tiny_config("cnn_only")), img)


def test_explainers_leave_parameters_unchanged():
    m = build_model(tiny_config(), seed=1)
    before = {n: p.data.tobytes() for n, p in m.params.items()}
    img = np.random.default_rng(1).uniform(0, 1, (3, 8, 8))
    grad_cam(m, img)
    explain_rollout(m, img)
    assert before == {n: p.data.tobytes() for n, p in m.params.items()}


def test_model_rollout_uses_all_layers():
    m = build_model(tiny_config(vit_depth=3), seed=2)
    hm = explain_rollout(m, np.random.default_rng(2).uniform(0, 1, (3, 8, 8)), "x")
    assert hm.values.shape == (8, 8) and hm.raw.shape == (2, 2)


def test_spatial_entropy():
    assert spatial_entropy(np.ones((4, 4))) == pytest.approx(np.log(16))
    peak = np.zeros((4, 4))
    peak[1, 2] = 1
    assert spatial_entropy(peak) == 0.0


# --- export --------------------------------------------------------------------


@pytest.mark.parametrize("ext", ["png", "pgm"])
def test_export_round_trip_and_determinism(tmp_path, ext):
    rng = np.random.default_rng(0)
    hm = Heatmap(rng.uniform(0, 1, (12, 10)), "grad_cam", "s7")
    img = rng.uniform(0, 1, (3, 12, 10))
    gray, over = export_heatmap(hm, img, tmp_path / "a", ext=ext)
    assert gray.name == f"s7.grad_cam.{ext}"
    back = read_image(gray, channels=1)[0]
    assert np.max(np.abs(back - hm.values)) <= 1 / 255
    ov = read_image(over)
    assert ov.shape == img.shape
    np.testing.assert_allclose(ov, overlay(hm, img), atol=1 / 255)
    gray2, over2 = export_heatmap(hm, img, tmp_path / "b", ext=ext)
    assert gray.read_bytes() == gray2.read_bytes() and over.read_bytes() == over2.read_bytes()


def test_overlay_blends_at_half_alpha():
    hm = Heatmap(np.ones((2, 2)), "attention_rollout")
    out = overlay(hm, np.zeros((3, 2, 2)))
    np.testing.assert_array_equal(out[:, 0, 0], [0.5, 0.0, 0.0])
    with pytest.raises(ShapeError):
        overlay(hm, np.zeros((3, 4, 4)))


# --- trained-model behaviour --------------------------------------------------


def _trained(local, global_, variant, seed=0):
    ds = generate(SyntheticSpec(n=2000, local_cue_weight=local, global_cue_weight=global_, seed=seed))
    tr, va, te = split(ds, seed=seed)
    m = build_model(ModelConfig(variant=variant), seed=seed)
    train(m, tr, va, TrainConfig(lr=1e-3, epochs=10, seed=seed))
    return m, te


@pytest.mark.slow
def test_rollout_on_global_cue_is_more_dispersed_than_grad_cam_on_local_cue():
    local_model, local_te = _trained(1.0, 0.0, "hybrid")
    global_model, global_te = _trained(0.0, 1.0, "hybrid")
    cam = [spatial_entropy(grad_cam(local_model, s.image).values) for s in list(local_te)[:20]]
    roll = [spatial_entropy(explain_rollout(global_model, s.image).values) for s in list(global_te)[:20]]
    assert np.mean(roll) > np.mean(cam)
