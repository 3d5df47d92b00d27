from __future__ import annotations

import numpy as np
import pytest

from imgcloak import tensor as ts
from imgcloak.encoder import EncoderConfig, embed, init_encoder
from imgcloak.imageio import Image
from imgcloak.tensor import Tensor, backward, finite_diff_gradient
from imgcloak.transforms import (EotPolicy, TransformSpec, apply_transform,
                                 apply_transform_tensor, default_eot_policy,
                                 evaluation_operations, gaussian_kernel,
                                 sample_transforms)


def test_spec_validation_happens_at_construction():
    with pytest.raises(ValueError):
        TransformSpec("gaussian_blur", kernel_size=4)
    with pytest.raises(ValueError):
        TransformSpec("gaussian_blur", kernel_size=1)
    with pytest.raises(ValueError):
        TransformSpec("gaussian_noise", noise_sigma=-1)
    with pytest.raises(ValueError):
        TransformSpec("resize_restore", scale=0.4)
    with pytest.raises(ValueError):
        TransformSpec("crop_restore", crop_fraction=0.3)
    with pytest.raises(ValueError):
        TransformSpec("occlusion", occlusion_fraction=0.5)
    with pytest.raises(ValueError):
        TransformSpec("sepia")


def test_kernel_sums_to_one():
    k = gaussian_kernel(5, 5 / 3)
    assert k.shape == (5, 5)
    assert k.sum() == pytest.approx(1.0, abs=1e-12)


def test_identity_is_exact():
    img = Image(np.random.default_rng(0).uniform(size=(8, 8, 3)))
    out = apply_transform(TransformSpec("identity"), img)
    np.testing.assert_array_equal(out.pixels, img.pixels)


def test_blur_preserves_constant_image():
    img = Image(np.full((16, 16, 3), 0.42))
    out = apply_transform(TransformSpec("gaussian_blur", kernel_size=3), img)
    np.testing.assert_allclose(out.pixels, 0.42, rtol=1e-12)


def test_noise_sample_std_near_nominal():
    img = Image(np.full((32, 32, 3), 0.5))
    spec = TransformSpec("gaussian_noise", noise_sigma=5.0, seed=123)
    out = apply_transform(spec, img)
    sample_std = np.std(out.pixels - img.pixels)
    assert abs(sample_std - 5 / 255) <= 0.1 * (5 / 255)


def test_noise_is_fixed_per_spec_seed():
    img = Image(np.random.default_rng(1).uniform(0.2, 0.8, size=(8, 8, 3)))
    spec = TransformSpec("gaussian_noise", noise_sigma=5.0, seed=9)
    a = apply_transform(spec, img).pixels
    b = apply_transform(spec, img).pixels
    np.testing.assert_array_equal(a, b)
    c = apply_transform(spec.with_seed(10), img).pixels
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("spec", [
    TransformSpec("identity"),
    TransformSpec("gaussian_blur", kernel_size=3),
    TransformSpec("gaussian_blur", kernel_size=5),
    TransformSpec("gaussian_noise", noise_sigma=5.0, seed=3),
    TransformSpec("resize_restore", scale=0.8, seed=3),
    TransformSpec("resize_restore", scale=1.25, seed=3),
    TransformSpec("crop_restore", crop_fraction=0.85, seed=3),
    TransformSpec("occlusion", occlusion_fraction=0.1, seed=3),
], ids=lambda s: f"{s.kind}-{s.label()}")
def test_shape_and_range_preserved(spec):
    img = Image(np.random.default_rng(2).uniform(size=(16, 16, 3)))
    out = apply_transform(spec, img)
    assert out.pixels.shape == img.pixels.shape
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


@pytest.mark.parametrize("spec,rtol", [
    (TransformSpec("identity"), 1e-4),
    (TransformSpec("gaussian_blur", kernel_size=3), 1e-4),
    (TransformSpec("gaussian_noise", noise_sigma=3.0, seed=5), 1e-4),
    (TransformSpec("resize_restore", scale=0.75, seed=5), 1e-3),
    (TransformSpec("crop_restore", crop_fraction=0.75, seed=5), 1e-4),
    (TransformSpec("occlusion", occlusion_fraction=0.2, seed=5), 1e-4),
], ids=lambda v: v.kind if isinstance(v, TransformSpec) else str(v))
def test_gradient_through_encoder_matches_oracle(spec, rtol):
    params = init_encoder(EncoderConfig(image_size=8, patch_size=4,
                                        encoder_width=8, embed_dim=5, seed=1))
    # pixels kept away from 0/1 so the final clamp is locally linear
    x0 = np.random.default_rng(6).uniform(0.25, 0.75, size=(8, 8, 3))
    def f(x):
        return ts.tsum(embed(params, apply_transform_tensor(spec, x)))
    leaf = Tensor(x0, requires_grad=True)
    backward(f(leaf))
    numeric = finite_diff_gradient(f, Tensor(x0))
    np.testing.assert_allclose(leaf.grad, numeric, rtol=rtol, atol=1e-8)


@pytest.mark.parametrize("kind,fraction", [("crop_restore", 0.75), ("occlusion", 0.25)])
def test_gradient_is_zero_exactly_on_discarded_pixels(kind, fraction):
    spec = TransformSpec(kind, crop_fraction=fraction, occlusion_fraction=fraction,
                         seed=8)
    x0 = np.random.default_rng(9).uniform(0.3, 0.7, size=(8, 8, 3))
    leaf = Tensor(x0, requires_grad=True)
    backward(ts.tsum(ts.tanh(apply_transform_tensor(spec, leaf))))
    zero = leaf.grad == 0.0
    out = apply_transform_tensor(spec, Tensor(x0)).data
    if kind == "occlusion":
        discarded = out == 0.0
    else:
        discarded = np.broadcast_to((out == 0.0).all(axis=2, keepdims=True), out.shape)
    assert zero.sum() == discarded.sum() > 0
    assert np.array_equal(zero, discarded)


def test_policy_validation():
    with pytest.raises(ValueError):
        EotPolicy(candidates=())
    cand = (TransformSpec("identity"),)
    with pytest.raises(ValueError):
        EotPolicy(candidates=cand, weights=(1.0, 2.0))
    with pytest.raises(ValueError):
        EotPolicy(candidates=cand, weights=(0.0,))
    with pytest.raises(ValueError):
        EotPolicy(candidates=cand, per_iteration=0)


def test_single_candidate_policy_always_returns_it():
    policy = EotPolicy(candidates=(TransformSpec("gaussian_blur", kernel_size=3),))
    for it in range(5):
        specs = sample_transforms(policy, it)
        assert [s.kind for s in specs] == ["gaussian_blur"]


def test_sampling_is_deterministic_per_seed_and_iteration():
    policy = default_eot_policy(seed=42)
    seq1 = [sample_transforms(policy, it) for it in range(10)]
    seq2 = [sample_transforms(policy, it) for it in range(10)]
    assert seq1 == seq2
    assert seq1 != [sample_transforms(default_eot_policy(seed=43), it)
                    for it in range(10)]


def test_uniform_draws_are_balanced():
    policy = default_eot_policy(seed=0)
    counts: dict[str, int] = {}
    for it in range(1000):
        for s in sample_transforms(policy, it):
            counts[s.kind] = counts.get(s.kind, 0) + 1
    assert sum(counts.values()) == 1000
    for kind, n in counts.items():
        assert 150 <= n <= 250, (kind, n)


def test_weighted_sampling_respects_weights():
    policy = EotPolicy(
        candidates=(TransformSpec("identity"), TransformSpec("gaussian_noise")),
        weights=(3.0, 1.0), seed=5)
    kinds = [sample_transforms(policy, it)[0].kind for it in range(400)]
    share = kinds.count("identity") / len(kinds)
    assert 0.65 <= share <= 0.85


def test_evaluation_operations_table():
    ops = evaluation_operations()
    assert len(ops) == 7
    assert [o.label() for o in ops] == [
        "blur3x3", "blur5x5", "noise5", "noise10",
        "occlusion", "resize_restore", "crop_restore"]
