import numpy as np
import pytest

from demesh import facegen, stn
from demesh.featnet import (EARLY_CONV, FINAL_FEATURE, FeatureNet,
                            FeatureSpec, build_phi, extract_feature, load_phi,
                            save_phi, tap_activation)
from demesh.layers import (FrozenParameterError, ShapeError, adam_step,
                           grad_check)

SMALL_SPEC = FeatureSpec(in_h=16, in_w=16, widths=(8, 16), feature_width=32)


@pytest.fixture(scope="module")
def pretrained():
    return build_phi("pretrain", seed=3, spec=SMALL_SPEC, n_identities=8,
                     per_identity=24, steps=300, render_hw=(32, 24))


def test_fixed_random_same_seed_gives_identical_features():
    x = np.random.default_rng(0).uniform(size=(1, 16, 16))
    f1 = extract_feature(build_phi("fixed_random", 7, SMALL_SPEC), x)
    f2 = extract_feature(build_phi("fixed_random", 7, SMALL_SPEC), x)
    np.testing.assert_array_equal(f1, f2)

def test_extract_feature_is_deterministic_per_call(pretrained):
    x = np.random.default_rng(1).uniform(size=(1, 16, 16))
    np.testing.assert_array_equal(extract_feature(pretrained, x),
                                  extract_feature(pretrained, x))

def test_feature_width_matches_spec(pretrained):
    x = np.zeros((1, 16, 16))
    f = extract_feature(pretrained, x)
    assert f.shape == (32,)
    assert np.all(np.isfinite(f))

def test_pretrain_accuracy_clears_chance(pretrained):
    assert pretrained.pretrain_accuracy is not None
    assert pretrained.pretrain_accuracy > 2.0 / 8.0

def test_final_tap_consistent_with_extract_feature(pretrained):
    x = np.random.default_rng(2).uniform(size=(1, 16, 16))
    np.testing.assert_array_equal(tap_activation(pretrained, x, FINAL_FEATURE),
                                  extract_feature(pretrained, x))

def test_early_tap_on_zero_image_is_bias_driven(pretrained):
    a = tap_activation(pretrained, np.zeros((1, 16, 16)), EARLY_CONV)
    b = tap_activation(pretrained, np.zeros((1, 16, 16)), EARLY_CONV)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a))
    # away from padding effects the map is constant per channel, driven by
    # the stacked biases
    interior = a[:, 1:-1, 1:-1].reshape(a.shape[0], -1)
    assert np.allclose(interior, interior[:, :1])

def test_unknown_tap_rejected(pretrained):
    with pytest.raises(KeyError, match="unknown tap"):
        tap_activation(pretrained, np.zeros((1, 16, 16)), "conv9")

def test_extent_mismatch_rejected(pretrained):
    with pytest.raises(ShapeError):
        extract_feature(pretrained, np.zeros((1, 8, 8)))

def test_distinct_images_do_not_reach_self_similarity(pretrained):
    rng = np.random.default_rng(4)
    a = extract_feature(pretrained, rng.uniform(size=(1, 16, 16)))
    b = extract_feature(pretrained, rng.uniform(size=(1, 16, 16)))
    cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    assert cos < 1.0

def _aligned_render(identity, seed, spec):
    img, eyes = facegen.render_face(identity, seed)
    return stn.align_face(img, eyes, spec.in_h, spec.in_w)

def test_intra_identity_similarity_exceeds_inter_identity(pretrained):
    rng = np.random.default_rng(5)
    feats = []
    for i in range(8):
        ident = facegen.sample_identity(f"probe{i}", int(rng.integers(2**32)),
                                        32, 24)
        group = [extract_feature(pretrained,
                                 _aligned_render(ident, int(rng.integers(2**32)),
                                                 SMALL_SPEC))
                 for _ in range(4)]
        feats.append(np.stack(group))
    norm = [g / np.linalg.norm(g, axis=1, keepdims=True) for g in feats]
    intra, inter = [], []
    for i in range(8):
        sims = norm[i] @ norm[i].T
        intra.extend(sims[np.triu_indices(4, k=1)])
        for j in range(i + 1, 8):
            inter.extend((norm[i] @ norm[j].T).ravel())
    assert np.mean(intra) > np.mean(inter)

def test_tap_gradient_matches_finite_differences():
    phi = build_phi("fixed_random", seed=9,
                    spec=FeatureSpec(in_h=8, in_w=8, widths=(4,),
                                     feature_width=8))
    rng = np.random.default_rng(9)
    weights = rng.normal(size=(1, 2, 8, 8))

    def fn(crop):
        acts = phi.forward_taps(crop, taps=(EARLY_CONV,))
        grad = phi.backward_taps({EARLY_CONV: weights})
        return float(np.sum(acts[EARLY_CONV] * weights)), grad

    assert grad_check(fn, rng.uniform(size=(1, 1, 8, 8))).passed

def test_two_tap_backward_matches_finite_differences():
    phi = build_phi("fixed_random", seed=10,
                    spec=FeatureSpec(in_h=8, in_w=8, widths=(4,),
                                     feature_width=8))
    rng = np.random.default_rng(10)
    w_early = rng.normal(size=(1, 2, 8, 8))
    w_final = rng.normal(size=(1, 8))

    def fn(crop):
        acts = phi.forward_taps(crop)
        value = float(np.sum(acts[EARLY_CONV] * w_early)
                      + np.sum(acts[FINAL_FEATURE] * w_final))
        grad = phi.backward_taps({EARLY_CONV: w_early, FINAL_FEATURE: w_final})
        return value, grad

    assert grad_check(fn, rng.uniform(size=(1, 1, 8, 8))).passed

def test_parameters_are_frozen_after_construction(pretrained):
    p = pretrained.params()[0]
    with pytest.raises(FrozenParameterError):
        adam_step(p, np.zeros_like(p.value), lr=0.1)

def test_save_load_round_trip_preserves_values_and_freeze(tmp_path, pretrained):
    path = tmp_path / "phi.ckpt"
    save_phi(pretrained, path)
    loaded = load_phi(path)
    assert all(p.frozen for p in loaded.params())
    x = np.random.default_rng(6).uniform(size=(1, 16, 16))
    np.testing.assert_array_equal(extract_feature(loaded, x),
                                  extract_feature(pretrained, x))

def test_pretrain_requires_enough_identities():
    with pytest.raises(ValueError, match="at least 2"):
        build_phi("pretrain", seed=0, spec=SMALL_SPEC, n_identities=1)

def test_unknown_mode_rejected():
    with pytest.raises(ValueError, match="unknown mode"):
        build_phi("finetune", seed=0, spec=SMALL_SPEC)
