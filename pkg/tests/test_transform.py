import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reprsteer.core import (CompiledCombination, MultiAttributeWeights, TransformBlockConfig, apply_transform,
                            combine_transforms, init_transform, load_model, load_transform, save_transform,
                            transform_backward, transform_forward)
from reprsteer.errors import ConfigError
from conftest import random_transform


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5, 12), elements=st.floats(-50, 50)), st.integers(0, 100),
       st.sampled_from(["gelu", "tanh", "relu", "identity"]))
def test_fresh_transform_is_identity(h, seed, act):
    tau = init_transform(TransformBlockConfig(12, activation=act, seed=seed))
    np.testing.assert_array_equal(apply_transform(tau, h), h)


@pytest.mark.parametrize("hidden,kappa,expected", [(32, 0.5, 16), (5, 0.5, 3), (7, 0.25, 2), (1024, 0.5, 512)])
def test_intermediate_width(hidden, kappa, expected):
    cfg = TransformBlockConfig(hidden, kappa=kappa)
    assert cfg.intermediate_dim == expected
    tau = init_transform(cfg)
    assert tau.sub_blocks[0]["W_in"].shape == (hidden, expected)
    assert len(tau.sub_blocks) == 2


@pytest.mark.parametrize("kwargs", [dict(hidden_dim=1, kappa=0.5), dict(hidden_dim=8, num_blocks=0),
                                    dict(hidden_dim=8, activation="swish"), dict(hidden_dim=0)])
def test_invalid_transform_config(kwargs):
    with pytest.raises(ConfigError):
        TransformBlockConfig(**kwargs)


def test_dimension_mismatch_rejected():
    tau = init_transform(TransformBlockConfig(8))
    with pytest.raises(ConfigError):
        apply_transform(tau, np.zeros((2, 6)))


@pytest.mark.parametrize("alphas", [(0.5, 0.6), (-0.1, 1.1), (1.0,)])
def test_invalid_weights(alphas):
    taus = [random_transform(6, seed=s) for s in range(2)]
    with pytest.raises(ConfigError):
        combine_transforms(taus, alphas, np.zeros((1, 6)))


def test_weights_tolerance():
    MultiAttributeWeights((0.3, 0.7 + 5e-10))
    with pytest.raises(ConfigError):
        MultiAttributeWeights((0.3, 0.7 + 1e-8))


def test_single_weight_degenerates_to_one_transform():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(4, 10))
    t1, t2 = random_transform(10, seed=1), random_transform(10, seed=2)
    np.testing.assert_array_equal(combine_transforms([t1, t2], (1.0, 0.0), h), apply_transform(t1, h))
    np.testing.assert_allclose(combine_transforms([t1, t2], (0.25, 0.75), h),
                               0.25 * apply_transform(t1, h) + 0.75 * apply_transform(t2, h))


def test_compiled_combination_matches_reference(backend):
    rng = np.random.default_rng(1)
    h = rng.normal(size=(5, 10))
    taus = [random_transform(10, seed=s, activation=a) for s, a in [(1, "gelu"), (2, "tanh")]]
    comb = CompiledCombination(taus, (0.4, 0.6), backend=backend)
    np.testing.assert_allclose(comb(h), combine_transforms(taus, (0.4, 0.6), h), atol=1e-12)
    assert not CompiledCombination([], None, backend=backend)
    np.testing.assert_array_equal(CompiledCombination([], None, backend=backend)(h), h)


@pytest.mark.parametrize("act", ["gelu", "tanh", "relu", "identity"])
def test_transform_backward_finite_difference(act):
    rng = np.random.default_rng(4)
    tau = random_transform(6, seed=3, activation=act)
    h = rng.normal(size=(2, 3, 6))
    w = rng.normal(size=(2, 3, 6))

    def f(x):
        return float((apply_transform(tau, x) * w).sum())

    out, cache = transform_forward(tau, h)
    grads, dh = transform_backward(tau, cache, w)
    eps = 1e-6
    for i, sb in enumerate(tau.sub_blocks):
        for name, p in sb.items():
            for _ in range(3):
                idx = tuple(rng.integers(0, s) for s in p.shape)
                old = p[idx]
                p[idx] = old + eps
                up = f(h)
                p[idx] = old - eps
                down = f(h)
                p[idx] = old
                assert grads[i][name][idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-7)
    idx = (1, 2, 4)
    hp, hm = h.copy(), h.copy()
    hp[idx] += eps
    hm[idx] -= eps
    assert dh[idx] == pytest.approx((f(hp) - f(hm)) / (2 * eps), rel=1e-5, abs=1e-7)


def test_transform_roundtrip(tmp_path):
    tau = random_transform(8, seed=5, activation="tanh")
    path = save_transform(tmp_path / "tau.npz", tau)
    again = load_transform(path)
    assert again.config == tau.config
    for a, b in zip(again.sub_blocks, tau.sub_blocks):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
    with pytest.raises(ConfigError):
        load_model(path)
