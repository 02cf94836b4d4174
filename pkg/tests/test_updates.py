import math

import numpy as np
import pytest

from gradleak import nn
from gradleak import updates as up


def _sample(rng, spec):
    return rng.uniform(size=spec.input_shape), int(rng.integers(spec.num_classes))


def test_fedsgd_is_batch_mean_gradient(fc2, rng):
    params = nn.init_params(fc2, 0)
    batch = [_sample(rng, fc2) for _ in range(4)]
    u = up.fed_sgd_update(fc2, params, batch)
    assert u.grads.allclose(nn.backward(fc2, params, batch)[1], rtol=0, atol=0)
    assert u.provenance.mode == "FedSGD" and u.provenance.batch_size == 4


def test_fedavg_single_step_is_scaled_gradient(fc2, rng):
    params = nn.init_params(fc2, 0)
    batch = [_sample(rng, fc2) for _ in range(4)]
    u = up.fed_avg_update(fc2, params, batch, epochs=1, batch_size=4, lr=0.1, seed=0)
    g = nn.backward(fc2, params, batch)[1]
    assert u.grads.allclose(g * -0.1, rtol=1e-12, atol=1e-15)
    assert u.provenance.mode == "FedAvg"


def test_aggregate_mixed_mean(fc2, rng):
    params = nn.init_params(fc2, 0)
    us = [up.fed_sgd_update(fc2, params, [_sample(rng, fc2)]) for _ in range(4)]
    mixed = up.aggregate_mixed(us[0], us[1:], 3)
    expected = np.mean([u.grads.flat() for u in us], axis=0)
    np.testing.assert_allclose(mixed.grads.flat(), expected, atol=1e-15)
    with pytest.raises(ValueError):
        up.aggregate_mixed(us[0], us[1:], 2)


def test_dp_clip_without_noise_bounds_norm(fc2, rng):
    params = nn.init_params(fc2, 0)
    u = up.fed_sgd_update(fc2, params, [_sample(rng, fc2)])
    norm = np.linalg.norm(u.grads.flat())
    clipped = up.dp_clip_noise(u, norm / 4, 0.0, 0)
    assert np.linalg.norm(clipped.grads.flat()) == pytest.approx(norm / 4, rel=1e-12)
    untouched = up.dp_clip_noise(u, 10 * norm, 0.0, 0)
    np.testing.assert_array_equal(untouched.grads.flat(), u.grads.flat())


def test_dp_noise_statistics(fc2):
    params = nn.init_params(fc2, 0)
    u = up.fed_sgd_update(fc2, params, [(np.zeros((1, 8, 8)), 0)])
    zero = up.SharedUpdate(u.grads * 0.0, u.provenance)
    noisy = up.dp_clip_noise(zero, 1.0, 0.5, 7).grads.flat()
    assert noisy.std() == pytest.approx(0.5, rel=0.05)
    again = up.dp_clip_noise(zero, 1.0, 0.5, 7).grads.flat()
    np.testing.assert_array_equal(noisy, again)


def test_mask_fraction_and_count(fc2, rng):
    params = nn.init_params(fc2, 0)
    u = up.fed_sgd_update(fc2, params, [_sample(rng, fc2)])
    m = up.apply_mask(u, up.MaskSpec(fraction=0.1, selection_seed=3))
    assert len(m.indices(0)) == math.ceil(0.1 * 2080)
    assert len(m.indices(2)) == math.ceil(0.1 * 132)
    np.testing.assert_array_equal(m.observed(2), u.grads.layer_flat(2)[m.indices(2)])
    c = up.apply_mask(u, up.MaskSpec(count=16))
    assert [len(c.indices(i)) for i in (0, 2)] == [16, 16]
    with pytest.raises(ValueError):
        up.apply_mask(u, up.MaskSpec(count=5000))
    with pytest.raises(ValueError):
        up.MaskSpec(fraction=0.5, count=3)


def test_distances_oracle():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    assert up.distance_values(a, b, "L2") == pytest.approx(5.0)
    assert up.distance_values(a, b, "Cosine") == pytest.approx(1.0)
    assert up.distance_values(a, 3 * a, "Cosine") == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(up.DegenerateGradientError):
        up.distance_values(np.zeros(2), b, "Cosine")
    with pytest.raises(ValueError):
        up.distance_values(a, b, "L1")


def test_grad_distance_honours_mask(fc2, rng):
    params = nn.init_params(fc2, 0)
    u = up.fed_sgd_update(fc2, params, [_sample(rng, fc2)])
    v = up.fed_sgd_update(fc2, params, [_sample(rng, fc2)])
    m = up.apply_mask(u, up.MaskSpec(count=5))
    d = up.grad_distance(v, m, "L2", [0, 2])
    diff = np.concatenate([(v.grads.layer_flat(i) - u.grads.layer_flat(i))[m.indices(i)] for i in (0, 2)])
    assert d == pytest.approx(diff @ diff, rel=1e-12)


def test_zero_distance_at_truth(lenet8, rng):
    params = nn.init_params(lenet8, 0)
    x, y = _sample(rng, lenet8)
    obs = up.fed_sgd_update(lenet8, params, [(x, y)])
    d, dx, _ = up.grad_of_grad_distance(lenet8, params, obs, x, y, "L2", [0, 3])
    assert d == 0.0
    np.testing.assert_allclose(dx, 0.0, atol=1e-14)


@pytest.mark.parametrize("kind", up.DISTANCES)
@pytest.mark.parametrize("hard", [True, False])
def test_grad_of_grad_backends_agree(lenet8, kind, hard):
    rng = np.random.default_rng(5)
    params = nn.init_params(lenet8, 1)
    obs = up.fed_sgd_update(lenet8, params, [_sample(rng, lenet8)])
    x = rng.uniform(size=lenet8.input_shape)
    y = 2 if hard else rng.normal(size=4)
    da, dxa, dya = up.grad_of_grad_distance(lenet8, params, obs, x, y, kind, [5, 7])
    df, dxf, dyf = up.grad_of_grad_distance(lenet8, params, obs, x, y, kind, [5, 7], backend="FD")
    assert da == pytest.approx(df, rel=1e-12)
    np.testing.assert_allclose(dxa, dxf, rtol=1e-3, atol=1e-3 * np.abs(dxa).max())
    if hard:
        assert dya is None and dyf is None
    else:
        np.testing.assert_allclose(dya, dyf, rtol=1e-3, atol=1e-3 * np.abs(dya).max())


def test_grad_of_grad_rejects_bad_subset(lenet8):
    params = nn.init_params(lenet8, 0)
    obs = up.fed_sgd_update(lenet8, params, [(np.zeros((1, 8, 8)), 0)])
    with pytest.raises(ValueError, match="no parameters"):
        up.grad_of_grad_distance(lenet8, params, obs, np.zeros((1, 8, 8)), 0, "L2", [1])
    with pytest.raises(nn.ShapeError):
        up.grad_of_grad_distance(lenet8, params, obs, np.zeros((1, 4, 4)), 0, "L2", [0])


def test_input_gradient_jacobian_backends(lenet8, rng):
    params = nn.init_params(lenet8, 2)
    x, y = _sample(rng, lenet8)
    for layer in (0, 7):
        ja = up.input_gradient_jacobian(lenet8, params, x, y, layer)
        jf = up.input_gradient_jacobian(lenet8, params, x, y, layer, backend="FD")
        assert ja.shape == (nn.backward(lenet8, params, [(x, y)])[1].layer_flat(layer).size, 64)
        np.testing.assert_allclose(ja.values, jf.values, atol=1e-4)
    with pytest.raises(ValueError, match="no parameters"):
        up.input_gradient_jacobian(lenet8, params, x, y, 1)


def test_jacobian_of_linear_layer_oracle(rng):
    # single linear layer + CE: dL/dW = (softmax(Wx+b) - e_y) x^T; differentiate by hand
    spec = nn.parse_architecture("O", (1, 2, 2), 3)
    params = nn.init_params(spec, 0)
    x, y = rng.uniform(size=(1, 2, 2)), 1
    W = params[0]["weight"]
    xf = x.reshape(-1)
    s = np.exp(W @ xf) / np.exp(W @ xf).sum()
    d = s - np.eye(3)[y]
    ds = np.diag(s) - np.outer(s, s)  # ds/dz
    dd_dx = ds @ W  # (3, 4)
    # dG_ij/dx_k = dd_i/dx_k x_j + d_i [j==k]
    jw = np.einsum("ik,j->ijk", dd_dx, xf) + np.einsum("i,jk->ijk", d, np.eye(4))
    expected = np.concatenate([jw.reshape(12, 4), dd_dx])
    got = up.input_gradient_jacobian(spec, params, x, y, 0).values
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_consecutive_layer_sets(lenet8):
    assert up.consecutive_layer_sets(lenet8) == [(0, 3), (3, 5), (5, 7)]
