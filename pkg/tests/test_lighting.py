import math

import numpy as np
import pytest
import torch
from scipy.special import sph_harm_y

from handgs.errors import DimensionError, DomainError
from handgs.lighting import (DualEnvironment, LightingNet, ShCoefficients, num_coeffs, sh_basis, sh_basis_batch,
                             shade, shade_splat)
from handgs.mesh import PoseFrame
from handgs.surfgauss import WorldSplat


def unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def real_sh_scipy(l, m, d):
    """Real SH from scipy's complex harmonics (Condon-Shortley phase included)."""
    theta = np.arccos(np.clip(d[:, 2], -1, 1))
    phi = np.arctan2(d[:, 1], d[:, 0])
    Y = sph_harm_y(l, abs(m), theta, phi)
    if m > 0:
        return math.sqrt(2) * (-1) ** m * Y.real
    if m < 0:
        return math.sqrt(2) * (-1) ** m * Y.imag
    return Y.real


def test_dc_and_band1_values():
    for d in ([0, 0, 1], [1, 0, 0], [0.6, 0.8, 0]):
        assert sh_basis(d, 0)[0] == pytest.approx(1 / (2 * math.sqrt(math.pi)), abs=1e-15)
    np.testing.assert_allclose(sh_basis([0, 0, 1], 1)[1:], [0, 0.48860251, 0], atol=1e-8)


def test_num_coeffs():
    assert [num_coeffs(n) for n in range(5)] == [1, 4, 9, 16, 25]


def test_basis_matches_scipy_up_to_fixed_sign(rng):
    d = unit(rng, 500)
    ours = sh_basis_batch(torch.as_tensor(d), 4).numpy()
    for l in range(5):
        for m in range(-l, l + 1):
            k = l * (l + 1) + m
            ref = real_sh_scipy(l, m, d)
            sign = np.sign(np.dot(ours[:, k], ref))
            np.testing.assert_allclose(ours[:, k], sign * ref, atol=1e-12)


def test_band1_sign_convention(rng):
    d = unit(rng, 10)
    b = sh_basis_batch(torch.as_tensor(d), 1).numpy()
    C1 = math.sqrt(3 / (4 * math.pi))
    np.testing.assert_allclose(b[:, 1:], np.stack([-C1 * d[:, 1], C1 * d[:, 2], -C1 * d[:, 0]], 1), atol=1e-15)


def test_monte_carlo_orthonormality():
    rng = np.random.default_rng(7)
    d = unit(rng, 100_000)
    B = sh_basis_batch(torch.as_tensor(d), 4).numpy()
    gram = 4 * math.pi * B.T @ B / len(d)
    assert np.abs(gram - np.eye(25)).max() < 2e-2


def test_bad_inputs():
    with pytest.raises(DomainError):
        sh_basis([1, 1, 0], 1)
    with pytest.raises(DomainError):
        sh_basis([0, 0, 1], 5)
    with pytest.raises(DimensionError):
        ShCoefficients(2, np.zeros((3, 4)))


# ---------------------------------------------------------------- shading


def test_shade_dc_only(rng):
    l = ShCoefficients(2, np.zeros((3, 9)))
    l.coeffs[:, 0] = [1.0, 2.0, 0.5]
    alb = np.array([0.2, 0.5, 0.9])
    for n in unit(rng, 5):
        np.testing.assert_allclose(shade(alb, l, n), alb * l.coeffs[:, 0] * 0.28209479177387814, rtol=1e-14)
    np.testing.assert_array_equal(shade([0, 0, 0], l, [0, 0, 1]), [0, 0, 0])


def test_shade_order1_against_polynomial(rng):
    l = ShCoefficients(1, rng.normal(size=(3, 4)))
    alb = rng.uniform(0, 1, 3)
    C0, C1 = 0.5 / math.sqrt(math.pi), math.sqrt(3 / (4 * math.pi))
    for n in unit(rng, 1000):
        x, y, z = n
        poly = l.coeffs[:, 0] * C0 - l.coeffs[:, 1] * C1 * y + l.coeffs[:, 2] * C1 * z - l.coeffs[:, 3] * C1 * x
        np.testing.assert_allclose(shade(alb, l, n), alb * np.maximum(poly, 0), rtol=1e-13, atol=1e-15)


def test_shade_linear_in_coefficients(rng):
    # a dominant DC term keeps irradiance positive so the clamp stays inactive
    l1 = ShCoefficients(2, rng.normal(size=(3, 9)) * 0.1 + np.eye(1, 9) * 5)
    l2 = ShCoefficients(2, rng.normal(size=(3, 9)) * 0.1 + np.eye(1, 9) * 5)
    alb = rng.uniform(0, 1, 3)
    for n in unit(rng, 20):
        mix = ShCoefficients(2, 0.3 * l1.coeffs + 1.7 * l2.coeffs)
        np.testing.assert_allclose(shade(alb, mix, n), 0.3 * shade(alb, l1, n) + 1.7 * shade(alb, l2, n), rtol=1e-12)


def splats(rng, n):
    return WorldSplat(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.ones((n, 2)), unit(rng, n),
                      rng.uniform(0, 1, (n, 3)), np.ones(n))


def test_shade_splat_side_selection(rng):
    sp = splats(rng, 100)
    palm, back = ShCoefficients(2, rng.normal(size=(3, 9))), ShCoefficients(2, rng.normal(size=(3, 9)))
    env = DualEnvironment(palm, back)
    side = rng.integers(0, 2, 100)
    out = shade_splat(sp, env, side)
    for i in range(100):
        np.testing.assert_allclose(out[i], shade(sp.albedo[i], [palm, back][side[i]], sp.normal[i]), atol=1e-15)
    same = DualEnvironment(palm, palm)
    np.testing.assert_array_equal(shade_splat(sp, same, 0), shade_splat(sp, same, 1))
    dc = ShCoefficients.constant(2, [1.0, 1.0, 1.0])
    doubled = DualEnvironment(ShCoefficients(2, 2 * dc.coeffs), dc)
    np.testing.assert_allclose(shade_splat(sp, doubled, 0), 2 * shade_splat(sp, doubled, 1), rtol=1e-15)


# ---------------------------------------------------------------- network


def test_zero_weights_return_bias(rng):
    net = LightingNet.create(3, order=2, hidden=(16, 16), rng=rng)
    net.weights[-1][:] = 0
    net.biases[-1] = rng.normal(size=54)
    for _ in range(3):
        env = net.predict_environments(PoseFrame(rng.normal(size=(3, 3)), rng.normal(size=3)))
        np.testing.assert_array_equal(env.l_palm.coeffs, net.biases[-1][:27].reshape(3, 9))
        np.testing.assert_array_equal(env.l_back.coeffs, net.biases[-1][27:].reshape(3, 9))


def test_default_network_gives_uniform_irradiance(rng):
    net = LightingNet.create(2, order=2, rng=rng)
    env = net.predict_environments(PoseFrame(rng.normal(size=(2, 3)), np.zeros(3)))
    for n in unit(rng, 10):
        np.testing.assert_allclose(shade([1, 1, 1], env.l_palm, n), 1.0, rtol=1e-14)


def test_network_deterministic_and_dimension_checked(rng):
    net = LightingNet.create(2, order=1, rng=rng)
    net.weights[-1] = rng.normal(size=net.weights[-1].shape)
    pose = PoseFrame(rng.normal(size=(2, 3)), np.zeros(3))
    a, b = net.predict_environments(pose), net.predict_environments(pose)
    assert a.stacked().tobytes() == b.stacked().tobytes()
    with pytest.raises(DimensionError):
        net.predict_environments(PoseFrame(np.zeros((3, 3)), np.zeros(3)))


def test_network_pose_jacobian_matches_central_differences(rng):
    from handgs.lighting import mlp_forward

    net = LightingNet.create(2, order=1, hidden=(8, 8), rng=rng)
    net.weights[-1] = rng.normal(scale=0.3, size=net.weights[-1].shape)
    layers = [(torch.as_tensor(W), torch.as_tensor(b)) for W, b in zip(net.weights, net.biases)]
    x0 = torch.as_tensor(rng.normal(scale=0.5, size=6))
    J = torch.autograd.functional.jacobian(lambda x: mlp_forward(layers, x, net.activation), x0).numpy()
    h = 1e-6
    for i in range(6):
        e = torch.zeros(6, dtype=torch.float64)
        e[i] = h
        fd = ((mlp_forward(layers, x0 + e, net.activation) - mlp_forward(layers, x0 - e, net.activation)) / (2 * h)).numpy()
        np.testing.assert_allclose(J[:, i], fd, rtol=1e-4, atol=1e-7)


def test_environment_json_round_trip(rng):
    env = DualEnvironment(ShCoefficients(2, rng.normal(size=(3, 9))), ShCoefficients(2, rng.normal(size=(3, 9))))
    back = DualEnvironment.from_json(env.to_json())
    assert back.stacked().tobytes() == env.stacked().tobytes()
