import numpy as np
import pytest

from splatskin.gaussians import (GaussianCloud, build_covariance,
                                 build_covariance_backward, eval_density,
                                 inverse_sigmoid, kl_divergence,
                                 kl_divergence_fast, sigmoid)
from splatskin.rotations import quat_normalize, quat_to_matrix, \
    random_unit_quaternion

from common import random_cloud


def test_covariance_identity():
    cov = build_covariance(np.array([[1.0, 0, 0, 0]]), np.zeros((1, 3)))[0]
    np.testing.assert_allclose(cov, np.eye(3), atol=1e-15)


def test_covariance_rotated_anisotropic():
    # 90deg about z with scale (2,1,1): R diag(4,1,1) R^T = diag(1,4,1)
    s = np.sqrt(0.5)
    q = np.array([[s, 0.0, 0.0, s]])
    ls = np.array([[np.log(2.0), 0.0, 0.0]])
    cov = build_covariance(q, ls)[0]
    np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)


def test_covariance_det_and_eigvals():
    rng = np.random.default_rng(0)
    q = random_unit_quaternion(rng, 100)
    ls = rng.uniform(-2.0, 1.0, (100, 3))
    cov = build_covariance(q, ls)
    np.testing.assert_allclose(np.linalg.det(cov),
                               np.exp(2.0 * ls.sum(axis=1)), rtol=1e-10)
    # eigenvalues = exp(2 ls) up to permutation
    ev = np.sort(np.linalg.eigvalsh(cov), axis=1)
    np.testing.assert_allclose(ev, np.sort(np.exp(2 * ls), axis=1),
                               rtol=1e-8, atol=1e-12)
    sym = np.abs(cov - cov.transpose(0, 2, 1)).max()
    assert sym < 1e-12


def test_covariance_generic_oracle():
    rng = np.random.default_rng(1)
    q = random_unit_quaternion(rng, 20)
    ls = rng.uniform(-2.0, 0.5, (20, 3))
    R = quat_to_matrix(q)
    want = np.einsum("nij,nj,nkj->nik", R, np.exp(2 * ls), R)
    np.testing.assert_allclose(build_covariance(q, ls), want, atol=1e-12)


def test_covariance_rejects_nonfinite():
    with pytest.raises(ValueError):
        build_covariance(np.array([[np.nan, 0, 0, 0]]), np.zeros((1, 3)))


def test_covariance_backward_fd():
    # backward chains raw quaternion -> normalize -> covariance
    rng = np.random.default_rng(2)
    q = rng.normal(size=(3, 4))
    ls = rng.uniform(-1.5, 0.5, (3, 3))
    d_cov = rng.normal(size=(3, 3, 3))
    d_cov = d_cov + d_cov.transpose(0, 2, 1)  # symmetric upstream
    d_q, d_ls = build_covariance_backward(q, ls, d_cov)

    def value():
        return np.sum(build_covariance(quat_normalize(q), ls) * d_cov)

    eps = 1e-6
    for arr, grad in ((q, d_q), (ls, d_ls)):
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + eps
            fp = value()
            arr.flat[i] = orig - eps
            fm = value()
            arr.flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            np.testing.assert_allclose(grad.flat[i], fd, rtol=1e-5,
                                       atol=1e-9)


def test_density_at_center():
    # normalized 3D Gaussian peak: (2 pi)^(-3/2)
    val = eval_density(np.zeros((1, 3)), np.zeros(3), np.eye(3))
    np.testing.assert_allclose(val, (2 * np.pi) ** -1.5, rtol=1e-12)


def test_density_unit_offset():
    val = eval_density(np.array([[1.0, 0.0, 0.0]]), np.zeros(3), np.eye(3))
    np.testing.assert_allclose(val, (2 * np.pi) ** -1.5 * np.exp(-0.5),
                               rtol=1e-12)


def test_density_anisotropic_oracle():
    rng = np.random.default_rng(3)
    q = random_unit_quaternion(rng)
    ls = rng.uniform(-1.0, 0.5, 3)
    cov = build_covariance(q[None], ls[None])[0]
    mean = rng.normal(size=3)
    x = rng.normal(size=(10, 3))
    diff = x - mean
    m = np.einsum("ni,ij,nj->n", diff, np.linalg.inv(cov), diff)
    want = np.exp(-0.5 * m) / np.sqrt((2 * np.pi) ** 3 * np.linalg.det(cov))
    np.testing.assert_allclose(eval_density(x, mean, cov), want, rtol=1e-10)


def test_density_singular_names_index():
    with pytest.raises(ValueError, match="17"):
        eval_density(np.zeros((1, 3)), np.zeros(3), np.zeros((3, 3)),
                     index=17)


# KL reference path: the textbook formula with dense inverse/determinant.

def _kl_pair(rng):
    q = random_unit_quaternion(rng, 2)
    ls = rng.uniform(-2.0, 0.7, (2, 3))
    p = rng.normal(0.0, 0.5, (2, 3))
    return p, q, ls


def test_kl_identical_is_zero():
    rng = np.random.default_rng(4)
    p, q, ls = _kl_pair(rng)
    c = build_covariance(q, ls)
    assert kl_divergence(p[0], c[0], p[0], c[0]) == 0.0


def test_kl_unit_translation():
    val = kl_divergence(np.zeros(3), np.eye(3),
                        np.array([1.0, 0.0, 0.0]), np.eye(3))
    np.testing.assert_allclose(val, 0.5, atol=1e-12)


def test_kl_isotropic_scale_anchor():
    # KL(N(0,I) || N(0,4I)) = (0.75 + ln 64 - 3) / 2
    want = 0.5 * (0.75 + np.log(64.0) - 3.0)
    got = kl_divergence(np.zeros(3), np.eye(3), np.zeros(3), 4.0 * np.eye(3))
    np.testing.assert_allclose(got, want, rtol=1e-12)
    np.testing.assert_allclose(got, 0.95444, atol=5e-6)


def test_kl_asymmetric():
    rng = np.random.default_rng(5)
    p, q, ls = _kl_pair(rng)
    c = build_covariance(q, ls)
    a = kl_divergence(p[0], c[0], p[1], c[1])
    b = kl_divergence(p[1], c[1], p[0], c[0])
    assert abs(a - b) > 1e-3


def test_kl_nonnegative_sweep():
    rng = np.random.default_rng(6)
    for _ in range(200):
        p, q, ls = _kl_pair(rng)
        c = build_covariance(q, ls)
        assert kl_divergence(p[0], c[0], p[1], c[1]) >= -1e-12


def test_kl_rigid_invariance():
    rng = np.random.default_rng(7)
    p, q, ls = _kl_pair(rng)
    c = build_covariance(q, ls)
    R = quat_to_matrix(random_unit_quaternion(rng))
    t = rng.normal(size=3)
    a = kl_divergence(p[0], c[0], p[1], c[1])
    b = kl_divergence(R @ p[0] + t, R @ c[0] @ R.T,
                      R @ p[1] + t, R @ c[1] @ R.T)
    np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-10)


def test_kl_fast_anchors():
    e = np.array([1.0, 0.0, 0.0, 0.0])
    z3 = np.zeros(3)
    assert kl_divergence_fast(z3, e, z3, z3, e, z3) == 0.0
    np.testing.assert_allclose(
        kl_divergence_fast(z3, e, z3, np.array([1.0, 0, 0]), e, z3),
        0.5, atol=1e-12)
    np.testing.assert_allclose(
        kl_divergence_fast(z3, e, z3, z3, e, np.full(3, np.log(2.0))),
        0.5 * (0.75 + np.log(64.0) - 3.0), rtol=1e-12)


def test_kl_fast_matches_generic_1000_pairs():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        p, q, ls = _kl_pair(rng)
        c = build_covariance(q, ls)
        want = kl_divergence(p[0], c[0], p[1], c[1])
        got = kl_divergence_fast(p[0], q[0], ls[0], p[1], q[1], ls[1])
        worst = max(worst, abs(got - want) / max(abs(want), 1e-12))
    assert worst < 1e-9


def test_kl_fast_scale_floor():
    e = np.array([1.0, 0.0, 0.0, 0.0])
    tiny = np.full(3, np.log(1e-9))  # below the 1e-6 activation floor
    val = kl_divergence_fast(np.zeros(3), e, tiny,
                             np.array([0.01, 0, 0]), e, np.zeros(3))
    assert np.isfinite(val)


def test_cloud_invariants_and_select():
    rng = np.random.default_rng(9)
    cloud = random_cloud(12, rng, sh_degree=2)
    assert cloud.n == 12
    assert cloud.sh_degree == 2
    sub = cloud.select(np.array([3, 5, 7]))
    assert sub.n == 3
    np.testing.assert_array_equal(sub.positions, cloud.positions[[3, 5, 7]])
    cp = cloud.copy()
    cp.positions += 1.0
    assert np.abs(cp.positions - cloud.positions).min() > 0.5


def test_stats_accumulate_and_reset():
    rng = np.random.default_rng(10)
    cloud = random_cloud(6, rng)
    norms = rng.uniform(0.0, 1.0, 6)
    vecs = rng.normal(size=(6, 3))
    vis = np.array([True, False, True, True, False, True])
    cloud.accumulate_stats(norms, vecs, vis)
    cloud.accumulate_stats(norms, vecs, vis)
    np.testing.assert_allclose(cloud.grad_accum[vis], 2 * norms[vis])
    np.testing.assert_array_equal(cloud.grad_accum[~vis], 0.0)
    np.testing.assert_array_equal(cloud.grad_count[vis], 2)
    np.testing.assert_allclose(cloud.grad_vec_accum[vis], 2 * vecs[vis])
    cloud.reset_stats()
    assert cloud.grad_accum.max() == 0.0
    assert cloud.grad_count.max() == 0
    assert np.abs(cloud.grad_vec_accum).max() == 0.0


def test_sigmoid_inverse_round_trip():
    x = np.linspace(-6, 6, 13)
    np.testing.assert_allclose(inverse_sigmoid(sigmoid(x)), x, atol=1e-9)
