import time

import numpy as np
import pytest

from splatskin.gaussians import sigmoid
from splatskin.kinematics import (Pose, blend_transforms,
                                  forward_kinematics_matrices,
                                  lbs_transform_gaussian,
                                  nearest_vertex_weights)
from splatskin.nets import (DeformNets, MlpParams, cache_inference_artifacts,
                            compute_lbs_weights,
                            compute_lbs_weights_backward, encode_position,
                            encode_position_backward, lbs_offset_net,
                            lbs_weight_field, lbs_weight_field_backward,
                            make_mlp, mlp_backward, mlp_forward,
                            pose_refine_net, refine_pose)
from splatskin.rotations import axis_angle_to_matrix

from common import chain_scene, front_camera


def test_encode_zero_point():
    # layout is blockwise: [p, sin(2^0 pi p), cos(2^0 pi p), sin(2^1 ...), ...]
    enc = encode_position(np.zeros((1, 3)), 10)
    assert enc.shape == (1, 63)
    np.testing.assert_array_equal(enc[0, :3], 0.0)
    for i in range(10):
        np.testing.assert_array_equal(enc[0, 3 + 6 * i:6 + 6 * i], 0.0)
        np.testing.assert_array_equal(enc[0, 6 + 6 * i:9 + 6 * i], 1.0)


def test_encode_unit_x_first_band():
    enc = encode_position(np.array([[1.0, 0.0, 0.0]]), 1)
    assert enc.shape == (1, 9)
    # i=0 band of the x channel: sin(pi), cos(pi)
    np.testing.assert_allclose(enc[0, 3], np.sin(np.pi), atol=1e-15)
    np.testing.assert_allclose(enc[0, 6], -1.0, atol=1e-15)


@pytest.mark.parametrize("L", [0, 1, 4, 10])
def test_encode_length(L):
    enc = encode_position(np.zeros((2, 3)), L)
    assert enc.shape == (2, 3 + 6 * L)


def test_encode_backward_fd():
    rng = np.random.default_rng(0)
    p = rng.normal(0, 0.4, (3, 3))
    d_enc = rng.normal(size=(3, 27))
    d_p = encode_position_backward(p, d_enc, 4)
    eps = 1e-6
    for i in range(p.size):
        orig = p.flat[i]
        p.flat[i] = orig + eps
        fp = np.sum(encode_position(p, 4) * d_enc)
        p.flat[i] = orig - eps
        fm = np.sum(encode_position(p, 4) * d_enc)
        p.flat[i] = orig
        np.testing.assert_allclose(d_p.flat[i], (fp - fm) / (2 * eps),
                                   rtol=1e-6, atol=1e-9)


def test_net_layouts():
    rng = np.random.default_rng(1)
    pn = pose_refine_net(24, rng)
    assert pn.widths == [69, 128, 128, 69]
    assert np.abs(pn.weights[-1]).max() == 0.0  # identity at step 0
    ln = lbs_offset_net(24, rng)
    assert ln.widths == [63, 128, 128, 128, 24]
    assert np.abs(ln.weights[-1]).max() == 0.0


def test_mlp_zero_output_layer():
    rng = np.random.default_rng(2)
    net = make_mlp([5, 16, 3], rng)
    y, _ = mlp_forward(net, rng.normal(size=(7, 5)))
    np.testing.assert_array_equal(y, 0.0)


def test_mlp_single_linear_identity():
    net = MlpParams([np.eye(4)], [np.zeros(4)])
    x = np.arange(8.0).reshape(2, 4)
    y, _ = mlp_forward(net, x)
    np.testing.assert_array_equal(y, x)


def test_mlp_deterministic():
    rng = np.random.default_rng(3)
    net = make_mlp([6, 12, 2], rng, zero_init_output=False)
    x = rng.normal(size=(4, 6))
    a, _ = mlp_forward(net, x)
    b, _ = mlp_forward(net, x)
    np.testing.assert_array_equal(a, b)


def test_mlp_backward_fd():
    rng = np.random.default_rng(4)
    net = make_mlp([4, 8, 2], rng, zero_init_output=False)
    x = rng.normal(size=(5, 4))
    d_y = rng.normal(size=(5, 2))

    y, cache = mlp_forward(net, x)
    d_w, d_b, d_x = mlp_backward(net, cache, d_y)

    def value():
        return np.sum(mlp_forward(net, x)[0] * d_y)

    eps = 1e-5
    worst = 0.0
    for arr_list, grad_list in ((net.weights, d_w), (net.biases, d_b)):
        for arr, grad in zip(arr_list, grad_list):
            for i in range(arr.size):
                orig = arr.flat[i]
                arr.flat[i] = orig + eps
                fp = value()
                arr.flat[i] = orig - eps
                fm = value()
                arr.flat[i] = orig
                fd = (fp - fm) / (2 * eps)
                denom = max(abs(fd), abs(grad.flat[i]), 1e-8)
                worst = max(worst, abs(fd - grad.flat[i]) / denom)
    assert worst < 1e-6
    # input gradient too
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        fp = value()
        x.flat[i] = orig - eps
        fm = value()
        x.flat[i] = orig
        np.testing.assert_allclose(d_x.flat[i], (fp - fm) / (2 * eps),
                                   rtol=1e-6, atol=1e-10)


def test_mlp_backward_zero_upstream():
    rng = np.random.default_rng(5)
    net = make_mlp([4, 8, 2], rng, zero_init_output=False)
    _, cache = mlp_forward(net, rng.normal(size=(3, 4)))
    d_w, d_b, d_x = mlp_backward(net, cache, np.zeros((3, 2)))
    assert all(np.abs(g).max() == 0.0 for g in d_w + d_b)
    assert np.abs(d_x).max() == 0.0


def test_mlp_linear_input_grad_closed_form():
    rng = np.random.default_rng(6)
    W = rng.normal(size=(4, 3))
    net = MlpParams([W], [np.zeros(3)])
    x = rng.normal(size=(2, 4))
    d_y = rng.normal(size=(2, 3))
    _, cache = mlp_forward(net, x)
    _, _, d_x = mlp_backward(net, cache, d_y)
    np.testing.assert_allclose(d_x, d_y @ W.T, atol=1e-14)


def test_lbs_weights_zero_offsets():
    rng = np.random.default_rng(7)
    base = rng.uniform(0.0, 1.0, (10, 5))
    base /= base.sum(axis=1, keepdims=True)
    w = compute_lbs_weights(base, np.zeros((10, 5)))
    np.testing.assert_allclose(w, base, atol=1e-6)


def test_lbs_weights_uniform_base_is_softmax():
    rng = np.random.default_rng(8)
    o = rng.normal(size=(4, 6))
    base = np.full((4, 6), 1.0 / 6.0)
    w = compute_lbs_weights(base, o)
    e = np.exp(o - o.max(axis=1, keepdims=True))
    np.testing.assert_allclose(w, e / e.sum(axis=1, keepdims=True),
                               rtol=1e-12)


def test_lbs_weights_one_hot_base():
    base = np.zeros((1, 4))
    base[0, 2] = 1.0
    w = compute_lbs_weights(base, np.zeros((1, 4)))
    assert w[0, 2] > 0.999
    # off components sit at the epsilon floor, not exactly zero
    assert np.all(w[0, [0, 1, 3]] > 0.0)
    assert np.all(w[0, [0, 1, 3]] < 1e-7)


def test_lbs_weights_rows_sum_one():
    rng = np.random.default_rng(9)
    base = rng.uniform(0.0, 1.0, (50, 8))
    base /= base.sum(axis=1, keepdims=True)
    w = compute_lbs_weights(base, rng.normal(0, 2, (50, 8)))
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-7)
    assert w.min() > 0.0


def test_lbs_weights_backward_fd():
    rng = np.random.default_rng(10)
    base = rng.uniform(0.0, 1.0, (3, 5))
    base /= base.sum(axis=1, keepdims=True)
    o = rng.normal(0, 0.5, (3, 5))
    d_w = rng.normal(size=(3, 5))
    w = compute_lbs_weights(base, o)
    _, d_o = compute_lbs_weights_backward(base, w, d_w)
    eps = 1e-6
    for i in range(o.size):
        orig = o.flat[i]
        o.flat[i] = orig + eps
        fp = np.sum(compute_lbs_weights(base, o) * d_w)
        o.flat[i] = orig - eps
        fm = np.sum(compute_lbs_weights(base, o) * d_w)
        o.flat[i] = orig
        np.testing.assert_allclose(d_o.flat[i], (fp - fm) / (2 * eps),
                                   rtol=1e-6, atol=1e-10)


def test_refine_pose_zero_net_is_identity():
    rng = np.random.default_rng(11)
    net = pose_refine_net(5, rng)
    pose = Pose(rng.normal(0, 0.4, (5, 3)), rng.normal(size=3))
    out = refine_pose(pose, net, root=0)
    np.testing.assert_array_equal(out.rotations, pose.rotations)
    np.testing.assert_array_equal(out.translation, pose.translation)


def test_refine_pose_correction_on_zero_pose():
    # bias the output so joint 2 gets a fixed correction about z
    rng = np.random.default_rng(12)
    net = pose_refine_net(4, rng)
    net.biases[-1] = np.zeros(9)
    net.biases[-1][5] = np.pi / 2  # joint 2 (non-root slot 1), z component
    pose = Pose.identity(4)
    out = refine_pose(pose, net, root=0)
    np.testing.assert_allclose(out.rotations[2], [0.0, 0.0, np.pi / 2],
                               atol=1e-12)
    np.testing.assert_array_equal(out.rotations[0], 0.0)  # root untouched


def test_refine_pose_small_corrections_compose():
    rng = np.random.default_rng(13)
    a, b = 0.02, 0.03
    net_a = pose_refine_net(3, rng)
    net_a.biases[-1][2] = a  # joint 1, z
    net_b = pose_refine_net(3, rng)
    net_b.biases[-1][2] = b
    pose = Pose.identity(3)
    once = refine_pose(refine_pose(pose, net_a), net_b)
    np.testing.assert_allclose(once.rotations[1], [0.0, 0.0, a + b],
                               atol=1e-6)


def test_refine_pose_matches_matrix_oracle():
    rng = np.random.default_rng(14)
    net = pose_refine_net(4, rng)
    net.weights[-1] = rng.normal(0, 0.05, net.weights[-1].shape)
    pose = Pose(rng.normal(0, 0.3, (4, 3)), np.zeros(3))
    out = refine_pose(pose, net, root=0)
    corr, _ = mlp_forward(net, pose.rotations[1:].reshape(1, -1))
    corr = corr.reshape(3, 3)
    for j in (1, 2, 3):
        want = axis_angle_to_matrix(corr[j - 1][None])[0] @ \
            axis_angle_to_matrix(pose.rotations[j][None])[0]
        got = axis_angle_to_matrix(out.rotations[j][None])[0]
        np.testing.assert_allclose(got, want, atol=1e-10)


def _posed_render(cloud, template, cam, w, pose_used):
    from splatskin.gaussians import build_covariance
    from splatskin.rasterizer import render
    jt = forward_kinematics_matrices(template, pose_used.local_matrices(),
                                     pose_used.translation)
    G, b = blend_transforms(w, jt)
    p, c = lbs_transform_gaussian(
        cloud.positions, build_covariance(cloud.unit_rotations(),
                                          cloud.log_scales), G, b)
    return render(p, c, sigmoid(cloud.opacity_logits), cloud.sh, cam,
                  np.zeros(3)).color


def test_cache_matches_live_render():
    template, cloud, nets, pose, cam = chain_scene(seed=15)
    poses = [pose, Pose(pose.rotations * 0.5, pose.translation)]
    weights, refined = cache_inference_artifacts(cloud, template, nets,
                                                 poses, template.root)
    assert weights.shape == (cloud.n, template.n_joints)
    assert refined.shape == (2, template.n_joints, 3)

    # live path: refine + weight field evaluated per frame
    base_w, _ = nearest_vertex_weights(template, cloud.positions)
    w_live, _ = lbs_weight_field(nets, base_w, cloud.positions)
    for k, p in enumerate(poses):
        live = _posed_render(cloud, template, cam, w_live,
                             refine_pose(p, nets.pose_net, template.root))
        cached = _posed_render(cloud, template, cam, weights,
                               Pose(refined[k], p.translation))
        np.testing.assert_array_equal(cached, live)


def test_cache_render_runs_without_nets(monkeypatch):
    # post-cache rendering must not evaluate any network
    template, cloud, nets, pose, cam = chain_scene(seed=16)
    weights, refined = cache_inference_artifacts(cloud, template, nets,
                                                 [pose], template.root)

    import splatskin.nets as nets_mod

    def boom(*a, **k):
        raise AssertionError("network evaluated after caching")

    monkeypatch.setattr(nets_mod, "mlp_forward", boom)
    img = _posed_render(cloud, template, cam, weights,
                        Pose(refined[0], pose.translation))
    assert np.isfinite(img).all()


def test_cached_rendering_not_slower():
    template, cloud, nets, pose, cam = chain_scene(per_bone=16, seed=17)
    weights, refined = cache_inference_artifacts(cloud, template, nets,
                                                 [pose], template.root)
    base_w, _ = nearest_vertex_weights(template, cloud.positions)

    def live():
        p = refine_pose(pose, nets.pose_net, template.root)
        w, _ = lbs_weight_field(nets, base_w, cloud.positions)
        return _posed_render(cloud, template, cam, w, p)

    def cached():
        return _posed_render(cloud, template, cam, weights,
                             Pose(refined[0], pose.translation))

    t_live = min(_time(live) for _ in range(5))
    t_cached = min(_time(cached) for _ in range(5))
    assert t_cached <= t_live * 1.5  # generous: cached does strictly less


def _time(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0
