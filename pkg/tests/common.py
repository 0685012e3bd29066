"""Shared fixture builders for the test suite."""

import numpy as np

from splatskin.density import init_from_template
from splatskin.gaussians import GaussianCloud, inverse_sigmoid
from splatskin.kinematics import Pose, SkinnedTemplate
from splatskin.nets import DeformNets, lbs_offset_net, pose_refine_net
from splatskin.rasterizer import Camera
from splatskin.synthetic import build_template, orbit_cameras, parse_preset


def front_camera(width=32, height=32, z=2.0, f=None):
    """Camera on -z looking down +z at the origin."""
    f = f or float(width)
    return Camera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, rotation=np.eye(3),
                  translation=np.array([0.0, 0.0, z]))


def random_cloud(n, rng, sh_degree=0, spread=0.5, scale_range=(-3.0, -1.5)):
    q = rng.normal(size=(n, 4))
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0, :] = rng.normal(0.0, 0.8, (n, 3))
    if sh_degree > 0:
        sh[:, 1:, :] = rng.normal(0.0, 0.2, (n, sh.shape[1] - 1, 3))
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        rotations=q,
        log_scales=rng.uniform(*scale_range, (n, 3)),
        opacity_logits=inverse_sigmoid(rng.uniform(0.3, 0.95, n)),
        sh=sh)


def chain_scene(preset="chain-2", per_bone=4, seed=0, sh_degree=1,
                with_nets=True):
    """Small articulated scene: template, cloud, nets, a bent pose, camera."""
    rng = np.random.default_rng(seed)
    parents, joints = parse_preset(preset)
    template = build_template(parents, joints, per_bone, rng)
    cloud = init_from_template(template, max_sh_degree=sh_degree,
                               default_scale=0.08)
    cloud.sh[:, 0, :] = rng.normal(0.0, 0.5, (cloud.n, 3))
    cloud.opacity_logits += rng.normal(0.0, 0.5, cloud.n)
    nets = None
    if with_nets:
        nets = DeformNets(pose_refine_net(template.n_joints, rng),
                          lbs_offset_net(template.n_joints, rng),
                          n_freqs=10)
        # nudge the output layers off zero so correction paths carry signal
        for net in (nets.pose_net, nets.lbs_net):
            net.weights[-1] += rng.normal(0.0, 0.01, net.weights[-1].shape)
            net.biases[-1] += rng.normal(0.0, 0.01, net.biases[-1].shape)
    pose = Pose(rng.normal(0.0, 0.2, (template.n_joints, 3)), np.zeros(3))
    center = 0.5 * (template.vertices.min(axis=0) + template.vertices.max(axis=0))
    cam = list(orbit_cameras(center, 1.8, 1, 32, 32, 1.1).values())[0]
    return template, cloud, nets, pose, cam


def rel_err(analytic, estimate, floor=1e-10):
    a = float(analytic)
    e = float(estimate)
    return abs(a - e) / max(abs(a), abs(e), floor)


def central_diff(f, setter, getter, eps):
    v = getter()
    setter(v + eps)
    fp = f()
    setter(v - eps)
    fm = f()
    setter(v)
    return (fp - fm) / (2.0 * eps)
