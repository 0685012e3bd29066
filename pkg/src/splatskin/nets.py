"""Small fully connected networks with hand-written backpropagation.

Two heads ride on these: an LBS weight-field correction (per-Gaussian
offsets added to log base weights before a softmax) and a pose refinement
head (per-joint rotation corrections composed onto the given pose). Both
use ReLU hidden layers, linear outputs, and zero-initialized output layers
so they start as exact no-ops.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import Pose
from .rotations import (
    axis_angle_to_matrix,
    axis_angle_to_matrix_backward,
    matrix_to_axis_angle,
)

LBS_EPS = 1e-8  # floor inside log() of base skinning weights


@dataclass
class MlpParams:
    """Affine layer stack; weights[i] is (fan_in, fan_out)."""

    weights: list
    biases: list

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def make_mlp(widths, rng, zero_init_output=True) -> MlpParams:
    """He-initialized hidden layers; output layer zeroed by default."""
    weights, biases = [], []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        last = i == len(widths) - 2
        if last and zero_init_output:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def pose_refine_net(n_joints: int, rng, hidden: int = 128) -> MlpParams:
    """Maps flattened non-root joint angles to per-joint corrections."""
    d = 3 * (n_joints - 1)
    return make_mlp([d, hidden, hidden, d], rng)


def lbs_offset_net(n_joints: int, rng, n_freqs: int = 10, hidden: int = 128) -> MlpParams:
    """Maps encoded canonical position to per-joint weight offsets."""
    d = 3 + 6 * n_freqs
    return make_mlp([d, hidden, hidden, hidden, n_joints], rng)


def mlp_forward(net: MlpParams, x):
    """Returns (y, cache). ReLU after every layer except the last."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.weights[0].shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != net input {net.weights[0].shape[0]}")
    inputs = []
    h = x
    n_layers = len(net.weights)
    for i in range(n_layers):
        inputs.append(h)
        h = h @ net.weights[i] + net.biases[i]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h, inputs


def mlp_backward(net: MlpParams, cache, d_y):
    """Returns (d_weights, d_biases, d_x) for a matching forward pass."""
    d_y = np.asarray(d_y, dtype=np.float64)
    squeeze = d_y.ndim == 1
    dz = np.atleast_2d(d_y)
    d_weights = [None] * len(net.weights)
    d_biases = [None] * len(net.biases)
    for i in range(len(net.weights) - 1, -1, -1):
        a = np.atleast_2d(cache[i])
        if i < len(net.weights) - 1:
            # cache[i+1] is this layer's post-ReLU output
            dz = dz * (np.atleast_2d(cache[i + 1]) > 0.0)
        d_weights[i] = a.T @ dz
        d_biases[i] = dz.sum(axis=0)
        dz = dz @ net.weights[i].T
    return d_weights, d_biases, (dz[0] if squeeze else dz)


def encode_position(p, n_freqs: int = 10):
    """[p, sin(2^i pi p), cos(2^i pi p)] for i = 0..L-1, per component."""
    p = np.asarray(p, dtype=np.float64)
    parts = [p]
    for i in range(n_freqs):
        arg = (2.0 ** i) * np.pi * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def encode_position_backward(p, d_enc, n_freqs: int = 10):
    p = np.asarray(p, dtype=np.float64)
    d_enc = np.asarray(d_enc, dtype=np.float64)
    d_p = d_enc[..., :3].copy()
    for i in range(n_freqs):
        f = (2.0 ** i) * np.pi
        arg = f * p
        d_sin = d_enc[..., 3 + 6 * i:6 + 6 * i]
        d_cos = d_enc[..., 6 + 6 * i:9 + 6 * i]
        d_p += f * (np.cos(arg) * d_sin - np.sin(arg) * d_cos)
    return d_p


def compute_lbs_weights(base, offsets):
    """softmax( log(base + 1e-8) + offsets ); rows sum to 1 exactly."""
    base = np.asarray(base, dtype=np.float64)
    logits = np.log(base + LBS_EPS) + np.asarray(offsets, dtype=np.float64)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def compute_lbs_weights_backward(base, weights, d_weights):
    """Gradients w.r.t. (base, offsets) given d(softmax output)."""
    w = np.asarray(weights, dtype=np.float64)
    d_w = np.asarray(d_weights, dtype=np.float64)
    d_logits = w * (d_w - np.sum(d_w * w, axis=-1, keepdims=True))
    d_base = d_logits / (np.asarray(base, dtype=np.float64) + LBS_EPS)
    return d_base, d_logits


@dataclass
class DeformNets:
    """Optional learned corrections; None disables a head entirely."""

    pose_net: MlpParams = None
    lbs_net: MlpParams = None
    n_freqs: int = 10
    lbs_position_gradient: bool = False  # let offsets pull on Gaussian positions


def lbs_weight_field(nets: DeformNets, base_weights, positions):
    """Final skinning weights for canonical points; returns (w, cache)."""
    if nets.lbs_net is None:
        return np.asarray(base_weights, dtype=np.float64), None
    enc = encode_position(positions, nets.n_freqs)
    offsets, mlp_cache = mlp_forward(nets.lbs_net, enc)
    w = compute_lbs_weights(base_weights, offsets)
    return w, (mlp_cache, w)


def lbs_weight_field_backward(nets: DeformNets, base_weights, positions, cache, d_weights):
    """Returns (d_lbs_net (weights, biases), d_positions or None)."""
    mlp_cache, w = cache
    _, d_offsets = compute_lbs_weights_backward(base_weights, w, d_weights)
    d_W, d_b, d_enc = mlp_backward(nets.lbs_net, mlp_cache, d_offsets)
    d_pos = None
    if nets.lbs_position_gradient:
        d_pos = encode_position_backward(positions, d_enc, nets.n_freqs)
    return (d_W, d_b), d_pos


def refine_pose_matrices(pose: Pose, net: MlpParams, root: int = 0):
    """Corrected local rotation matrices R(corr_j) @ R(theta_j).

    The root's rotation passes through untouched. Returns (matrices, cache)
    with everything the backward pass needs.
    """
    k = pose.n_joints
    nonroot = [j for j in range(k) if j != root]
    theta_flat = pose.rotations[nonroot].reshape(-1)
    corr_flat, mlp_cache = mlp_forward(net, theta_flat)
    corr = corr_flat.reshape(k - 1, 3)
    base_mats = axis_angle_to_matrix(pose.rotations)
    corr_mats = axis_angle_to_matrix(corr)
    local = base_mats.copy()
    for idx, j in enumerate(nonroot):
        local[j] = corr_mats[idx] @ base_mats[j]
    return local, (mlp_cache, corr, base_mats, nonroot)


def refine_pose_matrices_backward(net: MlpParams, cache, d_local):
    """Gradients of the corrected matrices w.r.t. net parameters."""
    mlp_cache, corr, base_mats, nonroot = cache
    d_local = np.asarray(d_local, dtype=np.float64)
    # d/d R(corr_j) of R(corr_j) @ R(theta_j)
    d_corr_mats = np.stack([d_local[j] @ base_mats[j].T for j in nonroot])
    d_corr = axis_angle_to_matrix_backward(corr, d_corr_mats)
    d_W, d_b, _ = mlp_backward(net, mlp_cache, d_corr.reshape(-1))
    return d_W, d_b


def refine_pose(pose: Pose, net: MlpParams, root: int = 0) -> Pose:
    """Pose-space view of refine_pose_matrices (axis-angle out).

    Joints whose correction is exactly zero keep their input angles
    bit-for-bit, so a zero-initialized net is the identity map.
    """
    k = pose.n_joints
    nonroot = [j for j in range(k) if j != root]
    theta_flat = pose.rotations[nonroot].reshape(-1)
    corr_flat, _ = mlp_forward(net, theta_flat)
    corr = corr_flat.reshape(k - 1, 3)
    out = pose.rotations.copy()
    for idx, j in enumerate(nonroot):
        if np.all(corr[idx] == 0.0):
            continue
        m = axis_angle_to_matrix(corr[idx]) @ axis_angle_to_matrix(pose.rotations[j])
        out[j] = matrix_to_axis_angle(m)
    return Pose(out, pose.translation.copy())


def cache_inference_artifacts(cloud, template, nets: DeformNets, poses, root: int = 0):
    """Bake network outputs so rendering needs no MLP evaluation.

    Returns (per-Gaussian final LBS weights (U, K), per-frame refined joint
    rotations (F, K, 3)). Root translations are not duplicated here; they
    pass through refinement unchanged and live with the input poses.
    """
    from .kinematics import nearest_vertex_weights

    base, _ = nearest_vertex_weights(template, cloud.positions)
    weights, _ = lbs_weight_field(nets, base, cloud.positions)
    refined = np.empty((len(poses), template.n_joints, 3), dtype=np.float64)
    for f, pose in enumerate(poses):
        rp = refine_pose(pose, nets.pose_net, root) if nets.pose_net is not None else pose
        refined[f] = rp.rotations
    return weights, refined
