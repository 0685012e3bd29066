"""Skeleton forward kinematics and linear blend skinning.

Canonical space is the rest pose: with identity joint rotations and zero
root translation every per-joint transform is the identity. A posed point
is ``sum_k w_k (G_k p + b_k)`` where ``G_k`` is the joint's world rotation
and ``b_k = x_k - G_k j_k`` its translation. Covariances transform as
``G Sigma G^T`` with the blended ``G``; SH coefficients are left alone
(re-orienting them under articulation has negligible visual effect).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .rotations import axis_angle_to_matrix


@dataclass
class SkinnedTemplate:
    """Rest skeleton plus a skinned point set used for priors."""

    parents: np.ndarray      # (K,) int, root marked with -1
    rest_joints: np.ndarray  # (K, 3)
    vertices: np.ndarray     # (V, 3) rest-pose surface points
    weights: np.ndarray      # (V, K) rows sum to 1

    def __post_init__(self):
        self.parents = np.ascontiguousarray(self.parents, dtype=np.int64)
        self.rest_joints = np.ascontiguousarray(self.rest_joints, dtype=np.float64)
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        k = self.parents.shape[0]
        roots = np.flatnonzero(self.parents < 0)
        if roots.size != 1:
            raise ValueError(f"template must have exactly one root joint, found {roots.size}")
        if np.any(self.parents >= k):
            raise ValueError("parent index out of range")
        # breadth-first order from the root; stalls indicate a cycle
        order = [int(roots[0])]
        placed = np.zeros(k, dtype=bool)
        placed[roots[0]] = True
        while len(order) < k:
            frontier = np.flatnonzero(~placed & placed[np.clip(self.parents, 0, k - 1)])
            if frontier.size == 0:
                raise ValueError("parent array contains a cycle")
            for i in frontier:
                order.append(int(i))
                placed[i] = True
        self._topo_order = np.array(order, dtype=np.int64)
        if self.weights.shape != (self.vertices.shape[0], k):
            raise ValueError("weights must be (n_vertices, n_joints)")
        row = self.weights.sum(axis=1)
        if np.any(self.weights < -1e-9) or np.any(np.abs(row - 1.0) > 1e-6):
            raise ValueError("skinning weights must be a convex combination per vertex")
        self._tree = None

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def root(self) -> int:
        return int(self._topo_order[0])

    def vertex_tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.vertices)
        return self._tree


@dataclass
class Pose:
    """Per-joint local rotations (axis-angle) plus a root translation."""

    rotations: np.ndarray    # (K, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.translation = np.ascontiguousarray(self.translation, dtype=np.float64)
        if not (np.all(np.isfinite(self.rotations)) and np.all(np.isfinite(self.translation))):
            raise ValueError("pose contains non-finite values")
        angles = np.linalg.norm(self.rotations, axis=-1)
        if np.any(angles >= np.pi + 1e-3):
            raise ValueError(f"axis-angle magnitude {angles.max():.4f} outside canonical range")

    @property
    def n_joints(self) -> int:
        return self.rotations.shape[0]

    def local_matrices(self):
        return axis_angle_to_matrix(self.rotations)

    def copy(self) -> "Pose":
        return Pose(self.rotations.copy(), self.translation.copy())

    @staticmethod
    def identity(n_joints: int) -> "Pose":
        return Pose(np.zeros((n_joints, 3)), np.zeros(3))


@dataclass
class JointTransforms:
    """World-space rigid transform per joint: p -> G p + b."""

    rotations: np.ndarray       # (K, 3, 3) G_k (world rotation)
    translations: np.ndarray    # (K, 3)    b_k = x_k - G_k j_k
    joint_positions: np.ndarray  # (K, 3)   x_k, posed joint locations


def forward_kinematics_matrices(template: SkinnedTemplate, local_rotations,
                                root_translation) -> JointTransforms:
    """Compose local joint rotation matrices down the kinematic chain.

    The root's world position is its rest location plus root_translation;
    each child sits at ``x_parent + G_parent (j_child - j_parent)``. With
    identity inputs every joint maps to itself (rest pose is canonical).
    """
    local_rotations = np.asarray(local_rotations, dtype=np.float64)
    j = template.rest_joints
    k = template.n_joints
    G = np.empty((k, 3, 3), dtype=np.float64)
    x = np.empty((k, 3), dtype=np.float64)
    root = template.root
    G[root] = local_rotations[root]
    x[root] = j[root] + np.asarray(root_translation, dtype=np.float64)
    for i in template._topo_order[1:]:
        p = template.parents[i]
        G[i] = G[p] @ local_rotations[i]
        x[i] = x[p] + G[p] @ (j[i] - j[p])
    b = x - np.einsum('kab,kb->ka', G, j)
    return JointTransforms(G, b, x)


def forward_kinematics(template: SkinnedTemplate, pose: Pose) -> JointTransforms:
    if pose.n_joints != template.n_joints:
        raise ValueError(f"pose has {pose.n_joints} joints, template has {template.n_joints}")
    return forward_kinematics_matrices(template, pose.local_matrices(), pose.translation)


def forward_kinematics_backward(template: SkinnedTemplate, local_rotations,
                                transforms: JointTransforms, d_G, d_b):
    """Backpropagate joint-transform gradients to local rotations.

    Returns (d_local_rotations (K, 3, 3), d_root_translation (3,)).
    Children are processed before parents so each accumulator is complete
    when consumed.
    """
    local_rotations = np.asarray(local_rotations, dtype=np.float64)
    j = template.rest_joints
    G = transforms.rotations
    dW = np.array(d_G, dtype=np.float64, copy=True)
    dx = np.array(d_b, dtype=np.float64, copy=True)
    # b_k = x_k - G_k j_k feeds both accumulators
    dW -= dx[:, :, None] * j[:, None, :]
    d_local = np.zeros_like(dW)
    for i in template._topo_order[:0:-1]:
        p = template.parents[i]
        d_local[i] = G[p].T @ dW[i]
        dW[p] += dW[i] @ local_rotations[i].T
        dW[p] += np.outer(dx[i], j[i] - j[p])
        dx[p] += dx[i]
    root = template.root
    d_local[root] = dW[root]
    return d_local, dx[root].copy()


def blend_transforms(weights, transforms: JointTransforms):
    """Per-point LBS transform: G = sum_k w_k G_k, b = sum_k w_k b_k.

    weights: (K,) or (N, K), nonnegative rows summing to 1.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    row = weights.sum(axis=-1)
    if np.any(weights < -1e-9) or np.any(np.abs(row - 1.0) > 1e-5):
        raise ValueError("blend weights must be nonnegative and sum to 1")
    G = np.einsum('nk,kab->nab', weights, transforms.rotations)
    b = weights @ transforms.translations
    return G, b


def lbs_transform_gaussian(positions, covariances, G, b):
    """Pose canonical Gaussians: p' = G p + b, Sigma' = G Sigma G^T.

    The posed covariance stays a full symmetric matrix; a blended G is
    generally not orthogonal so no quaternion+scale refactoring exists.
    """
    p = np.einsum('nab,nb->na', G, np.asarray(positions, dtype=np.float64)) + b
    cov = G @ np.asarray(covariances, dtype=np.float64) @ np.swapaxes(G, -1, -2)
    return p, cov


def lbs_backward(positions, covariances, weights, transforms: JointTransforms,
                 G, b, d_pos_out, d_cov_out):
    """Gradients of lbs_transform_gaussian w.r.t. every input.

    Returns (d_positions, d_covariances, d_weights, d_G_joints, d_b_joints).
    d_cov_out may be asymmetric; it is used as-is since Sigma' = G Sigma G^T
    was contracted against it directly.
    """
    p = np.asarray(positions, dtype=np.float64)
    S = np.asarray(covariances, dtype=np.float64)
    H = np.asarray(d_cov_out, dtype=np.float64)
    dp_out = np.asarray(d_pos_out, dtype=np.float64)
    Gt = np.swapaxes(G, -1, -2)
    d_pos = np.einsum('nab,na->nb', G, dp_out)
    d_cov = Gt @ H @ G
    # dL/dG gathers both the mean and the covariance path
    d_G = dp_out[:, :, None] * p[:, None, :]
    d_G += (H + np.swapaxes(H, -1, -2)) @ G @ S
    d_b = dp_out
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    d_weights = (np.einsum('nab,kab->nk', d_G, transforms.rotations)
                 + d_b @ transforms.translations.T)
    d_G_joints = np.einsum('nk,nab->kab', w, d_G)
    d_b_joints = w.T @ d_b
    return d_pos, d_cov, d_weights, d_G_joints, d_b_joints


def nearest_vertex_index(template: SkinnedTemplate, points):
    """Index of the Euclidean-nearest template vertex per query point.

    Ties break to the lowest vertex index, which cKDTree alone does not
    guarantee, so equal-distance candidates are re-ranked.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    k = min(8, template.n_vertices)
    d, idx = template.vertex_tree().query(points, k=k)
    if k == 1:
        return idx.reshape(points.shape[0])
    tied = d == d[:, :1]
    return np.min(np.where(tied, idx, template.n_vertices), axis=1)


def nearest_vertex_weights(template: SkinnedTemplate, points):
    """Skinning weights copied from each point's nearest template vertex.

    Returns (weights (N, K), vertex indices (N,)).
    """
    idx = nearest_vertex_index(template, points)
    return template.weights[idx], idx


def distance_to_template(template: SkinnedTemplate, points):
    """Euclidean distance from each point to the closest template vertex."""
    d, _ = template.vertex_tree().query(np.atleast_2d(np.asarray(points, dtype=np.float64)))
    return d
