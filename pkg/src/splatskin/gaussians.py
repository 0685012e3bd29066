"""Canonical Gaussian cloud: parameters, covariance build, KL divergence.

Each Gaussian carries a position, a raw (unnormalized) quaternion, per-axis
log scales, an opacity logit, and per-channel SH coefficients. Covariances
are built as Sigma = R S S^T R^T from the unit quaternion and effective
scales, so they stay symmetric positive definite by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rotations import (
    quat_normalize,
    quat_normalize_backward,
    quat_to_matrix,
    quat_to_matrix_backward,
)

# floors keep covariances invertible without visibly changing splats
SCALE_FLOOR = 1e-6


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y / (1.0 - y))


def effective_scales(log_scales):
    """exp(log_scales) with a tiny floor; gradient is zero where floored."""
    return np.maximum(np.exp(np.asarray(log_scales, dtype=np.float64)), SCALE_FLOOR)


@dataclass
class Gaussian3D:
    """Single-Gaussian view, mostly for tests and inspection."""

    position: np.ndarray
    rotation: np.ndarray       # unit quaternion (w, x, y, z)
    log_scale: np.ndarray
    raw_opacity: float
    sh_coeffs: np.ndarray      # (n_coeffs, 3)


@dataclass
class GaussianCloud:
    """Optimizable splat parameters, one row per Gaussian.

    grad_accum / grad_count hold screen-space position-gradient statistics
    between densification steps and are reset whenever the cloud is rebuilt.
    """

    positions: np.ndarray      # (N, 3)
    rotations: np.ndarray      # (N, 4) raw quaternions, (w, x, y, z)
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray             # (N, n_coeffs, 3), n_coeffs = (degree + 1)^2
    grad_accum: np.ndarray = None      # summed |dL/dmean2d| per visible render
    grad_count: np.ndarray = None      # number of renders the splat was visible in
    grad_vec_accum: np.ndarray = None  # summed canonical dL/dposition (clone direction)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 3 or self.sh.shape[2] != 3:
            raise ValueError(f"sh must be (N, n_coeffs, 3), got {self.sh.shape}")
        n = self.positions.shape[0]
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n, dtype=np.float64)
        if self.grad_count is None:
            self.grad_count = np.zeros(n, dtype=np.int64)
        if self.grad_vec_accum is None:
            self.grad_vec_accum = np.zeros((n, 3), dtype=np.float64)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    def unit_rotations(self):
        return quat_normalize(self.rotations)

    def scales(self):
        return effective_scales(self.log_scales)

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def covariances(self):
        return build_covariance(self.unit_rotations(), self.log_scales)

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.positions[i], self.unit_rotations()[i], self.log_scales[i],
            float(self.opacity_logits[i]), self.sh[i])

    def reset_stats(self):
        self.grad_accum = np.zeros(self.n, dtype=np.float64)
        self.grad_count = np.zeros(self.n, dtype=np.int64)
        self.grad_vec_accum = np.zeros((self.n, 3), dtype=np.float64)

    def accumulate_stats(self, screen_grad_norm, position_grads, visible_mask):
        self.grad_accum += np.where(visible_mask, screen_grad_norm, 0.0)
        self.grad_count += visible_mask.astype(np.int64)
        self.grad_vec_accum += np.where(visible_mask[:, None], position_grads, 0.0)

    def mean_screen_grad(self):
        return self.grad_accum / np.maximum(self.grad_count, 1)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.sh.copy(),
            self.grad_accum.copy(), self.grad_count.copy(),
            self.grad_vec_accum.copy())

    def select(self, index) -> "GaussianCloud":
        return GaussianCloud(
            self.positions[index], self.rotations[index], self.log_scales[index],
            self.opacity_logits[index], self.sh[index],
            self.grad_accum[index], self.grad_count[index],
            self.grad_vec_accum[index])

    @staticmethod
    def concatenate(clouds) -> "GaussianCloud":
        return GaussianCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.rotations for c in clouds]),
            np.concatenate([c.log_scales for c in clouds]),
            np.concatenate([c.opacity_logits for c in clouds]),
            np.concatenate([c.sh for c in clouds]))


@dataclass
class CloudGrads:
    """Gradient buffers matching GaussianCloud's fields."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    @staticmethod
    def zeros_like(cloud: GaussianCloud) -> "CloudGrads":
        return CloudGrads(
            np.zeros_like(cloud.positions), np.zeros_like(cloud.rotations),
            np.zeros_like(cloud.log_scales), np.zeros_like(cloud.opacity_logits),
            np.zeros_like(cloud.sh))


def build_covariance(unit_rotations, log_scales):
    """Sigma = R diag(s)^2 R^T for each row; returns (..., 3, 3)."""
    unit_rotations = np.asarray(unit_rotations, dtype=np.float64)
    log_scales = np.asarray(log_scales, dtype=np.float64)
    if not (np.all(np.isfinite(unit_rotations)) and np.all(np.isfinite(log_scales))):
        raise ValueError("build_covariance: non-finite rotation or log_scale")
    R = quat_to_matrix(unit_rotations)
    s = effective_scales(log_scales)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def build_covariance_backward(raw_rotations, log_scales, d_cov):
    """dL/d(raw quaternion), dL/d(log scales) given dL/dSigma.

    d_cov need not be symmetric; only its symmetric part contributes since
    Sigma is symmetric by construction.
    """
    q_unit = quat_normalize(raw_rotations)
    R = quat_to_matrix(q_unit)
    s = effective_scales(log_scales)
    M = R * s[..., None, :]
    G = np.asarray(d_cov, dtype=np.float64)
    dM = (G + np.swapaxes(G, -1, -2)) @ M
    dR = dM * s[..., None, :]
    ds = np.einsum('...ai,...ai->...i', R, dM)
    active = np.exp(np.asarray(log_scales, dtype=np.float64)) > SCALE_FLOOR
    d_log_scales = np.where(active, ds * s, 0.0)
    d_unit = quat_to_matrix_backward(q_unit, dR)
    d_raw = quat_normalize_backward(raw_rotations, d_unit)
    return d_raw, d_log_scales


def eval_density(points, mean, cov, index: int = 0):
    """Normalized 3D Gaussian density at points.

    (2 pi)^{-3/2} |Sigma|^{-1/2} exp(-0.5 d^T Sigma^-1 d). The render path
    uses the unnormalized exponential instead; this is the measure-theoretic
    version for oracles and sampling checks.
    """
    cov = np.asarray(cov, dtype=np.float64)
    sign, logdet = np.linalg.slogdet(cov)
    if np.any(sign <= 0) or not np.all(np.isfinite(logdet)):
        raise ValueError(f"eval_density: singular covariance for Gaussian {index}")
    d = np.asarray(points, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    sol = np.linalg.solve(cov, d[..., None])[..., 0]
    norm = (2.0 * np.pi) ** -1.5 * np.exp(-0.5 * logdet)
    return norm * np.exp(-0.5 * np.sum(d * sol, axis=-1))


def kl_divergence(mean0, cov0, mean1, cov1):
    """KL(N(mean0, cov0) || N(mean1, cov1)) via explicit inversion.

    Reference route; kl_divergence_fast must agree with this to near
    machine precision.
    """
    mean0 = np.asarray(mean0, dtype=np.float64)
    mean1 = np.asarray(mean1, dtype=np.float64)
    cov0 = np.asarray(cov0, dtype=np.float64)
    cov1 = np.asarray(cov1, dtype=np.float64)
    inv1 = np.linalg.inv(cov1)
    tr = np.einsum('...ij,...ji->...', inv1, cov0)
    _, logdet0 = np.linalg.slogdet(cov0)
    _, logdet1 = np.linalg.slogdet(cov1)
    delta = mean1 - mean0
    mahal = np.einsum('...i,...ij,...j->...', delta, inv1, delta)
    k = mean0.shape[-1]
    return 0.5 * (tr + logdet1 - logdet0 + mahal - k)


def kl_divergence_fast(pos0, rot0, log_scales0, pos1, rot1, log_scales1):
    """Closed-form KL between factored Gaussians, no matrix inversion.

    With Sigma = R S^2 R^T the inverse is R S^-2 R^T, so
    tr(Sigma1^-1 Sigma0) = sum_ij (Q_ij s0_j / s1_i)^2 for Q = R1^T R0,
    the log-determinant ratio telescopes to 2 sum(log s1 - log s0), and
    the Mahalanobis term is |S1^-1 R1^T (mu1 - mu0)|^2. Rotations may be
    raw quaternions; they are normalized here.
    """
    R0 = quat_to_matrix(quat_normalize(rot0))
    R1 = quat_to_matrix(quat_normalize(rot1))
    s0 = effective_scales(log_scales0)
    s1 = effective_scales(log_scales1)
    Q = np.swapaxes(R1, -1, -2) @ R0
    ratio = Q * (s0[..., None, :] / s1[..., :, None])
    tr = np.sum(ratio * ratio, axis=(-1, -2))
    logdet = 2.0 * np.sum(np.log(s1) - np.log(s0), axis=-1)
    delta = np.asarray(pos1, dtype=np.float64) - np.asarray(pos0, dtype=np.float64)
    local = np.einsum('...ji,...j->...i', R1, delta) / s1
    mahal = np.sum(local * local, axis=-1)
    return 0.5 * (tr + logdet + mahal - 3.0)
