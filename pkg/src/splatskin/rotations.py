"""Rotation parameterizations and their analytic Jacobians.

Quaternions are (w, x, y, z). Axis-angle vectors encode a rotation of
``|v|`` radians about ``v / |v|``. Everything broadcasts over leading batch
dimensions and computes in float64.
"""
from __future__ import annotations

import numpy as np

# below this squared angle the Rodrigues coefficients switch to Taylor series
_SMALL_ANGLE_SQ = 1e-12


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_normalize_backward(q_raw, d_unit):
    """Gradient of ``q_raw / |q_raw|`` w.r.t. the raw quaternion."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    u = q_raw / n
    proj = np.sum(u * d_unit, axis=-1, keepdims=True)
    return (d_unit - u * proj) / n


def quat_to_matrix(q):
    """Rotation matrix from a unit quaternion; broadcasts to (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_backward(q, dR):
    """Accumulate dL/dq (unit quaternion) from dL/dR.

    ``q`` must be the unit quaternion the matrix was built from.
    """
    q = np.asarray(q, dtype=np.float64)
    dR = np.asarray(dR, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = lambda i, j: dR[..., i, j]
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2)
              - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1)
              - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0)
              + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0)
              - 2 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return np.stack([dw, dx, dy, dz], axis=-1)


def _skew(v):
    v = np.asarray(v, dtype=np.float64)
    K = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    return K


def _rodrigues_coeffs(theta_sq):
    """(a, b) with R = I + a [v]x + b [v]x^2, series-stable near zero."""
    theta = np.sqrt(theta_sq)
    small = theta_sq < _SMALL_ANGLE_SQ
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta_sq / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta_sq / 24.0,
                 (1.0 - np.cos(safe)) / np.where(small, 1.0, theta_sq))
    return a, b


def axis_angle_to_matrix(v):
    """Rodrigues formula, broadcasting to (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    theta_sq = np.sum(v * v, axis=-1)
    a, b = _rodrigues_coeffs(theta_sq)
    K = _skew(v)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * K2


def axis_angle_to_matrix_backward(v, dR):
    """Accumulate dL/dv from dL/dR for the Rodrigues map.

    Uses dR/dv_i = c1 v_i K + a E_i + c2 v_i K^2 + b (E_i K + K E_i) with
    K = [v]x, E_i = [e_i]x, c1 = (theta cos - sin)/theta^3 and
    c2 = (theta sin - 2(1 - cos))/theta^4 (Taylor series near zero).
    """
    v = np.asarray(v, dtype=np.float64)
    dR = np.asarray(dR, dtype=np.float64)
    theta_sq = np.sum(v * v, axis=-1)
    theta = np.sqrt(theta_sq)
    small = theta_sq < _SMALL_ANGLE_SQ
    a, b = _rodrigues_coeffs(theta_sq)

    safe_sq = np.where(small, 1.0, theta_sq)
    c1 = np.where(small, -1.0 / 3.0 + theta_sq / 30.0,
                  (theta * np.cos(theta) - np.sin(theta)) / (safe_sq * np.where(small, 1.0, theta)))
    c2 = np.where(small, -1.0 / 12.0 + theta_sq / 180.0,
                  (theta * np.sin(theta) - 2.0 * (1.0 - np.cos(theta))) / (safe_sq * safe_sq))

    K = _skew(v)
    K2 = K @ K
    E = _skew(np.eye(3))  # (3, 3, 3): E[i] = [e_i]x

    tr_dR_K = np.einsum('...ab,...ab->...', dR, K)
    tr_dR_K2 = np.einsum('...ab,...ab->...', dR, K2)
    # <dR, E_i> and <dR, E_i K + K E_i>
    tr_dR_E = np.einsum('...ab,iab->...i', dR, E)
    EK_KE = np.einsum('iab,...bc->...iac', E, K) + np.einsum('...ab,ibc->...iac', K, E)
    tr_dR_mix = np.einsum('...ab,...iab->...i', dR, EK_KE)

    dv = (c1 * tr_dR_K + c2 * tr_dR_K2)[..., None] * v
    dv = dv + a[..., None] * tr_dR_E + b[..., None] * tr_dR_mix
    return dv


def matrix_to_axis_angle(R):
    """Log map of a rotation matrix, angle in [0, pi]. Batched."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    Rf = R.reshape((-1, 3, 3))
    out = np.empty((Rf.shape[0], 3), dtype=np.float64)
    for i in range(Rf.shape[0]):
        out[i] = _matrix_to_axis_angle_single(Rf[i])
    return out.reshape(batch + (3,))


def _matrix_to_axis_angle_single(R):
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    skew_vec = 0.5 * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-7:
        return skew_vec
    if theta < np.pi - 1e-4:
        return skew_vec * (theta / np.sin(theta))
    # near pi the skew part vanishes; recover the axis from R + I
    B = (R + np.eye(3)) * 0.5
    axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
    k = int(np.argmax(axis))
    if axis[k] > 0:
        signs = np.ones(3)
        for j in range(3):
            if j != k:
                signs[j] = np.sign(B[k, j]) if B[k, j] != 0 else 1.0
        axis = axis * signs
        axis = axis / np.linalg.norm(axis)
    # align with the (tiny) skew part so the map stays continuous
    if np.dot(axis, skew_vec) < 0:
        axis = -axis
    return axis * theta


def random_unit_quaternion(rng, size=None):
    shape = (4,) if size is None else (size, 4)
    q = rng.normal(size=shape)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)
