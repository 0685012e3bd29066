"""Real spherical harmonics, degrees 0..3, in the splatting convention.

Colors are decoded as ``0.5 + sum_k basis_k(dir) * coeff_k`` per channel,
clamped below at zero. The degree-1 basis carries the (-y, z, -x) sign and
ordering that matches common splat PLY files.
"""
from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def rgb_to_sh(rgb):
    """DC coefficient reproducing ``rgb`` from any view direction."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0


def sh_to_rgb(sh0):
    return np.asarray(sh0, dtype=np.float64) * C0 + 0.5


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs, degree: int):
    """Basis values b_k(dir), shape (..., n_coeffs). dirs must be unit."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = num_sh_coeffs(degree)
    b = np.empty(dirs.shape[:-1] + (n,), dtype=np.float64)
    b[..., 0] = C0
    if degree < 1:
        return b
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    b[..., 1] = -C1 * y
    b[..., 2] = C1 * z
    b[..., 3] = -C1 * x
    if degree < 2:
        return b
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b[..., 4] = C2[0] * xy
    b[..., 5] = C2[1] * yz
    b[..., 6] = C2[2] * (2.0 * zz - xx - yy)
    b[..., 7] = C2[3] * xz
    b[..., 8] = C2[4] * (xx - yy)
    if degree < 3:
        return b
    b[..., 9] = C3[0] * y * (3.0 * xx - yy)
    b[..., 10] = C3[1] * xy * z
    b[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
    b[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
    b[..., 14] = C3[5] * z * (xx - yy)
    b[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_grad(dirs, degree: int):
    """d(basis_k)/d(dir), shape (..., n_coeffs, 3). dirs must be unit."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = num_sh_coeffs(degree)
    g = np.zeros(dirs.shape[:-1] + (n, 3), dtype=np.float64)
    if degree < 1:
        return g
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    g[..., 1, 1] = -C1
    g[..., 2, 2] = C1
    g[..., 3, 0] = -C1
    if degree < 2:
        return g
    g[..., 4, 0] = C2[0] * y
    g[..., 4, 1] = C2[0] * x
    g[..., 5, 1] = C2[1] * z
    g[..., 5, 2] = C2[1] * y
    g[..., 6, 0] = C2[2] * (-2.0 * x)
    g[..., 6, 1] = C2[2] * (-2.0 * y)
    g[..., 6, 2] = C2[2] * (4.0 * z)
    g[..., 7, 0] = C2[3] * z
    g[..., 7, 2] = C2[3] * x
    g[..., 8, 0] = C2[4] * (2.0 * x)
    g[..., 8, 1] = C2[4] * (-2.0 * y)
    if degree < 3:
        return g
    xx, yy, zz = x * x, y * y, z * z
    g[..., 9, 0] = C3[0] * 6.0 * x * y
    g[..., 9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
    g[..., 10, 0] = C3[1] * y * z
    g[..., 10, 1] = C3[1] * x * z
    g[..., 10, 2] = C3[1] * x * y
    g[..., 11, 0] = C3[2] * (-2.0 * x * y)
    g[..., 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[..., 11, 2] = C3[2] * (8.0 * y * z)
    g[..., 12, 0] = C3[3] * (-6.0 * x * z)
    g[..., 12, 1] = C3[3] * (-6.0 * y * z)
    g[..., 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[..., 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[..., 13, 1] = C3[4] * (-2.0 * x * y)
    g[..., 13, 2] = C3[4] * (8.0 * x * z)
    g[..., 14, 0] = C3[5] * (2.0 * x * z)
    g[..., 14, 1] = C3[5] * (-2.0 * y * z)
    g[..., 14, 2] = C3[5] * (xx - yy)
    g[..., 15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
    g[..., 15, 1] = C3[6] * (-6.0 * x * y)
    return g


def eval_sh_color(sh, dirs):
    """Decode RGB from SH coefficients along unit view directions.

    sh: (..., n_coeffs, 3); dirs: (..., 3). Output is NOT clamped; values
    are clipped to [0, 1] only when an image is written to disk.
    """
    sh = np.asarray(sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    basis = sh_basis(dirs, degree)
    return 0.5 + np.einsum('...k,...kc->...c', basis, sh)


def eval_sh_color_backward(sh, dirs, d_color):
    """Gradients of eval_sh_color w.r.t. coefficients and directions."""
    sh = np.asarray(sh, dtype=np.float64)
    d_color = np.asarray(d_color, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    basis = sh_basis(dirs, degree)
    d_sh = basis[..., :, None] * d_color[..., None, :]
    # d/d(dir) flows through the basis only
    weights = np.einsum('...kc,...c->...k', sh, d_color)
    d_dirs = np.einsum('...k,...ki->...i', weights, sh_basis_grad(dirs, degree))
    return d_sh, d_dirs
