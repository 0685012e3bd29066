"""Differentiable software rasterizer for 3D Gaussian splats.

Forward: project posed Gaussians to 2D screen Gaussians with the local
affine (EWA) approximation, bin them into 16 px tiles, and alpha-composite
front to back. A splat contributes only inside the axis-aligned bounding
box of its 3-sigma screen ellipse; the same support rule drives tile
binning, culling, and the naive reference renderer, which is what makes
the tiled and naive paths agree to float precision.

Backward: exact reverse-mode gradients of the forward map, treating the
discrete structure (culling, support, skip threshold, saturation clamp,
early termination) as fixed. Tiles are processed in ascending tile id and
each splat's gradient is accumulated in that order, so repeated runs are
bitwise identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sh import eval_sh_color, eval_sh_color_backward, num_sh_coeffs

TILE_SIZE = 16
COV2D_REG = 0.3        # pixel^2, added to the diagonal of every 2D covariance
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_TERMINATE = 1e-4
SIGMA_CUTOFF = 3.0


@dataclass
class Camera:
    """Pinhole camera; world-to-camera map is p_cam = R p + t."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)
    near_clip: float = 0.05

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        self.translation = np.ascontiguousarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0 or self.near_clip <= 0:
            raise ValueError("fx, fy, near_clip must be positive")
        if (np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-8
                or abs(np.linalg.det(self.rotation) - 1.0) > 1e-8):
            raise ValueError("camera rotation must be orthogonal with det +1")

    def center(self):
        return -self.rotation.T @ self.translation


def camera_look_at(eye, target, up, fx, fy, width, height, near_clip=0.05) -> Camera:
    """Camera at eye looking toward target; +z is the view direction."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    x = np.cross(np.asarray(up, dtype=np.float64), f)
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    return Camera(fx, fy, width / 2.0, height / 2.0, width, height,
                  R, -R @ eye, near_clip)


@dataclass
class Splat2D:
    mean2d: np.ndarray   # (2,) pixels
    cov2d: np.ndarray    # (2, 2) pixels^2, regularized
    depth: float         # camera-space z
    opacity: float
    color: np.ndarray    # (3,)
    source: int


@dataclass
class RenderOutput:
    color: np.ndarray    # (H, W, 3)
    alpha: np.ndarray    # (H, W)


@dataclass
class RasterGrads:
    positions: np.ndarray     # (N, 3) posed-space
    covariances: np.ndarray   # (N, 3, 3) posed-space
    opacities: np.ndarray     # (N,) activated opacity
    sh: np.ndarray            # (N, n_coeffs, 3)
    screen_grad_norm: np.ndarray  # (N,) |dL/dmean2d|
    visible: np.ndarray       # (N,) bool


def project_gaussians(positions, covariances, cam: Camera):
    """Batched EWA projection. Returns a dict of per-splat arrays.

    valid[i] is False when the splat is behind the near plane or its
    3-sigma screen box misses the image entirely.
    """
    p = np.asarray(positions, dtype=np.float64)
    cov = np.asarray(covariances, dtype=np.float64)
    t = p @ cam.rotation.T + cam.translation
    tz = t[:, 2]
    in_front = tz > cam.near_clip
    safe_tz = np.where(in_front, tz, 1.0)
    mean2d = np.stack([cam.fx * t[:, 0] / safe_tz + cam.cx,
                       cam.fy * t[:, 1] / safe_tz + cam.cy], axis=1)
    n = p.shape[0]
    J = np.zeros((n, 2, 3), dtype=np.float64)
    J[:, 0, 0] = cam.fx / safe_tz
    J[:, 1, 1] = cam.fy / safe_tz
    J[:, 0, 2] = -cam.fx * t[:, 0] / safe_tz ** 2
    J[:, 1, 2] = -cam.fy * t[:, 1] / safe_tz ** 2
    T = J @ cam.rotation
    cov2d = T @ cov @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG
    radii = SIGMA_CUTOFF * np.sqrt(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1))
    on_screen = ((mean2d[:, 0] + radii[:, 0] > 0.0)
                 & (mean2d[:, 0] - radii[:, 0] < cam.width)
                 & (mean2d[:, 1] + radii[:, 1] > 0.0)
                 & (mean2d[:, 1] - radii[:, 1] < cam.height))
    det2 = (cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det2
    conic[:, 1, 1] = cov2d[:, 0, 0] / det2
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det2
    return {
        "t": t, "mean2d": mean2d, "cov2d": cov2d, "conic": conic,
        "radii": radii, "depth": tz, "T": T,
        "valid": in_front & on_screen,
    }


def project_gaussian(position, covariance, cam: Camera, opacity=1.0, color=None,
                     source=0):
    """Single-splat projection; returns a Splat2D or None when culled."""
    proj = project_gaussians(position[None], covariance[None], cam)
    if not proj["valid"][0]:
        return None
    return Splat2D(proj["mean2d"][0], proj["cov2d"][0], float(proj["depth"][0]),
                   float(opacity), None if color is None else np.asarray(color),
                   source)


def bin_tiles(mean2d, radii, depth, valid, width, height, tile_size=TILE_SIZE):
    """Assign splats to every tile their 3-sigma box overlaps.

    Returns (order, starts, tiles_x, tiles_y): ``order`` is a flat array of
    splat indices grouped by tile, each group sorted by ascending depth with
    a stable tie-break on splat index; tile t owns order[starts[t]:starts[t+1]].
    """
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return (np.empty(0, dtype=np.int64),
                np.zeros(n_tiles + 1, dtype=np.int64), tiles_x, tiles_y)
    m, r = mean2d[idx], radii[idx]
    tx0 = np.clip(np.floor((m[:, 0] - r[:, 0]) / tile_size), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((m[:, 0] + r[:, 0]) / tile_size), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((m[:, 1] - r[:, 1]) / tile_size), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((m[:, 1] + r[:, 1]) / tile_size), 0, tiles_y - 1).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    rep = np.repeat(np.arange(idx.size), counts)
    offs = np.arange(rep.size) - np.repeat(np.cumsum(counts) - counts, counts)
    tiles = ((ty0[rep] + offs // nx[rep]) * tiles_x + tx0[rep] + offs % nx[rep])
    splats = idx[rep]
    # tile-major, then front-to-back, then source index for ties
    perm = np.lexsort((splats, depth[splats], tiles))
    order = splats[perm]
    starts = np.searchsorted(tiles[perm], np.arange(n_tiles + 1))
    return order, starts, tiles_x, tiles_y


def _tile_pixels(tx, ty, width, height, tile_size=TILE_SIZE):
    x0, y0 = tx * tile_size, ty * tile_size
    xs = np.arange(x0, min(x0 + tile_size, width), dtype=np.float64) + 0.5
    ys = np.arange(y0, min(y0 + tile_size, height), dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)
    return px.ravel(), py.ravel(), len(ys), len(xs)


def _batched_alphas(order, starts, tiles_x, proj, opacities):
    """Effective alphas for every (splat, tile) row over a full 16x16 tile.

    Only pixels inside a slack-padded integer cover of each row's support
    box are evaluated; the exact 3-sigma test then runs on that subset, so
    live entries are bitwise identical to _tile_alphas and everything
    outside stays zero. Skipping the out-of-support bulk of each tile is
    what makes inference-rate rendering possible in plain numpy.
    """
    n_rows = order.size
    A_all = np.zeros((n_rows, TILE_SIZE * TILE_SIZE))
    row_tile = np.repeat(np.arange(starts.size - 1), np.diff(starts))
    rty, rtx = np.divmod(row_tile, tiles_x)
    m = proj["mean2d"][order]
    r = proj["radii"][order]
    x0 = rtx * TILE_SIZE
    y0 = rty * TILE_SIZE
    last = TILE_SIZE - 1
    kx0 = np.clip(np.floor(m[:, 0] - r[:, 0] - 0.5).astype(np.int64) - x0, 0, last)
    kx1 = np.clip(np.ceil(m[:, 0] + r[:, 0] - 0.5).astype(np.int64) - x0, 0, last)
    ky0 = np.clip(np.floor(m[:, 1] - r[:, 1] - 0.5).astype(np.int64) - y0, 0, last)
    ky1 = np.clip(np.ceil(m[:, 1] + r[:, 1] - 0.5).astype(np.int64) - y0, 0, last)
    nx = kx1 - kx0 + 1
    counts = nx * (ky1 - ky0 + 1)
    rep = np.repeat(np.arange(n_rows), counts)
    offs = np.arange(rep.size) - np.repeat(np.cumsum(counts) - counts, counts)
    ix = kx0[rep] + offs % nx[rep]
    iy = ky0[rep] + offs // nx[rep]
    px = (x0[rep] + ix).astype(np.float64) + 0.5
    py = (y0[rep] + iy).astype(np.float64) + 0.5
    dx = px - m[rep, 0]
    dy = py - m[rep, 1]
    support = (np.abs(dx) <= r[rep, 0]) & (np.abs(dy) <= r[rep, 1])
    conic = proj["conic"]
    oc = order[rep]
    q = 0.5 * (conic[oc, 0, 0] * dx * dx
               + 2.0 * conic[oc, 0, 1] * dx * dy
               + conic[oc, 1, 1] * dy * dy)
    alpha = np.minimum(opacities[oc] * np.exp(-q), ALPHA_CLAMP)
    # the >= keeps the NaN-drops-to-zero behavior of the per-tile kernel
    alpha = np.where(support & (alpha >= ALPHA_SKIP), alpha, 0.0)
    A_all[rep, iy * TILE_SIZE + ix] = alpha
    return A_all


def _tile_alphas(ids, proj, opacities, px, py):
    """Effective alphas A (S, P) plus intermediates shared with backward."""
    m = proj["mean2d"][ids]
    conic = proj["conic"][ids]
    r = proj["radii"][ids]
    dx = px[None, :] - m[:, 0:1]
    dy = py[None, :] - m[:, 1:2]
    support = (np.abs(dx) <= r[:, 0:1]) & (np.abs(dy) <= r[:, 1:2])
    q = 0.5 * (conic[:, 0, 0, None] * dx * dx
               + 2.0 * conic[:, 0, 1, None] * dx * dy
               + conic[:, 1, 1, None] * dy * dy)
    raw = opacities[ids, None] * np.exp(-q)
    alpha = np.minimum(raw, ALPHA_CLAMP)
    A = np.where(support & (alpha >= ALPHA_SKIP), alpha, 0.0)
    return A, raw, dx, dy, support


def _composite(A, colors, background):
    """Front-to-back blend of effective alphas; returns per-pixel results."""
    Tbef = np.cumprod(1.0 - A, axis=0)
    Tbef = np.vstack([np.ones((1, A.shape[1])), Tbef[:-1]])
    active = Tbef >= T_TERMINATE
    w = A * Tbef * active
    color = w.T @ colors  # (P, 3)
    t_final = np.prod(np.where(active, 1.0 - A, 1.0), axis=0)
    color += t_final[:, None] * background[None, :]
    return color, 1.0 - t_final, (Tbef, active, w, t_final)


def _composite_forward(A, colors, background):
    """Same blend as _composite without materializing the intermediates.

    Transmittance before a splat is nonincreasing front to back, so the
    active rows form a prefix per pixel; t_final is just the running
    product at the last active row, fetched by index instead of re-reduced
    through a masked prod.
    """
    cp = np.cumprod(1.0 - A, axis=0)
    act_tail = cp[:-1] >= T_TERMINATE     # rows 1.. active flags
    w = np.empty_like(A)
    w[0] = A[0]
    if A.shape[0] > 1:
        np.multiply(A[1:], cp[:-1], out=w[1:])
        w[1:] *= act_tail
    last = act_tail.sum(axis=0)           # index of last active row in cp
    t_final = np.take_along_axis(cp, last[None, :], axis=0)[0]
    color = w.T @ colors
    color += t_final[:, None] * background[None, :]
    return color, 1.0 - t_final


def render(positions, covariances, opacities, sh, cam: Camera, background,
           active_sh_degree=None, return_cache=False):
    """Tile-based forward render. All inputs are posed-space, float64."""
    positions = np.asarray(positions, dtype=np.float64)
    opacities = np.asarray(opacities, dtype=np.float64)
    sh = np.asarray(sh, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    proj = project_gaussians(positions, covariances, cam)
    if active_sh_degree is not None:
        sh_used = sh[:, :num_sh_coeffs(active_sh_degree)]
    else:
        sh_used = sh
    offset = positions - cam.center()
    dist = np.linalg.norm(offset, axis=1)
    dirs = offset / np.maximum(dist, 1e-12)[:, None]
    colors = eval_sh_color(sh_used, dirs)
    order, starts, tiles_x, tiles_y = bin_tiles(
        proj["mean2d"], proj["radii"], proj["depth"], proj["valid"],
        cam.width, cam.height)
    img = np.empty((cam.height, cam.width, 3), dtype=np.float64)
    alpha = np.empty((cam.height, cam.width), dtype=np.float64)
    A_all = (_batched_alphas(order, starts, tiles_x, proj, opacities)
             if order.size else None)
    for tid in range(tiles_x * tiles_y):
        ty, tx = divmod(tid, tiles_x)
        y0, x0 = ty * TILE_SIZE, tx * TILE_SIZE
        h = min(TILE_SIZE, cam.height - y0)
        wd = min(TILE_SIZE, cam.width - x0)
        s0, s1 = starts[tid], starts[tid + 1]
        if s0 == s1:
            img[y0:y0 + h, x0:x0 + wd] = background
            alpha[y0:y0 + h, x0:x0 + wd] = 0.0
            continue
        tile_color, tile_alpha = _composite_forward(
            A_all[s0:s1], colors[order[s0:s1]], background)
        img[y0:y0 + h, x0:x0 + wd] = \
            tile_color.reshape(TILE_SIZE, TILE_SIZE, 3)[:h, :wd]
        alpha[y0:y0 + h, x0:x0 + wd] = \
            tile_alpha.reshape(TILE_SIZE, TILE_SIZE)[:h, :wd]
    out = RenderOutput(img, alpha)
    if not return_cache:
        return out
    cache = {
        "proj": proj, "colors": colors, "dirs": dirs, "dist": dist,
        "order": order, "starts": starts, "tiles_x": tiles_x, "tiles_y": tiles_y,
        "positions": positions, "covariances": covariances,
        "opacities": opacities, "sh": sh, "active_sh_degree": active_sh_degree,
        "background": background, "cam": cam,
    }
    return out, cache


def render_backward(cache, d_color, d_alpha) -> RasterGrads:
    """Exact gradients of render() w.r.t. its posed-space inputs."""
    cam: Camera = cache["cam"]
    proj = cache["proj"]
    colors = cache["colors"]
    opacities = cache["opacities"]
    background = cache["background"]
    n = cache["positions"].shape[0]
    d_color = np.asarray(d_color, dtype=np.float64)
    d_alpha = np.asarray(d_alpha, dtype=np.float64)

    d_colors = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 2, 2))
    order, starts = cache["order"], cache["starts"]
    tiles_x, tiles_y = cache["tiles_x"], cache["tiles_y"]

    for tid in range(tiles_x * tiles_y):
        ids = order[starts[tid]:starts[tid + 1]]
        if ids.size == 0:
            continue
        ty, tx = divmod(tid, tiles_x)
        px, py, h, wd = _tile_pixels(tx, ty, cam.width, cam.height)
        y0, x0 = ty * TILE_SIZE, tx * TILE_SIZE
        dC = d_color[y0:y0 + h, x0:x0 + wd].reshape(-1, 3)   # (P, 3)
        dAimg = d_alpha[y0:y0 + h, x0:x0 + wd].reshape(-1)   # (P,)
        A, raw, dx, dy, support = _tile_alphas(ids, proj, opacities, px, py)
        c = colors[ids]
        _, _, (Tbef, active, w, t_final) = _composite(A, c, background)

        d_colors[ids] += w @ dC
        # dL/dA via suffix sums over later active contributions
        ci_dot = c @ dC.T                                    # (S, P)
        v = ci_dot * w
        suffix = np.cumsum(v[::-1], axis=0)[::-1] - v
        g_T = dC @ background - dAimg                        # dL/dT_final per pixel
        one_minus = np.where(active, 1.0 - A, 1.0)
        dA = active * (ci_dot * Tbef - (suffix + g_T[None, :] * t_final[None, :]) / one_minus)
        # chain through clamp/skip/support gates to opacity and quad form
        gate = support & (raw < ALPHA_CLAMP) & (A > 0.0)
        dA = np.where(gate, dA, 0.0)
        exp_term = raw / opacities[ids, None]
        d_opacity[ids] += np.sum(dA * exp_term, axis=1)
        dq = -dA * raw
        conic = proj["conic"][ids]
        cdx = conic[:, 0, 0, None] * dx + conic[:, 0, 1, None] * dy
        cdy = conic[:, 0, 1, None] * dx + conic[:, 1, 1, None] * dy
        d_mean2d[ids, 0] += np.sum(-dq * cdx, axis=1)
        d_mean2d[ids, 1] += np.sum(-dq * cdy, axis=1)
        d_conic[ids, 0, 0] += 0.5 * np.sum(dq * dx * dx, axis=1)
        d_conic[ids, 1, 1] += 0.5 * np.sum(dq * dy * dy, axis=1)
        off_diag = 0.5 * np.sum(dq * dx * dy, axis=1)
        d_conic[ids, 0, 1] += off_diag
        d_conic[ids, 1, 0] += off_diag

    visible = proj["valid"]
    screen_grad_norm = np.linalg.norm(d_mean2d, axis=1)

    # conic = inv(cov2d): dL/dcov2d = -conic dL/dconic conic
    d_cov2d = -proj["conic"] @ d_conic @ proj["conic"]
    # cov2d = T cov T^T + reg; T = J R
    T = proj["T"]
    d_cov = np.swapaxes(T, 1, 2) @ d_cov2d @ T
    d_T = (d_cov2d + np.swapaxes(d_cov2d, 1, 2)) @ T @ cache["covariances"]
    d_J = d_T @ cam.rotation.T

    # mean2d and J both depend on the camera-space point t
    t = proj["t"]
    tz = np.where(visible, t[:, 2], 1.0)
    d_t = np.zeros((n, 3))
    d_t[:, 0] = cam.fx / tz * d_mean2d[:, 0]
    d_t[:, 1] = cam.fy / tz * d_mean2d[:, 1]
    d_t[:, 2] = (-cam.fx * t[:, 0] / tz ** 2 * d_mean2d[:, 0]
                 - cam.fy * t[:, 1] / tz ** 2 * d_mean2d[:, 1])
    d_t[:, 0] += d_J[:, 0, 2] * (-cam.fx / tz ** 2)
    d_t[:, 1] += d_J[:, 1, 2] * (-cam.fy / tz ** 2)
    d_t[:, 2] += (d_J[:, 0, 0] * (-cam.fx / tz ** 2)
                  + d_J[:, 1, 1] * (-cam.fy / tz ** 2)
                  + d_J[:, 0, 2] * (2.0 * cam.fx * t[:, 0] / tz ** 3)
                  + d_J[:, 1, 2] * (2.0 * cam.fy * t[:, 1] / tz ** 3))
    d_pos = d_t @ cam.rotation

    # color -> SH and view direction -> position
    sh = cache["sh"]
    deg = cache["active_sh_degree"]
    sh_used = sh if deg is None else sh[:, :num_sh_coeffs(deg)]
    d_sh_used, d_dirs = eval_sh_color_backward(sh_used, cache["dirs"], d_colors)
    d_sh = np.zeros_like(sh)
    d_sh[:, :d_sh_used.shape[1]] = d_sh_used
    dirs, dist = cache["dirs"], np.maximum(cache["dist"], 1e-12)
    d_pos += (d_dirs - dirs * np.sum(dirs * d_dirs, axis=1, keepdims=True)) / dist[:, None]

    mask = visible[:, None]
    return RasterGrads(
        positions=np.where(mask, d_pos, 0.0),
        covariances=np.where(visible[:, None, None], d_cov, 0.0),
        opacities=np.where(visible, d_opacity, 0.0),
        sh=np.where(visible[:, None, None], d_sh, 0.0),
        screen_grad_norm=screen_grad_norm,
        visible=visible,
    )


def render_naive(positions, covariances, opacities, sh, cam: Camera, background,
                 active_sh_degree=None):
    """Reference renderer: per-pixel loop over the full depth-sorted list.

    Shares the projection and alpha definition with the tiled path but none
    of its binning or vectorized compositing; used as an exactness oracle.
    """
    positions = np.asarray(positions, dtype=np.float64)
    opacities = np.asarray(opacities, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    proj = project_gaussians(positions, covariances, cam)
    sh_used = np.asarray(sh, dtype=np.float64)
    if active_sh_degree is not None:
        sh_used = sh_used[:, :num_sh_coeffs(active_sh_degree)]
    offset = positions - cam.center()
    dist = np.linalg.norm(offset, axis=1)
    dirs = offset / np.maximum(dist, 1e-12)[:, None]
    colors = eval_sh_color(sh_used, dirs)

    idx = np.flatnonzero(proj["valid"])
    idx = idx[np.argsort(proj["depth"][idx], kind="stable")]
    img = np.empty((cam.height, cam.width, 3), dtype=np.float64)
    alpha_map = np.empty((cam.height, cam.width), dtype=np.float64)
    m, conic, r = proj["mean2d"], proj["conic"], proj["radii"]
    for i in range(cam.height):
        for j in range(cam.width):
            x, y = j + 0.5, i + 0.5
            t_cur = 1.0
            acc = np.zeros(3)
            for s in idx:
                if t_cur < T_TERMINATE:
                    break
                ddx, ddy = x - m[s, 0], y - m[s, 1]
                if abs(ddx) > r[s, 0] or abs(ddy) > r[s, 1]:
                    continue
                q = 0.5 * (conic[s, 0, 0] * ddx * ddx
                           + 2.0 * conic[s, 0, 1] * ddx * ddy
                           + conic[s, 1, 1] * ddy * ddy)
                a = min(opacities[s] * np.exp(-q), ALPHA_CLAMP)
                if a < ALPHA_SKIP:
                    continue
                acc += colors[s] * (a * t_cur)
                t_cur *= 1.0 - a
            img[i, j] = acc + t_cur * background
            alpha_map[i, j] = 1.0 - t_cur
    return RenderOutput(img, alpha_map)
