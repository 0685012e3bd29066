import numpy as np
import pytest

from splatskin.density import (CLONE_NUDGE, SPLIT_SCALE_SHRINK, DensifyConfig,
                               DensifyEvents, clone_gaussians, densify_step,
                               init_from_template, merge_pair, nearest_pairs,
                               prune, reset_opacity, split_gaussians)
from splatskin.gaussians import (GaussianCloud, inverse_sigmoid,
                                 kl_divergence, sigmoid)
from splatskin.kinematics import SkinnedTemplate
from splatskin.rotations import quat_to_matrix

from common import random_cloud


def line_template(n_verts=6, spacing=0.5):
    verts = np.zeros((n_verts, 3))
    verts[:, 0] = spacing * np.arange(n_verts)
    w = np.ones((n_verts, 1))
    return SkinnedTemplate(np.array([-1]), np.zeros((1, 3)), verts, w)


def seeded_cloud(n, seed, **kw):
    return random_cloud(n, np.random.default_rng(seed), **kw)


def open_config(**kw):
    """Config whose prune thresholds never fire for the test clouds."""
    base = dict(scale_prune_max=100.0, template_distance_max=100.0,
                opacity_prune_min=1e-6)
    base.update(kw)
    return DensifyConfig(**base)


# ------------------------------------------------------------ initialization

def test_init_from_template_counts_and_scales():
    t = line_template(6, spacing=0.5)
    cloud = init_from_template(t, max_sh_degree=2)
    assert cloud.n == 6
    assert cloud.sh.shape == (6, 9, 3)
    assert np.all(cloud.sh == 0.0)
    np.testing.assert_allclose(cloud.positions, t.vertices)
    np.testing.assert_allclose(cloud.rotations,
                               np.tile([1.0, 0, 0, 0], (6, 1)))
    np.testing.assert_allclose(sigmoid(cloud.opacity_logits), 0.1)
    # interior vertex: 3 nearest neighbors at distances 0.5, 0.5, 1.0
    np.testing.assert_allclose(np.exp(cloud.log_scales[2]),
                               np.full(3, (0.5 + 0.5 + 1.0) / 3))
    # end vertex: 0.5, 1.0, 1.5
    np.testing.assert_allclose(np.exp(cloud.log_scales[0]),
                               np.full(3, (0.5 + 1.0 + 1.5) / 3))


def test_init_single_vertex_fallback():
    t = SkinnedTemplate(np.array([-1]), np.zeros((1, 3)),
                        np.array([[0.1, 0.2, 0.3]]), np.ones((1, 1)))
    cloud = init_from_template(t, default_scale=0.07)
    np.testing.assert_allclose(np.exp(cloud.log_scales), 0.07)


# ------------------------------------------------------------- nearest pairs

def test_nearest_pairs_brute_force():
    cloud = seeded_cloud(60, 1, spread=1.0)
    neighbor, kl = nearest_pairs(cloud)
    d = np.linalg.norm(cloud.positions[:, None] - cloud.positions[None], axis=2)
    np.fill_diagonal(d, np.inf)
    np.testing.assert_array_equal(neighbor, np.argmin(d, axis=1))
    covs = cloud.covariances()
    for i in (0, 13, 42):
        j = neighbor[i]
        want = kl_divergence(cloud.positions[i], covs[i],
                             cloud.positions[j], covs[j])
        np.testing.assert_allclose(kl[i], want, atol=1e-12)


def test_nearest_pairs_coincident_centers():
    cloud = seeded_cloud(4, 2)
    cloud.positions[1] = cloud.positions[0]
    neighbor, _ = nearest_pairs(cloud)
    assert neighbor[0] == 1 and neighbor[1] == 0


def test_nearest_pairs_needs_two():
    with pytest.raises(ValueError):
        nearest_pairs(seeded_cloud(1, 3))


# --------------------------------------------------------------------- split

def test_split_shrinks_and_carries():
    cloud = seeded_cloud(5, 4)
    rng = np.random.default_rng(0)
    kids = split_gaussians(cloud, np.array([1, 3]), rng)
    assert kids.n == 4
    np.testing.assert_allclose(
        kids.log_scales,
        np.tile(cloud.log_scales[[1, 3]] - np.log(SPLIT_SCALE_SHRINK), (2, 1)))
    np.testing.assert_array_equal(kids.rotations,
                                  np.tile(cloud.rotations[[1, 3]], (2, 1)))
    np.testing.assert_array_equal(kids.opacity_logits,
                                  np.tile(cloud.opacity_logits[[1, 3]], 2))
    np.testing.assert_array_equal(kids.sh, np.tile(cloud.sh[[1, 3]], (2, 1, 1)))


def test_split_seeded_deterministic():
    cloud = seeded_cloud(5, 5)
    a = split_gaussians(cloud, np.array([0, 2]), np.random.default_rng(9))
    b = split_gaussians(cloud, np.array([0, 2]), np.random.default_rng(9))
    assert np.array_equal(a.positions, b.positions)


def test_split_samples_parent_density():
    # child offsets are R (s*z), z ~ N(0, I): mean 0, covariance R s^2 R^T
    cloud = seeded_cloud(1, 6, scale_range=(-1.5, -1.0))
    rng = np.random.default_rng(10)
    m = 4000
    reps = GaussianCloud(
        positions=np.tile(cloud.positions, (m, 1)),
        rotations=np.tile(cloud.rotations, (m, 1)),
        log_scales=np.tile(cloud.log_scales, (m, 1)),
        opacity_logits=np.tile(cloud.opacity_logits, m),
        sh=np.tile(cloud.sh, (m, 1, 1)))
    kids = split_gaussians(reps, np.arange(m), rng)
    offsets = kids.positions - cloud.positions[0]
    R = quat_to_matrix(cloud.unit_rotations())[0]
    want_cov = R @ np.diag(np.exp(2 * cloud.log_scales[0])) @ R.T
    got_cov = offsets.T @ offsets / offsets.shape[0]
    sd = np.sqrt(np.exp(2 * cloud.log_scales[0]).max())
    assert np.abs(offsets.mean(axis=0)).max() < 4 * sd / np.sqrt(2 * m)
    np.testing.assert_allclose(got_cov, want_cov, atol=0.15 * sd ** 2)


# --------------------------------------------------------------------- clone

def test_clone_nudges_along_gradient():
    cloud = seeded_cloud(3, 7)
    g = np.array([[3.0, 4.0, 0.0]])
    cloud.accumulate_stats(np.ones(3), np.tile(g / 5.0, (3, 1)) * 5.0,
                           np.array([True, True, True]))
    kids = clone_gaussians(cloud, np.array([1]))
    step = CLONE_NUDGE * np.exp(cloud.log_scales[1].max())
    want = cloud.positions[1] + step * np.array([0.6, 0.8, 0.0])
    np.testing.assert_allclose(kids.positions[0], want, atol=1e-12)
    np.testing.assert_array_equal(kids.rotations, cloud.rotations[[1]])
    np.testing.assert_array_equal(kids.log_scales, cloud.log_scales[[1]])
    np.testing.assert_array_equal(kids.sh, cloud.sh[[1]])
    assert np.all(kids.grad_accum == 0) and np.all(kids.grad_count == 0)


def test_clone_zero_grad_copies_in_place():
    cloud = seeded_cloud(2, 8)
    kids = clone_gaussians(cloud, np.array([0]))
    np.testing.assert_array_equal(kids.positions, cloud.positions[[0]])


# --------------------------------------------------------------------- merge

def test_merge_pair_semantics():
    cloud = seeded_cloud(4, 9)
    got = merge_pair(cloud, 3, 1, scale_factor=1.25)
    assert got.n == 1
    np.testing.assert_allclose(
        got.positions[0], 0.5 * (cloud.positions[1] + cloud.positions[3]))
    np.testing.assert_allclose(
        got.log_scales[0], cloud.log_scales[1] + np.log(1.25))
    np.testing.assert_allclose(
        got.opacity_logits[0],
        0.5 * (cloud.opacity_logits[1] + cloud.opacity_logits[3]))
    np.testing.assert_allclose(got.sh[0], 0.5 * (cloud.sh[1] + cloud.sh[3]))
    np.testing.assert_array_equal(got.rotations[0], cloud.rotations[1])


def test_merge_identical_pair_is_fixed_point():
    cloud = seeded_cloud(2, 10)
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh"):
        arr = getattr(cloud, name)
        arr[1] = arr[0]
    got = merge_pair(cloud, 0, 1, scale_factor=1.25)
    np.testing.assert_array_equal(got.positions[0], cloud.positions[0])
    np.testing.assert_allclose(got.log_scales[0],
                               cloud.log_scales[0] + np.log(1.25))
    np.testing.assert_array_equal(got.sh[0], cloud.sh[0])


# --------------------------------------------------------------------- prune

def test_prune_rules():
    t = line_template()
    cloud = init_from_template(t, max_sh_degree=0)
    cloud.opacity_logits[:] = inverse_sigmoid(0.5)
    cloud.opacity_logits[1] = inverse_sigmoid(0.001)   # transparent
    cloud.log_scales[2, 0] = np.log(3.0)               # oversized
    cloud.positions[3] += np.array([0.0, 9.0, 0.0])    # off template
    cfg = DensifyConfig(opacity_prune_min=0.005, scale_prune_max=1.0,
                        template_distance_max=0.5)
    out, n = prune(cloud, t, cfg)
    assert n == 3
    assert out.n == 3
    np.testing.assert_array_equal(out.positions,
                                  cloud.positions[[0, 4, 5]])


def test_prune_all_raises_with_counts():
    t = line_template(3)
    cloud = init_from_template(t)
    cloud.opacity_logits[:] = inverse_sigmoid(1e-4)
    with pytest.raises(RuntimeError, match="opacity"):
        prune(cloud, t, DensifyConfig())


def test_reset_opacity_clamps():
    cloud = seeded_cloud(10, 11)
    reset_opacity(cloud, ceiling=0.01)
    assert np.all(sigmoid(cloud.opacity_logits) <= 0.01 + 1e-12)


# --------------------------------------------------------------- densify_step

def arm(cloud, idx, grad=1.0):
    """Mark idx as high-gradient candidates (single visible render)."""
    norms = np.zeros(cloud.n)
    norms[idx] = grad
    cloud.accumulate_stats(norms, np.zeros((cloud.n, 3)),
                           np.ones(cloud.n, dtype=bool))


def spread_cloud(n, seed, spacing=2.0, scale=0.05):
    """Well-separated identical-shape Gaussians: huge KL to any neighbor."""
    cloud = seeded_cloud(n, seed)
    cloud.positions = spacing * np.arange(n)[:, None] * np.array([[1.0, 0, 0]])
    cloud.log_scales[:] = np.log(scale)
    return cloud


def test_densify_quiet_when_below_threshold():
    t = line_template()
    cloud = spread_cloud(6, 12)
    out, ev = densify_step(cloud, t, open_config(grad_threshold=2e-4), 100,
                           np.random.default_rng(0))
    assert (ev.n_split, ev.n_clone, ev.n_merge) == (0, 0, 0)
    assert out.n == 6
    np.testing.assert_array_equal(out.positions, cloud.positions)


def test_densify_splits_large_candidates():
    t = line_template()
    cloud = spread_cloud(6, 13, scale=0.05)
    arm(cloud, [2])
    cfg = open_config(scale_split_threshold=0.01)  # 0.05 counts as large
    out, ev = densify_step(cloud, t, cfg, 100, np.random.default_rng(1))
    assert (ev.n_split, ev.n_clone, ev.n_merge) == (1, 0, 0)
    assert out.n == 7  # -1 parent +2 children
    assert ev.count_after == 7


def test_densify_clones_small_candidates():
    t = line_template()
    cloud = spread_cloud(6, 14, scale=0.05)
    arm(cloud, [2, 4])
    cfg = open_config(scale_split_threshold=0.2)   # 0.05 counts as small
    out, ev = densify_step(cloud, t, cfg, 100, np.random.default_rng(1))
    assert (ev.n_split, ev.n_clone, ev.n_merge) == (0, 2, 0)
    assert out.n == 8
    # parents stay put when cloning
    for p in cloud.positions:
        assert np.any(np.all(out.positions == p, axis=1))


def test_densify_mid_band_kl_does_nothing():
    # candidates whose neighbor KL sits inside [kl_merge_max,
    # kl_split_clone_min] neither grow nor merge
    t = line_template()
    cloud = spread_cloud(4, 15, spacing=1.0, scale=0.05)
    # place a near-twin of 0 at moderate distance: KL = 0.5 * (d/s)^2 = 0.18
    cloud.positions[1] = cloud.positions[0] + np.array([0.03, 0, 0])
    cloud.rotations[1] = cloud.rotations[0]
    cloud.log_scales[1] = cloud.log_scales[0]
    arm(cloud, [0, 1])
    cfg = open_config(kl_merge_max=0.1, kl_split_clone_min=0.4,
                      scale_split_threshold=0.2)
    out, ev = densify_step(cloud, t, cfg, 100, np.random.default_rng(2))
    assert (ev.n_split, ev.n_clone, ev.n_merge) == (0, 0, 0)
    assert out.n == 4


def test_densify_merges_near_duplicates():
    t = line_template()
    cloud = spread_cloud(4, 16, spacing=1.0, scale=0.05)
    # near-twin: KL = 0.5 * (0.001/0.05)^2 = 2e-4 < 0.1
    cloud.positions[1] = cloud.positions[0] + np.array([0.001, 0, 0])
    cloud.rotations[1] = cloud.rotations[0]
    cloud.log_scales[1] = cloud.log_scales[0]
    arm(cloud, [0, 1])
    cfg = open_config(kl_merge_max=0.1, scale_split_threshold=0.2)
    out, ev = densify_step(cloud, t, cfg, 100, np.random.default_rng(3))
    assert (ev.n_split, ev.n_clone, ev.n_merge) == (0, 0, 1)
    assert out.n == 3
    mid = 0.5 * (cloud.positions[0] + cloud.positions[1])
    assert np.any(np.all(np.isclose(out.positions, mid), axis=1))


def test_densify_merge_pairs_disjoint():
    # three mutual near-duplicates: only one merge may fire per step
    t = line_template()
    cloud = spread_cloud(5, 17, spacing=1.0, scale=0.05)
    for i in (1, 2):
        cloud.positions[i] = cloud.positions[0] + i * np.array([1e-3, 0, 0])
        cloud.rotations[i] = cloud.rotations[0]
        cloud.log_scales[i] = cloud.log_scales[0]
    arm(cloud, [0, 1, 2])
    cfg = open_config(kl_merge_max=0.1, scale_split_threshold=0.2)
    out, ev = densify_step(cloud, t, cfg, 100, np.random.default_rng(4))
    assert ev.n_merge == 1
    assert out.n == 4


def test_densify_zero_kl_gate_grows_all_candidates():
    # kl_split_clone_min = 0 reduces the gate to the gradient test alone
    t = line_template()
    cloud = spread_cloud(6, 18, scale=0.05)
    arm(cloud, [0, 1, 2, 3])
    cfg = open_config(kl_split_clone_min=1e-12, kl_merge_max=1e-13,
                      scale_split_threshold=0.2)
    out, ev = densify_step(cloud, t, cfg, 100, np.random.default_rng(5))
    assert ev.n_clone + ev.n_split == 4


def test_densify_respects_cap():
    t = line_template()
    cloud = spread_cloud(6, 19, scale=0.05)
    arm(cloud, [0, 1, 2, 3, 4, 5])
    cfg = open_config(scale_split_threshold=0.2, max_gaussians=8)
    out, ev = densify_step(cloud, t, cfg, 100, np.random.default_rng(6))
    assert out.n <= 8
    assert ev.n_clone == 2


def test_densify_deterministic():
    t = line_template()
    a = spread_cloud(7, 20, scale=0.05)
    arm(a, [1, 3])
    b = spread_cloud(7, 20, scale=0.05)
    arm(b, [1, 3])
    cfg = open_config(scale_split_threshold=0.01)
    out_a, _ = densify_step(a, t, cfg, 200, np.random.default_rng(42))
    out_b, _ = densify_step(b, t, cfg, 200, np.random.default_rng(42))
    assert np.array_equal(out_a.positions, out_b.positions)
    assert np.array_equal(out_a.log_scales, out_b.log_scales)


def test_densify_resets_stats():
    t = line_template()
    cloud = spread_cloud(6, 21)
    arm(cloud, [2])
    out, _ = densify_step(cloud, t, open_config(scale_split_threshold=0.2),
                          100, np.random.default_rng(7))
    assert np.all(out.grad_accum == 0)
    assert np.all(out.grad_count == 0)
    assert np.all(out.grad_vec_accum == 0)


def test_densify_config_validation():
    with pytest.raises(ValueError, match="kl_merge_max"):
        DensifyConfig(kl_merge_max=0.5, kl_split_clone_min=0.4)
    with pytest.raises(ValueError, match="grad_threshold"):
        DensifyConfig(grad_threshold=-1.0)


def test_events_csv_row():
    assert DensifyEvents.CSV_HEADER == \
        "step,count_before,n_split,n_clone,n_merge,n_prune,count_after"
    ev = DensifyEvents(step=300, count_before=10, n_split=1, n_clone=2,
                       n_merge=1, n_prune=0, count_after=12)
    assert ev.csv_row() == "300,10,1,2,1,0,12"
