"""Adaptive density control: KL-gated split/clone, merge, and pruning.

The controller runs between optimizer steps. Gaussians whose accumulated
screen-space position gradient is large are candidates; the KL divergence
to the nearest neighbor decides what happens to each candidate. Well
separated candidates (KL above ``kl_split_clone_min``) split or clone
depending on size; near-duplicates (KL below ``kl_merge_max``, small
scale) merge with their neighbor. Pruning then drops Gaussians that are
nearly transparent, oversized, or have drifted off the skinned template.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .gaussians import (
    GaussianCloud,
    inverse_sigmoid,
    kl_divergence_fast,
    sigmoid,
)
from .kinematics import SkinnedTemplate, distance_to_template
from .rotations import quat_to_matrix

SPLIT_SCALE_SHRINK = 1.6   # children are 1/1.6 the parent's scale per axis
CLONE_NUDGE = 0.01         # times exp(max log_scale), along the gradient direction


@dataclass
class DensifyConfig:
    grad_threshold: float = 1e-5   # mean |dL/d mean2d| in pixels; see trainer docs
    kl_split_clone_min: float = 0.4
    kl_merge_max: float = 0.1
    scale_split_threshold: float = 0.01   # world units; callers scale by extent
    scale_prune_max: float = 1.0
    opacity_prune_min: float = 0.005
    template_distance_max: float = 0.5
    densify_interval: int = 100
    densify_start: int = 100
    densify_stop: int = 1800
    merge_scale_factor: float = 1.25
    max_gaussians: int = 50_000
    opacity_reset_interval: int = 0       # 0 disables the periodic opacity reset

    def __post_init__(self):
        if self.kl_merge_max >= self.kl_split_clone_min:
            raise ValueError(
                "DensifyConfig: kl_merge_max must be < kl_split_clone_min "
                f"(got {self.kl_merge_max} >= {self.kl_split_clone_min})")
        for name in ("grad_threshold", "scale_split_threshold", "scale_prune_max",
                     "opacity_prune_min", "template_distance_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DensifyConfig: {name} must be positive")


@dataclass
class DensifyEvents:
    """One row of the densification log."""

    step: int
    count_before: int
    n_split: int = 0
    n_clone: int = 0
    n_merge: int = 0
    n_prune: int = 0
    count_after: int = 0

    CSV_HEADER = "step,count_before,n_split,n_clone,n_merge,n_prune,count_after"

    def csv_row(self) -> str:
        return (f"{self.step},{self.count_before},{self.n_split},{self.n_clone},"
                f"{self.n_merge},{self.n_prune},{self.count_after}")


def init_from_template(template: SkinnedTemplate, max_sh_degree: int = 3,
                       default_scale: float = 0.1) -> GaussianCloud:
    """One isotropic Gaussian per template vertex.

    Scale per vertex is the mean distance to its 3 nearest neighbors, so
    initial footprints roughly tile the surface. A single-vertex template
    has no neighbors and falls back to ``default_scale``.
    """
    verts = template.vertices
    n = verts.shape[0]
    if n >= 2:
        k = min(4, n)
        dists, _ = template.vertex_tree().query(verts, k=k)
        scale = np.mean(dists[:, 1:], axis=1)
    else:
        scale = np.full(n, default_scale)
    n_coeffs = (max_sh_degree + 1) ** 2
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        positions=verts.copy(),
        rotations=rot,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacity_logits=np.full(n, inverse_sigmoid(0.1)),
        sh=np.zeros((n, n_coeffs, 3)))


def nearest_pairs(cloud: GaussianCloud):
    """(neighbor index, KL to that neighbor) for every Gaussian.

    Neighbor is the Euclidean-nearest other center via a k-d tree; the KL
    is directed from each Gaussian to its neighbor.
    """
    if cloud.n < 2:
        raise ValueError("nearest_pairs needs at least 2 Gaussians")
    tree = cKDTree(cloud.positions)
    _, idx = tree.query(cloud.positions, k=2)
    neighbor = idx[:, 1].astype(np.int64)
    # Self can appear in either column when centers coincide exactly.
    self_first = idx[:, 0] != np.arange(cloud.n)
    neighbor[self_first] = idx[self_first, 0]
    kl = kl_divergence_fast(
        cloud.positions, cloud.rotations, cloud.log_scales,
        cloud.positions[neighbor], cloud.rotations[neighbor],
        cloud.log_scales[neighbor])
    return neighbor, kl


def split_gaussians(cloud: GaussianCloud, index: np.ndarray,
                    rng: np.random.Generator) -> GaussianCloud:
    """Two children per selected parent, sampled from the parent's density.

    Child positions are mu + R (s * z) with z ~ N(0, I); child scales are
    the parent's divided by SPLIT_SCALE_SHRINK. Rotation, opacity and SH
    carry over. Callers remove the parents.
    """
    parents = cloud.select(index)
    m = parents.n
    R = quat_to_matrix(parents.unit_rotations())
    s = parents.scales()
    z = rng.standard_normal((2, m, 3))
    offsets = np.einsum('pij,kpj->kpi', R, s[None, :, :] * z)
    children = GaussianCloud(
        positions=np.concatenate(parents.positions[None] + offsets, axis=0),
        rotations=np.tile(parents.rotations, (2, 1)),
        log_scales=np.tile(parents.log_scales - np.log(SPLIT_SCALE_SHRINK), (2, 1)),
        opacity_logits=np.tile(parents.opacity_logits, 2),
        sh=np.tile(parents.sh, (2, 1, 1)))
    return children


def clone_gaussians(cloud: GaussianCloud, index: np.ndarray) -> GaussianCloud:
    """Copies of the selected Gaussians, nudged along the accumulated
    position-gradient direction by CLONE_NUDGE * exp(max log_scale).

    A zero accumulated gradient leaves the copy at the parent position.
    """
    copies = cloud.select(index)
    g = cloud.grad_vec_accum[index]
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    direction = np.where(norm > 0, g / np.where(norm > 0, norm, 1.0), 0.0)
    step = CLONE_NUDGE * np.exp(np.max(copies.log_scales, axis=1, keepdims=True))
    copies.positions = copies.positions + step * direction
    copies.reset_stats()
    return copies


def merge_pair(cloud: GaussianCloud, i: int, j: int,
               scale_factor: float = 1.25) -> GaussianCloud:
    """Single merged Gaussian replacing the pair (i, j).

    Position, raw opacity and SH average; rotation comes from the
    lower-index member, whose log_scale grows by log(scale_factor) so
    the survivor covers both footprints.
    """
    g0, g1 = (i, j) if i < j else (j, i)
    merged = cloud.select(np.array([g0]))
    merged.positions = 0.5 * (cloud.positions[[g0]] + cloud.positions[[g1]])
    merged.log_scales = cloud.log_scales[[g0]] + np.log(scale_factor)
    merged.opacity_logits = 0.5 * (cloud.opacity_logits[[g0]]
                                   + cloud.opacity_logits[[g1]])
    merged.sh = 0.5 * (cloud.sh[[g0]] + cloud.sh[[g1]])
    merged.reset_stats()
    return merged


def prune(cloud: GaussianCloud, template: SkinnedTemplate,
          cfg: DensifyConfig):
    """Drop Gaussians that are nearly transparent, oversized, or far from
    the template surface. Returns (cloud, n_pruned)."""
    opacity = sigmoid(cloud.opacity_logits)
    max_scale = np.max(cloud.scales(), axis=1)
    dist = distance_to_template(template, cloud.positions)
    drop = ((opacity < cfg.opacity_prune_min)
            | (max_scale > cfg.scale_prune_max)
            | (dist > cfg.template_distance_max))
    n_pruned = int(np.count_nonzero(drop))
    if n_pruned == cloud.n:
        raise RuntimeError(
            "prune removed every Gaussian; training cannot continue "
            f"(opacity<{cfg.opacity_prune_min}: "
            f"{int(np.count_nonzero(opacity < cfg.opacity_prune_min))}, "
            f"scale>{cfg.scale_prune_max}: "
            f"{int(np.count_nonzero(max_scale > cfg.scale_prune_max))}, "
            f"distance>{cfg.template_distance_max}: "
            f"{int(np.count_nonzero(dist > cfg.template_distance_max))})")
    if n_pruned == 0:
        return cloud, 0
    return cloud.select(~drop), n_pruned


def densify_step(cloud: GaussianCloud, template: SkinnedTemplate,
                 cfg: DensifyConfig, step: int,
                 rng: np.random.Generator):
    """One full control pass. Returns (new cloud, DensifyEvents).

    Candidates are Gaussians whose mean accumulated screen gradient
    exceeds grad_threshold. Per candidate, the KL to the nearest
    neighbor routes it: above kl_split_clone_min it splits (large scale)
    or clones (small scale); below kl_merge_max with small scale it
    merges with the neighbor. A Gaussian joins at most one merge per
    step; conflicting merges resolve to the lowest-index pair. Pruning
    and a statistics reset close the pass.
    """
    events = DensifyEvents(step=step, count_before=cloud.n)
    if not np.all(np.isfinite(cloud.positions)):
        raise RuntimeError("densify_step: non-finite positions in cloud")

    candidates = cloud.mean_screen_grad() > cfg.grad_threshold
    max_scale = np.max(cloud.scales(), axis=1)
    large = max_scale > cfg.scale_split_threshold

    split_idx = np.array([], dtype=np.int64)
    clone_idx = np.array([], dtype=np.int64)
    merge_pairs = []
    if cloud.n >= 2 and np.any(candidates):
        neighbor, kl = nearest_pairs(cloud)
        grow = candidates & (kl > cfg.kl_split_clone_min)
        split_idx = np.flatnonzero(grow & large)
        clone_idx = np.flatnonzero(grow & ~large)

        # Split parents are consumed; they cannot also be merge partners.
        mergeable = candidates & (kl < cfg.kl_merge_max) & ~large
        used = set(split_idx.tolist())
        for i in np.flatnonzero(mergeable):
            j = int(neighbor[i])
            if int(i) in used or j in used:
                continue
            merge_pairs.append((int(i), j))
            used.add(int(i))
            used.add(j)

    # Honor the cap: drop clones first, then splits, keeping low indices.
    budget = cfg.max_gaussians - cloud.n + len(merge_pairs)
    grow_total = len(split_idx) + len(clone_idx)
    if grow_total > budget:
        keep = max(0, budget)
        split_idx = split_idx[:keep]
        clone_idx = clone_idx[:max(0, keep - len(split_idx))]

    removed = set(split_idx.tolist())
    for i, j in merge_pairs:
        removed.add(i)
        removed.add(j)
    keep_mask = np.ones(cloud.n, dtype=bool)
    if removed:
        keep_mask[sorted(removed)] = False

    pieces = [cloud.select(keep_mask)]
    if len(split_idx):
        pieces.append(split_gaussians(cloud, split_idx, rng))
    if len(clone_idx):
        pieces.append(clone_gaussians(cloud, clone_idx))
    for i, j in merge_pairs:
        pieces.append(merge_pair(cloud, i, j, cfg.merge_scale_factor))
    new_cloud = GaussianCloud.concatenate(pieces)

    events.n_split = len(split_idx)
    events.n_clone = len(clone_idx)
    events.n_merge = len(merge_pairs)
    new_cloud, events.n_prune = prune(new_cloud, template, cfg)
    new_cloud.reset_stats()
    events.count_after = new_cloud.n

    if not (np.all(np.isfinite(new_cloud.positions))
            and np.all(np.isfinite(new_cloud.log_scales))
            and np.all(np.isfinite(new_cloud.rotations))
            and np.all(np.isfinite(new_cloud.opacity_logits))
            and np.all(np.isfinite(new_cloud.sh))):
        raise RuntimeError("densify_step produced non-finite parameters")
    return new_cloud, events


def reset_opacity(cloud: GaussianCloud, ceiling: float = 0.01) -> None:
    """Clamp every opacity to at most `ceiling` (in opacity space), in
    place. Off by default; enable via DensifyConfig.opacity_reset_interval."""
    target = np.minimum(sigmoid(cloud.opacity_logits), ceiling)
    cloud.opacity_logits = inverse_sigmoid(target)
