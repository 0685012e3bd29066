"""Synthetic articulated scenes with exact ground truth.

A preset skeleton (a kinematic chain or a 15-joint biped) gets a
template of vertices scattered along its bones, a ground-truth Gaussian
per vertex, a sinusoidal joint trajectory, and an orbit of calibrated
cameras. Every frame is rendered with the package's own rasterizer, so
the dataset is exactly representable by the model family. Written poses
can carry Gaussian noise while the clean poses stay available as hidden
ground truth, which is what makes pose refinement measurable.

Camera 0 is the training view; the remaining cameras are held out.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import sceneio
from .density import init_from_template
from .gaussians import GaussianCloud, inverse_sigmoid
from .kinematics import Pose, SkinnedTemplate, blend_transforms, \
    forward_kinematics, lbs_transform_gaussian
from .rasterizer import Camera, camera_look_at, render
from .sh import rgb_to_sh

BONE_RADIUS = 0.03      # radial scatter of template vertices, meters
GT_OPACITY = 0.9
MASK_THRESHOLD = 0.5


@dataclass
class SyntheticSceneSpec:
    preset: str = "biped-15"
    gaussians_per_bone: int = 25
    n_frames: int = 30
    n_cameras: int = 3
    width: int = 128
    height: int = 128
    amplitude: float = 0.3      # radians, peak joint angle
    noise: float = 0.0          # sigma of written-pose rotation noise
    seed: int = 0
    orbit_radius: float = 2.8
    focal_scale: float = 1.2    # fx = fy = focal_scale * height

    def __post_init__(self):
        if self.gaussians_per_bone <= 0 or self.n_frames <= 0 \
                or self.n_cameras <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("SyntheticSceneSpec: counts must be positive")
        if not 0 <= self.amplitude < np.pi / 2:
            raise ValueError(
                f"SyntheticSceneSpec: amplitude {self.amplitude} outside "
                "[0, pi/2)")
        if self.noise < 0:
            raise ValueError("SyntheticSceneSpec: noise must be >= 0")
        parse_preset(self.preset)

    @staticmethod
    def from_dict(d: dict) -> "SyntheticSceneSpec":
        kw = {}
        types = {"preset": str, "gaussians_per_bone": int, "n_frames": int,
                 "n_cameras": int, "width": int, "height": int,
                 "amplitude": float, "noise": float, "seed": int,
                 "orbit_radius": float, "focal_scale": float}
        for key, val in d.items():
            if key not in types:
                raise ValueError(f"unknown scene spec key '{key}'")
            kw[key] = types[key](val)
        return SyntheticSceneSpec(**kw)

    def to_dict(self) -> dict:
        return {"preset": self.preset,
                "gaussians_per_bone": self.gaussians_per_bone,
                "n_frames": self.n_frames, "n_cameras": self.n_cameras,
                "width": self.width, "height": self.height,
                "amplitude": self.amplitude, "noise": self.noise,
                "seed": self.seed, "orbit_radius": self.orbit_radius,
                "focal_scale": self.focal_scale}


def parse_preset(name: str):
    """Returns (parents, rest_joints) for 'chain-N' or 'biped-15'.

    chain-N has N bones (N+1 joints) hanging along -y. The biped stands
    head toward -y so that orbit cameras (whose up vector is -y) see it
    upright.
    """
    if name.startswith("chain-"):
        try:
            n_bones = int(name.split("-", 1)[1])
        except ValueError:
            raise ValueError(f"bad chain preset '{name}'")
        if n_bones < 1:
            raise ValueError(f"chain needs >= 1 bone, got {n_bones}")
        k = n_bones + 1
        parents = np.arange(-1, k - 1)
        joints = np.zeros((k, 3))
        joints[:, 1] = -0.3 * np.arange(k)
        return parents, joints
    if name == "biped-15":
        joints = np.array([
            [0.00, 0.00, 0.00],    # 0 pelvis (root)
            [0.00, -0.25, 0.00],   # 1 spine
            [0.00, -0.55, 0.00],   # 2 head
            [0.09, 0.05, 0.00],    # 3 left hip
            [0.10, 0.45, 0.00],    # 4 left knee
            [0.11, 0.85, 0.00],    # 5 left ankle
            [-0.09, 0.05, 0.00],   # 6 right hip
            [-0.10, 0.45, 0.00],   # 7 right knee
            [-0.11, 0.85, 0.00],   # 8 right ankle
            [0.18, -0.40, 0.00],   # 9 left shoulder
            [0.42, -0.40, 0.00],   # 10 left elbow
            [0.65, -0.40, 0.00],   # 11 left wrist
            [-0.18, -0.40, 0.00],  # 12 right shoulder
            [-0.42, -0.40, 0.00],  # 13 right elbow
            [-0.65, -0.40, 0.00],  # 14 right wrist
        ])
        parents = np.array([-1, 0, 1, 0, 3, 4, 0, 6, 7, 1, 9, 10, 1, 12, 13])
        return parents, joints
    raise ValueError(f"unknown skeleton preset '{name}' "
                     "(expected chain-N or biped-15)")


def build_template(parents, rest_joints, gaussians_per_bone: int,
                   rng: np.random.Generator,
                   bone_radius: float = BONE_RADIUS) -> SkinnedTemplate:
    """Vertices scattered along each bone with a small radial offset.

    Skinning weights are analytic: inverse distance to the 2 nearest
    joints, normalized. A vertex sitting exactly on a joint gets weight
    1 for it.
    """
    parents = np.asarray(parents)
    rest_joints = np.asarray(rest_joints, dtype=np.float64)
    bones = [(int(parents[j]), j) for j in range(len(parents))
             if parents[j] >= 0]
    verts = []
    for a, b in bones:
        pa, pb = rest_joints[a], rest_joints[b]
        axis = pb - pa
        t = rng.random((gaussians_per_bone, 1))
        # radial scatter perpendicular to the bone
        raw = rng.normal(size=(gaussians_per_bone, 3))
        axis_unit = axis / max(np.linalg.norm(axis), 1e-12)
        raw -= (raw @ axis_unit)[:, None] * axis_unit
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        radial = np.where(norms > 1e-12, raw / np.maximum(norms, 1e-12), 0.0)
        verts.append(pa + t * axis + bone_radius * radial)
    verts = np.concatenate(verts, axis=0)

    d = np.linalg.norm(verts[:, None, :] - rest_joints[None, :, :], axis=2)
    order = np.argsort(d, axis=1)
    near2 = order[:, :2]
    d2 = np.take_along_axis(d, near2, axis=1)
    weights = np.zeros((verts.shape[0], len(parents)))
    on_joint = d2[:, 0] < 1e-12
    inv = 1.0 / np.where(d2 > 1e-12, d2, 1.0)
    inv = inv / inv.sum(axis=1, keepdims=True)
    for v in range(verts.shape[0]):
        if on_joint[v]:
            weights[v, near2[v, 0]] = 1.0
        else:
            weights[v, near2[v]] = inv[v]
    return SkinnedTemplate(parents, rest_joints, verts, weights)


def make_gt_cloud(template: SkinnedTemplate,
                  rng: np.random.Generator) -> GaussianCloud:
    """Ground-truth Gaussians: one per vertex, saturated random colors,
    high opacity, sizes from local vertex spacing, SH degree 0."""
    cloud = init_from_template(template, max_sh_degree=0)
    colors = rng.uniform(0.15, 0.95, (cloud.n, 3))
    cloud.sh = rgb_to_sh(colors)[:, None, :]
    cloud.opacity_logits = np.full(cloud.n, inverse_sigmoid(GT_OPACITY))
    return cloud


def pose_trajectory(n_joints: int, n_frames: int, amplitude: float,
                    rng: np.random.Generator):
    """Sinusoidal joint swings about per-joint random axes, on top of a
    full-revolution root yaw across the sequence.

    The turntable spin means a single fixed camera sees every side of
    the subject, so one training view constrains the geometry; without
    it the unseen side is unconstrained and novel views degrade. The
    root never translates."""
    axes = rng.normal(size=(n_joints, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    freqs = rng.integers(1, 3, n_joints)
    phases = rng.uniform(0, 2 * np.pi, n_joints)
    poses = []
    for t in range(n_frames):
        u = t / max(n_frames, 1)
        angles = amplitude * np.sin(2 * np.pi * freqs * u + phases)
        rot = axes * angles[:, None]
        # wrap the yaw into (-pi, pi]: poses carry canonical rotation vectors
        yaw = 2.0 * np.pi * u
        rot[0] = np.array([0.0, yaw if yaw <= np.pi else yaw - 2.0 * np.pi, 0.0])
        poses.append(Pose(rot, np.zeros(3)))
    return poses


def orbit_cameras(center, radius: float, n_cameras: int, width: int,
                  height: int, focal_scale: float):
    """Cameras on a horizontal circle around the subject, evenly spaced.

    The subject hangs head toward -y, so -y is 'up' for every camera."""
    f = focal_scale * height
    up = np.array([0.0, -1.0, 0.0])
    cams = {}
    for c in range(n_cameras):
        phi = 2 * np.pi * c / n_cameras
        eye = center + radius * np.array([np.cos(phi), 0.0, np.sin(phi)])
        cams[f"cam{c:02d}"] = camera_look_at(
            eye, center, up, fx=f, fy=f, width=width, height=height)
    return cams


def pose_cloud(cloud: GaussianCloud, template: SkinnedTemplate, pose: Pose):
    """Canonical cloud -> posed (positions, covariances) via FK + LBS."""
    jt = forward_kinematics(template, pose)
    G, b = blend_transforms(template.weights, jt)
    return lbs_transform_gaussian(cloud.positions, cloud.covariances(), G, b)


def generate_synthetic(spec: SyntheticSceneSpec, out_dir: str):
    """Writes the dataset and returns (dataset, gt_cloud, clean_poses).

    Images are renders of the clean poses; written pose files carry the
    optional noise. A ground-truth checkpoint (cloud + cache mapping the
    noisy poses back to clean rotations) lands in out_dir/gt for
    skip-training evaluation.
    """
    rng = np.random.default_rng(spec.seed)
    parents, rest_joints = parse_preset(spec.preset)
    template = build_template(parents, rest_joints, spec.gaussians_per_bone,
                              rng)
    gt_cloud = make_gt_cloud(template, rng)
    clean_poses = pose_trajectory(len(parents), spec.n_frames,
                                  spec.amplitude, rng)

    # Frame on the bounding-box midpoint; the centroid is limb-biased.
    center = 0.5 * (template.vertices.min(axis=0) + template.vertices.max(axis=0))
    cameras = orbit_cameras(center, spec.orbit_radius, spec.n_cameras,
                            spec.width, spec.height, spec.focal_scale)
    cam_ids = sorted(cameras)

    noisy_poses = []
    for pose in clean_poses:
        rot = pose.rotations.copy()
        if spec.noise > 0:
            jitter = rng.normal(0.0, spec.noise, rot.shape)
            jitter[template.root] = 0.0   # refinement can't fix the root
            rot = rot + jitter
        noisy_poses.append(Pose(rot, pose.translation.copy()))

    for sub in ("images", "masks", "poses"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    sceneio.save_template(os.path.join(out_dir, "template.json"), template)
    sceneio.save_cameras(os.path.join(out_dir, "cameras.json"), cameras)

    background = np.zeros(3)
    records = []
    train_ids, eval_ids = [], []
    for t, pose in enumerate(clean_poses):
        positions, covariances = pose_cloud(gt_cloud, template, pose)
        pose_rel = f"poses/frame_{t:03d}.json"
        sceneio.save_pose(os.path.join(out_dir, pose_rel), noisy_poses[t])
        for c, cam_id in enumerate(cam_ids):
            out = render(positions, covariances, gt_cloud.opacities(),
                         gt_cloud.sh, cameras[cam_id], background)
            img_rel = f"images/frame_{t:03d}_{cam_id}.ppm"
            mask_rel = f"masks/frame_{t:03d}_{cam_id}.pgm"
            sceneio.write_ppm(os.path.join(out_dir, img_rel), out.color)
            sceneio.write_pgm(os.path.join(out_dir, mask_rel),
                              (out.alpha > MASK_THRESHOLD).astype(np.float64))
            frame_id = len(records)
            records.append({"image": img_rel, "mask": mask_rel,
                            "camera": cam_id, "pose": pose_rel})
            (train_ids if c == 0 else eval_ids).append(frame_id)

    sceneio.save_frame_index(os.path.join(out_dir, "frames.json"), records)
    sceneio.save_split(os.path.join(out_dir, "split.json"),
                       train_ids, eval_ids)
    spec_text = sceneio.format_config_text(
        {k: v for k, v in spec.to_dict().items()})
    with open(os.path.join(out_dir, "scene.cfg"), "w") as f:
        f.write(spec_text)

    # Ground-truth checkpoint: cache resolves each written (possibly
    # noisy) pose back to the clean rotations the images were made with.
    gt_cache = sceneio.InferenceCache(
        weights=template.weights.copy(),
        refined_rotations=np.stack([p.rotations for p in clean_poses]),
        raw_poses=[p.copy() for p in noisy_poses])
    sceneio.save_checkpoint(
        os.path.join(out_dir, "gt"),
        sceneio.Checkpoint(gt_cloud, template, sh_degree=0, cache=gt_cache))

    dataset = sceneio.load_dataset(out_dir, check_images=False)
    return dataset, gt_cloud, clean_poses
