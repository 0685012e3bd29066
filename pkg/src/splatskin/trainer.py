"""End-to-end optimization: pose refinement, FK, LBS, render, loss, Adam.

One frame per step, cycled in dataset order (the monocular regime: a
single training camera watching a moving subject). Densification runs on
a fixed schedule between steps. Everything is deterministic given the
config seed: the only random draws are network init and split sampling,
both keyed by (seed, purpose, step).
"""

import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import sceneio
from .density import DensifyConfig, DensifyEvents, densify_step, \
    init_from_template, reset_opacity
from .gaussians import CloudGrads, GaussianCloud, build_covariance, \
    build_covariance_backward, sigmoid
from .kinematics import Pose, SkinnedTemplate, blend_transforms, \
    forward_kinematics_backward, forward_kinematics_matrices, lbs_backward, \
    lbs_transform_gaussian, nearest_vertex_weights
from .losses import LossWeights, psnr, total_loss
from .nets import DeformNets, cache_inference_artifacts, lbs_offset_net, \
    lbs_weight_field, lbs_weight_field_backward, pose_refine_net, \
    refine_pose_matrices, refine_pose_matrices_backward
from .rasterizer import render, render_backward
from .rotations import quat_normalize

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

TRAIN_LOG_HEADER = "iter,loss,psnr,count,ms_per_iter"
EVAL_LOG_HEADER = "frame,psnr,ssim"


@dataclass
class TrainConfig:
    iterations: int = 3000
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    # single-view captures overfit view-dependent color badly; degree 0 is
    # the safe default, raise it when the training cameras surround the scene
    max_sh_degree: int = 0
    sh_promote_interval: int = 500
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_nets: float = 1e-4
    lambda_mask: float = 0.5
    lambda_ssim: float = 0.01
    pose_refine: bool = True
    lbs_offsets: bool = True
    n_freqs: int = 10
    densify_grad_threshold: float = 1e-5
    densify_start: int = 100
    densify_stop: int = -1          # -1 resolves to 60% of iterations
    densify_interval: int = 100
    kl_split_clone_min: float = 0.4
    kl_merge_max: float = 0.1
    scale_split_pct: float = 0.01   # thresholds as fractions of scene extent
    scale_prune_pct: float = 0.5
    opacity_prune_min: float = 0.005
    template_distance_pct: float = 0.15
    max_gaussians: int = 50_000
    opacity_reset_interval: int = 0
    checkpoint_cache: bool = True   # bake inference artifacts at the end

    _BOOL = ("pose_refine", "lbs_offsets", "checkpoint_cache")

    def resolved_densify_stop(self) -> int:
        if self.densify_stop >= 0:
            return self.densify_stop
        return int(0.6 * self.iterations)

    def densify_config(self, scene_extent: float) -> DensifyConfig:
        return DensifyConfig(
            grad_threshold=self.densify_grad_threshold,
            kl_split_clone_min=self.kl_split_clone_min,
            kl_merge_max=self.kl_merge_max,
            scale_split_threshold=self.scale_split_pct * scene_extent,
            scale_prune_max=self.scale_prune_pct * scene_extent,
            opacity_prune_min=self.opacity_prune_min,
            template_distance_max=self.template_distance_pct * scene_extent,
            densify_interval=self.densify_interval,
            densify_start=self.densify_start,
            densify_stop=self.resolved_densify_stop(),
            max_gaussians=self.max_gaussians,
            opacity_reset_interval=self.opacity_reset_interval)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_mask=self.lambda_mask,
                           lambda_ssim=self.lambda_ssim)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "background":
                out[f.name] = ",".join(repr(float(x)) for x in v)
            elif f.name in self._BOOL:
                out[f.name] = "true" if v else "false"
            else:
                out[f.name] = str(v)
        return out

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        kw = {}
        by_name = {f.name: f for f in fields(TrainConfig)}
        for key, val in d.items():
            if key not in by_name:
                raise ValueError(f"unknown config key '{key}'")
            if key == "background":
                kw[key] = tuple(float(x) for x in val.split(","))
            elif key in TrainConfig._BOOL:
                if val not in ("true", "false"):
                    raise ValueError(f"config key '{key}' wants true/false, "
                                     f"got '{val}'")
                kw[key] = val == "true"
            elif by_name[key].type in (int, "int"):
                kw[key] = int(val)
            else:
                kw[key] = float(val)
        return TrainConfig(**kw)

    @staticmethod
    def from_file(path: str) -> "TrainConfig":
        return TrainConfig.from_dict(sceneio.load_config_file(path))

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(sceneio.format_config_text(self.to_dict()))


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def like(arr: np.ndarray) -> "AdamState":
        return AdamState(np.zeros_like(arr), np.zeros_like(arr))


def adam_update(state: AdamState, param: np.ndarray, grad: np.ndarray,
                lr: float) -> None:
    """One bias-corrected Adam step, in place on param."""
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    mhat = state.m / (1.0 - ADAM_BETA1 ** state.t)
    vhat = state.v / (1.0 - ADAM_BETA2 ** state.t)
    param -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# One-frame forward/backward pipeline

@dataclass
class FrameGrads:
    cloud: CloudGrads
    pose_net: tuple = None      # (d_weights, d_biases) or None
    lbs_net: tuple = None
    screen_grad_norm: np.ndarray = None
    visible: np.ndarray = None


def forward_frame(cloud: GaussianCloud, template: SkinnedTemplate,
                  nets: DeformNets, pose: Pose, camera, background,
                  active_sh_degree=None):
    """Canonical cloud -> posed render for one frame. Returns (out, cache)."""
    if nets.pose_net is not None:
        local, refine_cache = refine_pose_matrices(pose, nets.pose_net,
                                                   template.root)
    else:
        local, refine_cache = pose.local_matrices(), None
    jt = forward_kinematics_matrices(template, local, pose.translation)
    base_w, _ = nearest_vertex_weights(template, cloud.positions)
    w, lbs_cache = lbs_weight_field(nets, base_w, cloud.positions)
    G, b = blend_transforms(w, jt)
    cov3d = build_covariance(cloud.unit_rotations(), cloud.log_scales)
    posed_p, posed_cov = lbs_transform_gaussian(cloud.positions, cov3d, G, b)
    opacities = sigmoid(cloud.opacity_logits)
    out, rcache = render(posed_p, posed_cov, opacities, cloud.sh, camera,
                         background, active_sh_degree=active_sh_degree,
                         return_cache=True)
    fcache = {
        "cloud": cloud, "template": template, "nets": nets, "pose": pose,
        "local": local, "refine_cache": refine_cache, "jt": jt,
        "base_w": base_w, "w": w, "lbs_cache": lbs_cache, "G": G, "b": b,
        "cov3d": cov3d, "opacities": opacities, "rcache": rcache,
    }
    return out, fcache


def backward_frame(fcache: dict, d_color, d_alpha) -> FrameGrads:
    """Chains render gradients back to every trainable parameter."""
    cloud: GaussianCloud = fcache["cloud"]
    template: SkinnedTemplate = fcache["template"]
    nets: DeformNets = fcache["nets"]
    rg = render_backward(fcache["rcache"], d_color, d_alpha)

    op = fcache["opacities"]
    d_logits = rg.opacities * op * (1.0 - op)

    d_pos, d_cov3d, d_weights, d_G_joints, d_b_joints = lbs_backward(
        cloud.positions, fcache["cov3d"], fcache["w"], fcache["jt"],
        fcache["G"], fcache["b"], rg.positions, rg.covariances)
    d_raw_q, d_ls = build_covariance_backward(cloud.rotations,
                                              cloud.log_scales, d_cov3d)

    lbs_grads = None
    if nets.lbs_net is not None:
        lbs_grads, d_pos_extra = lbs_weight_field_backward(
            nets, fcache["base_w"], cloud.positions, fcache["lbs_cache"],
            d_weights)
        if d_pos_extra is not None:
            d_pos = d_pos + d_pos_extra

    pose_grads = None
    if nets.pose_net is not None:
        d_local, _ = forward_kinematics_backward(
            template, fcache["local"], fcache["jt"], d_G_joints, d_b_joints)
        pose_grads = refine_pose_matrices_backward(
            nets.pose_net, fcache["refine_cache"], d_local)

    grads = CloudGrads(positions=d_pos, rotations=d_raw_q, log_scales=d_ls,
                       opacity_logits=d_logits, sh=rg.sh)
    return FrameGrads(cloud=grads, pose_net=pose_grads, lbs_net=lbs_grads,
                      screen_grad_norm=rg.screen_grad_norm,
                      visible=rg.visible)


def frame_loss(cloud, template, nets, pose, camera, image, mask,
               weights: LossWeights, background, active_sh_degree=None):
    """(loss, FrameGrads, RenderOutput) for one frame. The acceptance
    finite-difference suite drives this directly."""
    out, fcache = forward_frame(cloud, template, nets, pose, camera,
                                background, active_sh_degree)
    loss, d_color, d_alpha = total_loss(out.color, out.alpha, image, mask,
                                        weights)
    grads = backward_frame(fcache, d_color, d_alpha)
    return loss, grads, out


# ---------------------------------------------------------------------------
# Training state (exact resume)

@dataclass
class TrainState:
    step: int
    cloud: GaussianCloud
    nets: DeformNets
    adam: dict
    warn_count: int = 0


_CLOUD_KEYS = ("positions", "rotations", "log_scales", "opacity_logits",
               "sh", "grad_accum", "grad_count", "grad_vec_accum")


def _cloud_adam_states(cloud: GaussianCloud) -> dict:
    return {name: AdamState.like(getattr(cloud, name))
            for name in ("positions", "rotations", "log_scales",
                         "opacity_logits", "sh")}


def _net_adam_states(net) -> list:
    return [AdamState.like(a) for a in net.weights + net.biases]


def save_train_state(path: str, state: TrainState) -> None:
    arrs = {f"cloud/{k}": getattr(state.cloud, k) for k in _CLOUD_KEYS}
    arrs["meta"] = np.array([state.step, state.warn_count], dtype=np.int64)
    for name, st in state.adam.items():
        if isinstance(st, list):
            for i, s in enumerate(st):
                arrs[f"adam/{name}/{i}/m"] = s.m
                arrs[f"adam/{name}/{i}/v"] = s.v
                arrs[f"adam/{name}/{i}/t"] = np.int64(s.t)
        else:
            arrs[f"adam/{name}/m"] = st.m
            arrs[f"adam/{name}/v"] = st.v
            arrs[f"adam/{name}/t"] = np.int64(st.t)
    nets = state.nets
    for tag, net in (("pose", nets.pose_net), ("lbs", nets.lbs_net)):
        if net is None:
            continue
        for i, w in enumerate(net.weights):
            arrs[f"nets/{tag}/w{i}"] = w
        for i, b in enumerate(net.biases):
            arrs[f"nets/{tag}/b{i}"] = b
    arrs["nets/config"] = np.array(
        [nets.n_freqs, int(nets.lbs_position_gradient)], dtype=np.int64)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **arrs)
    os.replace(tmp, path)


def _load_net(z, tag):
    ws, bs = [], []
    i = 0
    while f"nets/{tag}/w{i}" in z:
        ws.append(z[f"nets/{tag}/w{i}"])
        bs.append(z[f"nets/{tag}/b{i}"])
        i += 1
    if not ws:
        return None
    from .nets import MlpParams
    return MlpParams(ws, bs)


def load_train_state(path: str) -> TrainState:
    z = dict(np.load(path))
    cloud = GaussianCloud(*[z[f"cloud/{k}"] for k in _CLOUD_KEYS])
    meta = z["meta"]
    ncfg = z["nets/config"]
    nets = DeformNets(pose_net=_load_net(z, "pose"), lbs_net=_load_net(z, "lbs"),
                      n_freqs=int(ncfg[0]), lbs_position_gradient=bool(ncfg[1]))
    adam = {}
    names = sorted({k.split("/")[1] for k in z if k.startswith("adam/")})
    for name in names:
        if f"adam/{name}/m" in z:
            adam[name] = AdamState(z[f"adam/{name}/m"], z[f"adam/{name}/v"],
                                   int(z[f"adam/{name}/t"]))
        else:
            states = []
            i = 0
            while f"adam/{name}/{i}/m" in z:
                states.append(AdamState(z[f"adam/{name}/{i}/m"],
                                        z[f"adam/{name}/{i}/v"],
                                        int(z[f"adam/{name}/{i}/t"])))
                i += 1
            adam[name] = states
    return TrainState(step=int(meta[0]), cloud=cloud, nets=nets, adam=adam,
                      warn_count=int(meta[1]))


# ---------------------------------------------------------------------------
# The loop

def _finite(arrs) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrs)


def _apply_group(adam: dict, name: str, param, grad, lr: float):
    """Returns 1 if the group was skipped for non-finite gradients."""
    if lr == 0.0:
        return 0
    if not np.all(np.isfinite(grad)):
        return 1
    adam_update(adam[name], param, grad, lr)
    return 0


def _apply_net(adam_states: list, net, d_weights, d_biases, lr: float):
    if lr == 0.0:
        return 0
    grads = list(d_weights) + list(d_biases)
    if not _finite(grads):
        return 1
    params = net.weights + net.biases
    for st, p, g in zip(adam_states, params, grads):
        adam_update(st, p, g, lr)
    return 0


def scene_extent(template: SkinnedTemplate) -> float:
    span = template.vertices.max(axis=0) - template.vertices.min(axis=0)
    return float(np.linalg.norm(span))


def train(dataset, cfg: TrainConfig, out_dir=None, state: TrainState = None,
          stop_at_step: int = None, progress=None):
    """Runs the loop, returns (Checkpoint, TrainState, logs dict).

    Training frames come from split.json next to the dataset when
    present, otherwise every frame is used. Passing a TrainState resumes
    exactly where it left off; stop_at_step pauses early so a later call
    with the same config picks up bitwise identically.
    """
    template = dataset.template
    split_path = os.path.join(dataset.root, "split.json")
    if os.path.exists(split_path):
        train_ids, _ = sceneio.load_split(split_path)
    else:
        train_ids = list(range(dataset.n_frames))
    if not train_ids:
        raise ValueError("train: no training frames")

    extent = scene_extent(template)
    dcfg = cfg.densify_config(extent)
    background = np.asarray(cfg.background, dtype=np.float64)
    weights = cfg.loss_weights()

    if state is None:
        rng = np.random.default_rng((cfg.seed, 0))
        cloud = init_from_template(template, cfg.max_sh_degree,
                                   default_scale=0.05 * extent)
        nets = DeformNets(
            pose_net=(pose_refine_net(template.n_joints, rng)
                      if cfg.pose_refine else None),
            lbs_net=(lbs_offset_net(template.n_joints, rng, cfg.n_freqs)
                     if cfg.lbs_offsets else None),
            n_freqs=cfg.n_freqs)
        adam = _cloud_adam_states(cloud)
        if nets.pose_net is not None:
            adam["pose_net"] = _net_adam_states(nets.pose_net)
        if nets.lbs_net is not None:
            adam["lbs_net"] = _net_adam_states(nets.lbs_net)
        state = TrainState(step=0, cloud=cloud, nets=nets, adam=adam)
    cloud, nets, adam = state.cloud, state.nets, state.adam

    # preload frames; the training set is small by design
    images = {i: dataset.image(i) for i in train_ids}
    masks = {i: dataset.mask(i) for i in train_ids}

    train_rows = []
    densify_rows = []
    lr_decay = (cfg.lr_position_final / cfg.lr_position
                if cfg.lr_position > 0 else 1.0)
    denom = max(cfg.iterations - 1, 1)
    densify_stop = cfg.resolved_densify_stop()
    last = cfg.iterations if stop_at_step is None else min(stop_at_step,
                                                           cfg.iterations)

    for step in range(state.step, last):
        t0 = time.perf_counter()
        fid = train_ids[step % len(train_ids)]
        frame = dataset.frames[fid]
        active_sh = min(step // cfg.sh_promote_interval, cfg.max_sh_degree)

        out, fcache = forward_frame(cloud, template, nets, frame.pose,
                                    dataset.cameras[frame.camera_id],
                                    background, active_sh)
        loss, d_color, d_alpha = total_loss(out.color, out.alpha,
                                            images[fid], masks[fid], weights)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"train: non-finite loss {loss} at step {step} "
                f"(count {cloud.n}, frame {fid}); aborting")
        grads = backward_frame(fcache, d_color, d_alpha)
        cloud.accumulate_stats(grads.screen_grad_norm, grads.cloud.positions,
                               grads.visible)

        lr_pos = cfg.lr_position * lr_decay ** (step / denom)
        g = grads.cloud
        skipped = 0
        skipped += _apply_group(adam, "positions", cloud.positions,
                                g.positions, lr_pos)
        rot_skip = _apply_group(adam, "rotations", cloud.rotations,
                                g.rotations, cfg.lr_rotation)
        skipped += rot_skip
        if cfg.lr_rotation != 0.0 and rot_skip == 0:
            cloud.rotations = quat_normalize(cloud.rotations)
        skipped += _apply_group(adam, "log_scales", cloud.log_scales,
                                g.log_scales, cfg.lr_log_scale)
        skipped += _apply_group(adam, "opacity_logits", cloud.opacity_logits,
                                g.opacity_logits, cfg.lr_opacity)
        skipped += _apply_group(adam, "sh", cloud.sh, g.sh, cfg.lr_sh)
        if grads.pose_net is not None:
            skipped += _apply_net(adam["pose_net"], nets.pose_net,
                                  *grads.pose_net, cfg.lr_nets)
        if grads.lbs_net is not None:
            skipped += _apply_net(adam["lbs_net"], nets.lbs_net,
                                  *grads.lbs_net, cfg.lr_nets)
        state.warn_count += skipped

        s = step + 1
        if (dcfg.densify_start <= s <= densify_stop
                and s % dcfg.densify_interval == 0):
            cloud, events = densify_step(
                cloud, template, dcfg, s,
                np.random.default_rng((cfg.seed, 1, s)))
            densify_rows.append(events)
            for name, st in _cloud_adam_states(cloud).items():
                adam[name] = st
            state.cloud = cloud
        if (cfg.opacity_reset_interval > 0
                and s % cfg.opacity_reset_interval == 0):
            reset_opacity(cloud)
            adam["opacity_logits"] = AdamState.like(cloud.opacity_logits)

        ms = (time.perf_counter() - t0) * 1e3
        quality = float(psnr(np.clip(out.color, 0.0, 1.0), images[fid]))
        loss = float(loss)
        train_rows.append(f"{step},{loss!r},{quality!r},{cloud.n},{ms:.2f}")
        state.step = s
        if progress is not None:
            progress(step, loss, quality, cloud.n)

    final_sh = min(max(state.step - 1, 0) // cfg.sh_promote_interval,
                   cfg.max_sh_degree)
    # snap to storage precision first; cache artifacts must describe the
    # cloud that actually ships, and the round trip must render bitwise
    from .sh import num_sh_coeffs
    ckpt_cloud = sceneio.snap_cloud_to_storage(cloud)
    ckpt_cloud.sh = ckpt_cloud.sh[:, :num_sh_coeffs(final_sh)].copy()
    ckpt_nets = sceneio.snap_nets_to_storage(nets)
    cache = None
    if cfg.checkpoint_cache:
        unique_poses = []
        for fr in dataset.frames:
            if not any(np.array_equal(p.rotations, fr.pose.rotations)
                       and np.array_equal(p.translation, fr.pose.translation)
                       for p in unique_poses):
                unique_poses.append(fr.pose)
        cache_w, refined = cache_inference_artifacts(
            ckpt_cloud, template, ckpt_nets, unique_poses, template.root)
        cache = sceneio.InferenceCache(cache_w, refined,
                                       [p.copy() for p in unique_poses])

    has_nets = nets.pose_net is not None or nets.lbs_net is not None
    ckpt = sceneio.Checkpoint(
        ckpt_cloud, template, sh_degree=final_sh,
        nets=ckpt_nets if has_nets else None, cache=cache,
        meta={"iterations": cfg.iterations, "final_count": int(cloud.n),
              "warn_count": int(state.warn_count)})

    logs = {"train": train_rows, "densify": densify_rows}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        sceneio.save_checkpoint(out_dir, ckpt)
        # carry the camera table so `render --ckpt` is self-contained
        sceneio.save_cameras(os.path.join(out_dir, "cameras.json"),
                             dataset.cameras)
        save_train_state(os.path.join(out_dir, "train_state.npz"), state)
        with open(os.path.join(out_dir, "train_log.csv"), "w") as f:
            f.write(TRAIN_LOG_HEADER + "\n")
            f.write("".join(r + "\n" for r in train_rows))
        with open(os.path.join(out_dir, "densify_log.csv"), "w") as f:
            f.write(DensifyEvents.CSV_HEADER + "\n")
            f.write("".join(e.csv_row() + "\n" for e in densify_rows))
    return ckpt, state, logs


# ---------------------------------------------------------------------------
# Checkpoint-side rendering (shared by render/eval CLI and tests)

def render_from_checkpoint(ckpt: sceneio.Checkpoint, pose: Pose, camera,
                           background):
    """Renders a checkpoint for a given raw pose.

    When the pose matches one the cache was built from, the cached
    refined rotations stand in for it (this is how training-time pose
    corrections reach evaluation). Novel poses render as given. LBS
    weights always come from the cache when present; otherwise from the
    nearest template vertex.
    """
    template = ckpt.template
    cloud = ckpt.cloud
    used_pose = pose
    if ckpt.cache is not None:
        hit = ckpt.cache.find_pose(pose)
        if hit is not None:
            used_pose = Pose(ckpt.cache.refined_rotations[hit],
                             pose.translation)
        w = ckpt.cache.weights
    else:
        w, _ = nearest_vertex_weights(template, cloud.positions)
    jt = forward_kinematics_matrices(template, used_pose.local_matrices(),
                                     used_pose.translation)
    G, b = blend_transforms(w, jt)
    posed_p, posed_cov = lbs_transform_gaussian(
        cloud.positions, build_covariance(cloud.unit_rotations(),
                                          cloud.log_scales), G, b)
    return render(posed_p, posed_cov, sigmoid(cloud.opacity_logits),
                  cloud.sh, camera, np.asarray(background, dtype=np.float64),
                  active_sh_degree=ckpt.sh_degree)


def evaluate(ckpt: sceneio.Checkpoint, dataset, frame_ids, background=None):
    """PSNR/SSIM per frame; returns (rows, mean_psnr, mean_ssim)."""
    from .losses import ssim as ssim_fn
    if background is None:
        background = np.zeros(3)
    rows = []
    scores = []
    for fid in frame_ids:
        fr = dataset.frames[fid]
        out = render_from_checkpoint(ckpt, fr.pose,
                                     dataset.cameras[fr.camera_id],
                                     background)
        img = np.clip(out.color, 0.0, 1.0)
        target = dataset.image(fid)
        p = float(psnr(img, target))
        s = float(ssim_fn(img, target))
        rows.append(f"{fid},{p!r},{s!r}")
        scores.append((p, s))
    arr = np.asarray(scores)
    return rows, float(arr[:, 0].mean()), float(arr[:, 1].mean())
