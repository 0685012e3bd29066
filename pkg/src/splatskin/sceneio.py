"""File formats: images, templates, poses, datasets, checkpoints, configs.

Everything here is dependency-free and byte-auditable: PPM/PGM for
images, JSON for structured metadata, binary little-endian PLY for the
Gaussian cloud, and flat float arrays with JSON shape manifests for
network weights and the inference cache. Parse errors name the file and
the byte offset where parsing stopped.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianCloud
from .kinematics import Pose, SkinnedTemplate
from .nets import DeformNets, MlpParams
from .rasterizer import Camera


class FormatError(ValueError):
    """Malformed file; message carries path and byte offset."""


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _atomic_write_text(path: str, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# PPM (P6) images and PGM (P5) masks

def _parse_pnm(data: bytes, path: str, magic: bytes):
    """Header scan; returns (width, height, maxval, pixel offset)."""
    def fail(msg, at):
        raise FormatError(f"{path}: {msg} at byte {at}")
    if data[:2] != magic:
        fail(f"expected {magic.decode()} magic", 0)
    pos = 2
    vals = []
    while len(vals) < 3:
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":
                nl = data.find(b"\n", pos)
                if nl < 0:
                    fail("unterminated comment", pos)
                pos = nl + 1
            elif c.isspace():
                pos += 1
            else:
                break
        if pos >= len(data):
            fail("truncated header", pos)
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tok = data[start:pos]
        if not tok.isdigit():
            fail(f"expected integer, found {tok[:12]!r}", start)
        vals.append(int(tok))
    if pos >= len(data):
        fail("missing whitespace after maxval", pos)
    pos += 1  # single whitespace byte separates header from pixels
    w, h, maxval = vals
    if w <= 0 or h <= 0:
        fail(f"bad dimensions {w}x{h}", 2)
    if maxval != 255:
        fail(f"unsupported maxval {maxval} (only 255)", 2)
    return w, h, maxval, pos


def write_ppm(path: str, image: np.ndarray) -> None:
    """P6, maxval 255. Input floats clamp to [0, 1] here, at the write."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"write_ppm wants HxWx3, got {image.shape}")
    h, w = image.shape[:2]
    u8 = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + u8.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    w, h, _, pos = _parse_pnm(data, path, b"P6")
    need = w * h * 3
    if len(data) - pos < need:
        raise FormatError(
            f"{path}: pixel data truncated ({len(data) - pos} of {need} "
            f"bytes) at byte {pos}")
    px = np.frombuffer(data, np.uint8, count=need, offset=pos)
    return px.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path: str, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"write_pgm wants HxW, got {image.shape}")
    h, w = image.shape
    u8 = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + u8.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    w, h, _, pos = _parse_pnm(data, path, b"P5")
    need = w * h
    if len(data) - pos < need:
        raise FormatError(
            f"{path}: pixel data truncated ({len(data) - pos} of {need} "
            f"bytes) at byte {pos}")
    px = np.frombuffer(data, np.uint8, count=need, offset=pos)
    return px.reshape(h, w).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# Template JSON

def save_template(path: str, template: SkinnedTemplate) -> None:
    """Weights go out sparse, (index, value) pairs, at most 4 per vertex."""
    rows = []
    for r in template.weights:
        nz = np.flatnonzero(r)
        if len(nz) > 4:
            raise ValueError(
                f"template weights have {len(nz)} nonzeros in a row; "
                "the sparse format holds at most 4")
        rows.append([[int(k), float(r[k])] for k in nz])
    doc = {
        "joint_count": int(template.n_joints),
        "parents": [int(p) for p in template.parents],
        "rest_joints": template.rest_joints.tolist(),
        "vertices": template.vertices.tolist(),
        "weights": rows,
    }
    _atomic_write_text(path, json.dumps(doc))


def load_template(path: str) -> SkinnedTemplate:
    try:
        with open(path, "rb") as f:
            raw = f.read()
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at byte {e.pos}") from e
    try:
        k = int(doc["joint_count"])
        parents = np.asarray(doc["parents"], dtype=np.int64)
        rest = np.asarray(doc["rest_joints"], dtype=np.float64)
        verts = np.asarray(doc["vertices"], dtype=np.float64)
        sparse = doc["weights"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: missing or malformed key {e} at byte 0") from e
    if parents.shape != (k,) or rest.shape != (k, 3):
        raise FormatError(
            f"{path}: joint_count {k} inconsistent with parents/rest_joints "
            "at byte 0")
    weights = np.zeros((len(sparse), k), dtype=np.float64)
    for v, pairs in enumerate(sparse):
        for idx, val in pairs:
            weights[v, int(idx)] = float(val)
    return SkinnedTemplate(parents, rest, verts, weights)


# ---------------------------------------------------------------------------
# Pose JSON

def save_pose(path: str, pose: Pose) -> None:
    doc = {"rotations": pose.rotations.tolist(),
           "translation": pose.translation.tolist()}
    _atomic_write_text(path, json.dumps(doc))


def load_pose(path: str) -> Pose:
    try:
        with open(path, "rb") as f:
            doc = json.loads(f.read())
        return Pose(np.asarray(doc["rotations"], dtype=np.float64),
                    np.asarray(doc["translation"], dtype=np.float64))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at byte {e.pos}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad pose file ({e})") from e


# ---------------------------------------------------------------------------
# Camera table JSON

def save_cameras(path: str, cameras: dict) -> None:
    doc = {}
    for cam_id, c in cameras.items():
        doc[cam_id] = {
            "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height,
            "rotation": c.rotation.tolist(),
            "translation": c.translation.tolist(),
            "near_clip": c.near_clip,
        }
    _atomic_write_text(path, json.dumps(doc))


def load_cameras(path: str) -> dict:
    try:
        with open(path, "rb") as f:
            doc = json.loads(f.read())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at byte {e.pos}") from e
    cams = {}
    for cam_id, d in doc.items():
        try:
            cams[cam_id] = Camera(
                fx=float(d["fx"]), fy=float(d["fy"]),
                cx=float(d["cx"]), cy=float(d["cy"]),
                width=int(d["width"]), height=int(d["height"]),
                rotation=np.asarray(d["rotation"], dtype=np.float64),
                translation=np.asarray(d["translation"], dtype=np.float64),
                near_clip=float(d.get("near_clip", 0.05)))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: bad camera '{cam_id}' ({e})") from e
    return cams


# ---------------------------------------------------------------------------
# Dataset directory

@dataclass
class FrameRecord:
    frame_id: int
    image_path: str
    mask_path: str
    camera_id: str
    pose: Pose


@dataclass
class Dataset:
    root: str
    template: SkinnedTemplate
    cameras: dict
    frames: list

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def image(self, frame_id: int) -> np.ndarray:
        return read_ppm(self.frames[frame_id].image_path)

    def mask(self, frame_id: int) -> np.ndarray:
        return read_pgm(self.frames[frame_id].mask_path)

    def camera(self, frame_id: int) -> Camera:
        return self.cameras[self.frames[frame_id].camera_id]


def save_frame_index(path: str, records: list) -> None:
    """records: list of dicts with relative image/mask/pose paths + camera."""
    _atomic_write_text(path, json.dumps(records))


def load_dataset(root: str, check_images: bool = True) -> Dataset:
    """Loads the directory written by the synthetic generator.

    Layout: template.json, cameras.json, frames.json, and the images/,
    masks/, poses/ trees that frames.json points into. Dimension checks
    compare each image and mask against its camera's resolution.
    """
    template = load_template(os.path.join(root, "template.json"))
    cameras = load_cameras(os.path.join(root, "cameras.json"))
    index_path = os.path.join(root, "frames.json")
    try:
        with open(index_path, "rb") as f:
            index = json.loads(f.read())
    except json.JSONDecodeError as e:
        raise FormatError(f"{index_path}: invalid JSON at byte {e.pos}") from e
    frames = []
    for i, rec in enumerate(index):
        try:
            cam_id = rec["camera"]
            img = os.path.join(root, rec["image"])
            msk = os.path.join(root, rec["mask"])
            pose = load_pose(os.path.join(root, rec["pose"]))
        except (KeyError, TypeError) as e:
            raise FormatError(f"{index_path}: frame {i} malformed ({e})") from e
        if cam_id not in cameras:
            raise FormatError(f"{index_path}: frame {i} references unknown "
                              f"camera '{cam_id}'")
        if pose.rotations.shape[0] != template.n_joints:
            raise FormatError(
                f"{index_path}: frame {i} pose has {pose.rotations.shape[0]} "
                f"joints, template has {template.n_joints}")
        if check_images:
            cam = cameras[cam_id]
            ih, iw = read_ppm(img).shape[:2]
            mh, mw = read_pgm(msk).shape
            if (iw, ih) != (cam.width, cam.height) or (mw, mh) != (cam.width, cam.height):
                raise FormatError(
                    f"{index_path}: frame {i} is {iw}x{ih}/{mw}x{mh} but "
                    f"camera '{cam_id}' is {cam.width}x{cam.height}")
        frames.append(FrameRecord(i, img, msk, cam_id, pose))
    return Dataset(root, template, cameras, frames)


def save_split(path: str, train_ids, eval_ids) -> None:
    _atomic_write_text(path, json.dumps(
        {"train": [int(i) for i in train_ids],
         "eval": [int(i) for i in eval_ids]}))


def load_split(path: str):
    try:
        with open(path, "rb") as f:
            doc = json.loads(f.read())
        return list(doc["train"]), list(doc["eval"])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at byte {e.pos}") from e
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: split file needs train/eval lists ({e})") from e


# ---------------------------------------------------------------------------
# Flat key=value config text

def parse_config_text(text: str, path: str = "<config>") -> dict:
    """key=value per line; '#' starts a comment; blank lines skipped."""
    out = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            if "=" not in stripped:
                raise FormatError(
                    f"{path}: expected key=value at byte {offset}, got "
                    f"{stripped[:30]!r}")
            key, val = stripped.split("=", 1)
            out[key.strip()] = val.strip()
        offset += len(line)
    return out


def format_config_text(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def load_config_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), path)


# ---------------------------------------------------------------------------
# PLY cloud

_PLY_BASE_PROPS = ("x", "y", "z",
                   "rot_0", "rot_1", "rot_2", "rot_3",
                   "scale_0", "scale_1", "scale_2",
                   "opacity",
                   "f_dc_0", "f_dc_1", "f_dc_2")


def ply_property_names(n_coeffs: int):
    names = list(_PLY_BASE_PROPS)
    names += [f"f_rest_{i}" for i in range(3 * (n_coeffs - 1))]
    return names


def _f32_round_trip(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def snap_cloud_to_storage(cloud: GaussianCloud) -> GaussianCloud:
    """Rounds parameters through the PLY's float32 so renders of an
    in-memory checkpoint match its reloaded self bitwise."""
    return GaussianCloud(
        _f32_round_trip(cloud.positions), _f32_round_trip(cloud.rotations),
        _f32_round_trip(cloud.log_scales),
        _f32_round_trip(cloud.opacity_logits), _f32_round_trip(cloud.sh))


def snap_nets_to_storage(nets: DeformNets) -> DeformNets:
    def snap(net):
        if net is None:
            return None
        return MlpParams([_f32_round_trip(w) for w in net.weights],
                         [_f32_round_trip(b) for b in net.biases])
    return DeformNets(snap(nets.pose_net), snap(nets.lbs_net),
                      nets.n_freqs, nets.lbs_position_gradient)


def save_ply(path: str, cloud: GaussianCloud) -> None:
    """Binary little-endian PLY, one float32 vertex per Gaussian.

    f_rest is channel-major: index c*(B-1) + (k-1) holds coefficient k of
    channel c, matching the base method's exporter layout.
    """
    n, b = cloud.n, cloud.sh.shape[1]
    names = ply_property_names(b)
    cols = np.empty((n, len(names)), dtype="<f4")
    cols[:, 0:3] = cloud.positions
    cols[:, 3:7] = cloud.rotations
    cols[:, 7:10] = cloud.log_scales
    cols[:, 10] = cloud.opacity_logits
    cols[:, 11:14] = cloud.sh[:, 0, :]
    if b > 1:
        cols[:, 14:] = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in names]
    header.append("end_header")
    _atomic_write(path, ("\n".join(header) + "\n").encode("ascii")
                  + cols.tobytes())


def load_ply(path: str) -> GaussianCloud:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise FormatError(f"{path}: no end_header at byte 0")
    body_at = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}: expected 'ply' magic at byte 0")
    if len(lines) < 2 or lines[1] != "format binary_little_endian 1.0":
        raise FormatError(f"{path}: unsupported format at byte 4")
    n = None
    props = []
    offset = len("ply\n") + len(lines[1]) + 1
    for line in lines[2:]:
        if line.startswith("element vertex "):
            n = int(line.split()[-1])
        elif line.startswith("element "):
            raise FormatError(f"{path}: unsupported element at byte {offset}")
        elif line.startswith("property float "):
            props.append(line.split()[-1])
        elif line.startswith("property "):
            raise FormatError(f"{path}: non-float property at byte {offset}")
        offset += len(line) + 1
    if n is None:
        raise FormatError(f"{path}: missing element vertex at byte 0")
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    if n_rest % 3 != 0:
        raise FormatError(f"{path}: f_rest count {n_rest} not divisible by 3")
    b = n_rest // 3 + 1
    if props != ply_property_names(b):
        raise FormatError(f"{path}: unexpected property order at byte 0")
    need = n * len(props) * 4
    if len(data) - body_at < need:
        raise FormatError(
            f"{path}: vertex data truncated ({len(data) - body_at} of "
            f"{need} bytes) at byte {body_at}")
    cols = np.frombuffer(data, "<f4", count=n * len(props),
                         offset=body_at).reshape(n, len(props))
    cols = cols.astype(np.float64)
    sh = np.zeros((n, b, 3))
    sh[:, 0, :] = cols[:, 11:14]
    if b > 1:
        sh[:, 1:, :] = cols[:, 14:].reshape(n, 3, b - 1).transpose(0, 2, 1)
    return GaussianCloud(cols[:, 0:3], cols[:, 3:7], cols[:, 7:10],
                         cols[:, 10], sh)


# ---------------------------------------------------------------------------
# Network weights: flat float32 + JSON shape manifest

def save_nets(dir_path: str, nets: DeformNets) -> None:
    def shapes(net):
        return {"widths": [int(w) for w in net.widths]}
    manifest = {
        "n_freqs": nets.n_freqs,
        "lbs_position_gradient": nets.lbs_position_gradient,
        "pose_net": shapes(nets.pose_net) if nets.pose_net else None,
        "lbs_net": shapes(nets.lbs_net) if nets.lbs_net else None,
    }
    chunks = []
    for net in (nets.pose_net, nets.lbs_net):
        if net is None:
            continue
        for w, b in zip(net.weights, net.biases):
            chunks.append(w.astype("<f4").tobytes())
            chunks.append(b.astype("<f4").tobytes())
    _atomic_write_text(os.path.join(dir_path, "nets.json"),
                       json.dumps(manifest))
    _atomic_write(os.path.join(dir_path, "nets.bin"), b"".join(chunks))


def _mlp_from_flat(widths, flat, pos):
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos:pos + fan_out]
        pos += fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpParams(weights, biases), pos


def load_nets(dir_path: str) -> DeformNets:
    manifest_path = os.path.join(dir_path, "nets.json")
    bin_path = os.path.join(dir_path, "nets.bin")
    try:
        with open(manifest_path, "rb") as f:
            manifest = json.loads(f.read())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON at byte {e.pos}") from e
    flat = np.fromfile(bin_path, dtype="<f4")
    pos = 0
    pose_net = lbs_net = None
    if manifest.get("pose_net"):
        pose_net, pos = _mlp_from_flat(manifest["pose_net"]["widths"], flat, pos)
    if manifest.get("lbs_net"):
        lbs_net, pos = _mlp_from_flat(manifest["lbs_net"]["widths"], flat, pos)
    if pos != len(flat):
        raise FormatError(
            f"{bin_path}: manifest expects {pos} floats, file has "
            f"{len(flat)} at byte {pos * 4}")
    return DeformNets(pose_net=pose_net, lbs_net=lbs_net,
                      n_freqs=int(manifest.get("n_freqs", 10)),
                      lbs_position_gradient=bool(
                          manifest.get("lbs_position_gradient", False)))


# ---------------------------------------------------------------------------
# Inference cache: final LBS weights + per-frame refined poses

@dataclass
class InferenceCache:
    weights: np.ndarray          # (U, K) final skinning weights
    refined_rotations: np.ndarray  # (F, K, 3) axis-angle after refinement
    raw_poses: list              # F raw Pose objects, for content lookup

    def find_pose(self, pose: Pose):
        """Frame index whose raw pose matches bitwise, else None."""
        for i, p in enumerate(self.raw_poses):
            if (np.array_equal(p.rotations, pose.rotations)
                    and np.array_equal(p.translation, pose.translation)):
                return i
        return None


def save_cache(dir_path: str, cache: InferenceCache) -> None:
    """float64 on disk so cached renders replay the live path bitwise."""
    u, k = cache.weights.shape
    f = cache.refined_rotations.shape[0]
    manifest = {
        "n_gaussians": u, "n_joints": k, "n_frames": f,
        "raw_rotations": [p.rotations.tolist() for p in cache.raw_poses],
        "raw_translations": [p.translation.tolist() for p in cache.raw_poses],
    }
    flat = np.concatenate([cache.weights.ravel(),
                           cache.refined_rotations.ravel()])
    _atomic_write_text(os.path.join(dir_path, "cache.json"),
                       json.dumps(manifest))
    _atomic_write(os.path.join(dir_path, "cache.bin"),
                  flat.astype("<f8").tobytes())


def load_cache(dir_path: str) -> InferenceCache:
    manifest_path = os.path.join(dir_path, "cache.json")
    try:
        with open(manifest_path, "rb") as f:
            m = json.loads(f.read())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON at byte {e.pos}") from e
    u, k, nf = int(m["n_gaussians"]), int(m["n_joints"]), int(m["n_frames"])
    bin_path = os.path.join(dir_path, "cache.bin")
    flat = np.fromfile(bin_path, dtype="<f8")
    need = u * k + nf * k * 3
    if len(flat) != need:
        raise FormatError(
            f"{bin_path}: expected {need} floats, found {len(flat)} at "
            f"byte {min(len(flat), need) * 8}")
    weights = flat[:u * k].reshape(u, k)
    refined = flat[u * k:].reshape(nf, k, 3)
    poses = [Pose(np.asarray(r, dtype=np.float64),
                  np.asarray(t, dtype=np.float64))
             for r, t in zip(m["raw_rotations"], m["raw_translations"])]
    return InferenceCache(weights, refined, poses)


# ---------------------------------------------------------------------------
# Checkpoint directory

@dataclass
class Checkpoint:
    cloud: GaussianCloud
    template: SkinnedTemplate
    sh_degree: int
    nets: DeformNets = None
    cache: InferenceCache = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(dir_path: str, ckpt: Checkpoint) -> None:
    os.makedirs(dir_path, exist_ok=True)
    save_ply(os.path.join(dir_path, "cloud.ply"), ckpt.cloud)
    save_template(os.path.join(dir_path, "template.json"), ckpt.template)
    meta = dict(ckpt.meta)
    meta.update({"format_version": 1,
                 "sh_degree": int(ckpt.sh_degree),
                 "n_gaussians": int(ckpt.cloud.n)})
    _atomic_write_text(os.path.join(dir_path, "checkpoint.json"),
                       json.dumps(meta))
    if ckpt.nets is not None:
        save_nets(dir_path, ckpt.nets)
    if ckpt.cache is not None:
        save_cache(dir_path, ckpt.cache)


def load_checkpoint(dir_path: str) -> Checkpoint:
    meta_path = os.path.join(dir_path, "checkpoint.json")
    try:
        with open(meta_path, "rb") as f:
            meta = json.loads(f.read())
    except FileNotFoundError:
        raise FormatError(f"{meta_path}: not a checkpoint (missing file)")
    except json.JSONDecodeError as e:
        raise FormatError(f"{meta_path}: invalid JSON at byte {e.pos}") from e
    cloud = load_ply(os.path.join(dir_path, "cloud.ply"))
    template = load_template(os.path.join(dir_path, "template.json"))
    nets = cache = None
    if os.path.exists(os.path.join(dir_path, "nets.json")):
        nets = load_nets(dir_path)
    if os.path.exists(os.path.join(dir_path, "cache.json")):
        cache = load_cache(dir_path)
    return Checkpoint(cloud, template, int(meta["sh_degree"]),
                      nets=nets, cache=cache, meta=meta)
