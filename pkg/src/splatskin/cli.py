"""Command-line front end: synth | train | render | eval | inspect.

Exit codes: 0 success, 1 usage, 2 bad input data, 3 numeric failure.
Errors print a single diagnostic line to stderr; malformed files name
the offending path and, where known, the byte offset.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import sceneio, synthetic, trainer
from .sceneio import FormatError
from .sh import num_sh_coeffs

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatskin",
                description="articulated Gaussian splatting toolkit")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--spec", required=True, metavar="FILE",
                    help="scene spec, flat key=value text")
    sp.add_argument("--out", required=True, metavar="DIR")

    tp = sub.add_parser("train", help="optimize a model on a dataset")
    tp.add_argument("--data", required=True, metavar="DIR")
    tp.add_argument("--config", metavar="FILE",
                    help="training config, flat key=value text")
    tp.add_argument("--out", required=True, metavar="CKPT",
                    help="checkpoint directory to write")
    tp.add_argument("--quiet", action="store_true")

    rp = sub.add_parser("render", help="render one pose from a checkpoint")
    rp.add_argument("--ckpt", required=True, metavar="CKPT")
    rp.add_argument("--camera", required=True, metavar="ID")
    rp.add_argument("--pose", required=True, metavar="FILE")
    rp.add_argument("--out", required=True, metavar="IMG",
                    help="output image (PPM)")
    rp.add_argument("--cameras", metavar="FILE",
                    help="camera table; defaults to CKPT/cameras.json")

    ep = sub.add_parser("eval", help="PSNR/SSIM over a dataset split")
    ep.add_argument("--ckpt", required=True, metavar="CKPT")
    ep.add_argument("--data", required=True, metavar="DIR")
    ep.add_argument("--split", metavar="FILE",
                    help="split file; its eval list is scored "
                         "(default: every frame)")
    ep.add_argument("--out", metavar="CSV",
                    help="write the table here instead of stdout")

    ip = sub.add_parser("inspect", help="summarize a checkpoint")
    ip.add_argument("--ckpt", required=True, metavar="CKPT")
    return p


def cmd_synth(args) -> int:
    spec = synthetic.SyntheticSceneSpec.from_dict(
        sceneio.load_config_file(args.spec))
    dataset, gt_cloud, _ = synthetic.generate_synthetic(spec, args.out)
    print(f"wrote {dataset.n_frames} frames "
          f"({len(dataset.cameras)} cameras) to {args.out}; "
          f"ground truth: {gt_cloud.n} gaussians")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = sceneio.load_dataset(args.data)
    cfg = (trainer.TrainConfig.from_file(args.config) if args.config
           else trainer.TrainConfig())

    def progress(step, loss, quality, count):
        if not args.quiet and (step + 1) % 100 == 0:
            print(f"iter {step + 1:5d}  loss {loss:.5f}  "
                  f"psnr {quality:6.2f}  count {count}", flush=True)

    t0 = time.perf_counter()
    ckpt, state, logs = trainer.train(dataset, cfg, out_dir=args.out,
                                      progress=progress)
    dt = time.perf_counter() - t0
    last = logs["train"][-1].split(",")
    print(f"done: {cfg.iterations} iters in {dt:.1f}s, "
          f"final loss {float(last[1]):.5f}, psnr {float(last[2]):.2f} dB, "
          f"count {ckpt.cloud.n} -> {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    ckpt = sceneio.load_checkpoint(args.ckpt)
    cam_path = args.cameras or os.path.join(args.ckpt, "cameras.json")
    cameras = sceneio.load_cameras(cam_path)
    if args.camera not in cameras:
        raise FormatError(f"{cam_path}: no camera '{args.camera}' "
                          f"(have: {', '.join(sorted(cameras))})")
    pose = sceneio.load_pose(args.pose)
    if pose.rotations.shape[0] != ckpt.template.n_joints:
        raise FormatError(
            f"{args.pose}: pose has {pose.rotations.shape[0]} joints, "
            f"checkpoint template has {ckpt.template.n_joints}")
    t0 = time.perf_counter()
    out = trainer.render_from_checkpoint(ckpt, pose, cameras[args.camera],
                                         np.zeros(3))
    dt = time.perf_counter() - t0
    sceneio.write_ppm(args.out, np.clip(out.color, 0.0, 1.0))
    print(f"{args.out}: {dt * 1e3:.1f} ms/frame ({1.0 / dt:.1f} FPS), "
          f"{ckpt.cloud.n} gaussians")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = sceneio.load_checkpoint(args.ckpt)
    dataset = sceneio.load_dataset(args.data)
    if args.split:
        _, frame_ids = sceneio.load_split(args.split)
    else:
        frame_ids = list(range(dataset.n_frames))
    if not frame_ids:
        raise FormatError(f"{args.split}: eval split is empty")
    rows, mean_psnr, mean_ssim = trainer.evaluate(ckpt, dataset, frame_ids)
    table = trainer.EVAL_LOG_HEADER + "\n" + "".join(r + "\n" for r in rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(table)
        print(f"{len(frame_ids)} frames: mean psnr {mean_psnr:.2f} dB, "
              f"mean ssim {mean_ssim:.4f} -> {args.out}")
    else:
        sys.stdout.write(table)
        print(f"# mean psnr {mean_psnr:.2f} dB, mean ssim {mean_ssim:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = sceneio.load_checkpoint(args.ckpt)
    cloud = ckpt.cloud
    n = cloud.n
    ply_bytes = n * len(sceneio.ply_property_names(cloud.sh.shape[1])) * 4
    net_bytes = 0
    if ckpt.nets is not None:
        for net in (ckpt.nets.pose_net, ckpt.nets.lbs_net):
            if net is not None:
                net_bytes += 4 * sum(a.size for a in net.weights + net.biases)
    scales = cloud.scales()
    op = 1.0 / (1.0 + np.exp(-cloud.opacity_logits))
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    print(f"gaussians: {n}")
    print(f"sh degree: {ckpt.sh_degree} "
          f"({num_sh_coeffs(ckpt.sh_degree)} coeffs/channel)")
    print(f"position bounds: [{lo[0]:.3f}, {lo[1]:.3f}, {lo[2]:.3f}] .. "
          f"[{hi[0]:.3f}, {hi[1]:.3f}, {hi[2]:.3f}]")
    print(f"scale: min {scales.min():.4g}, median "
          f"{np.median(scales):.4g}, max {scales.max():.4g}")
    print(f"opacity: min {op.min():.3f}, median {np.median(op):.3f}, "
          f"max {op.max():.3f}")
    print(f"joints: {ckpt.template.n_joints}, "
          f"template vertices: {ckpt.template.vertices.shape[0]}")
    nets_desc = []
    if ckpt.nets is not None and ckpt.nets.pose_net is not None:
        nets_desc.append("pose")
    if ckpt.nets is not None and ckpt.nets.lbs_net is not None:
        nets_desc.append("lbs")
    print(f"nets: {'+'.join(nets_desc) if nets_desc else 'none'}")
    if ckpt.cache is not None:
        print(f"cache: {ckpt.cache.weights.shape[0]} weight rows, "
              f"{len(ckpt.cache.raw_poses)} poses")
    total = ply_bytes + net_bytes
    print(f"memory: {total / 1e6:.2f} MB "
          f"(splats {ply_bytes / 1e6:.2f} MB, nets {net_bytes / 1e6:.2f} MB)")
    return EXIT_OK


_DISPATCH = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render,
             "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _DISPATCH[args.command](args)
    except RuntimeError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
