"""Command-line entry point: ``handgs <command> ...``.

Exit codes: 0 ok, 2 config error, 3 dataset error, 4 numeric failure
(non-finite values, failed gradient check), 5 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import RunConfig, config_template, load_config
from .dataset import Dataset, frame_name
from .errors import ConfigError, DatasetError, HandGSError
from .images import read_mask, read_png, write_png
from .lighting import DualEnvironment
from .mesh import PoseFrame
from .render import Camera, RenderedImage, composite_overlay, look_at, psnr, rasterize, ssim

log = logging.getLogger("handgs")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.fit.seed = args.seed
    if args.threads is not None:
        cfg.fit.threads = args.threads
    if args.precision is not None:
        cfg.fit.precision = args.precision
    cfg.validate()
    return cfg


def _apply_threads(n: int) -> None:
    import numba

    n = max(1, int(n))
    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    return Path(args.out)


# ---------------------------------------------------------------- poses and cameras


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError("BAD_JSON", f"cannot read {path}: {e}") from e


def _shots(args, avatar):
    """(pose, refinement row or None, camera, view name, frame id) for each requested image."""
    if args.dataset:
        ds = Dataset.load(args.dataset, check_images=False)
        poses = ds.poses
        views = [(name, lambda t, i=i: ds.camera(i, t)) for i, name in enumerate(ds.view_names)]
    else:
        if not (args.poses and args.cameras):
            raise ConfigError("pass --dataset, or both --poses and --cameras")
        try:
            poses = [PoseFrame.from_json(p) for p in _load_json(args.poses)["poses"]]
            view_json = _load_json(args.cameras)["views"]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError("BAD_POSE", str(e)) from e
        views = [(v["name"], lambda t, c=Camera.from_json(v): c) for v in view_json]
    frames = range(len(poses)) if args.frames is None else [int(x) for x in args.frames.split(",")]
    refine = avatar.num_frames == len(poses) and not args.no_refine
    for t in frames:
        if not 0 <= t < len(poses):
            raise DatasetError("BAD_FRAME", f"frame {t} outside 0..{len(poses) - 1}")
        for name, cam_of in views:
            cam = cam_of(t)
            if args.scale != 1.0:
                cam = cam.scaled(args.scale)
            yield poses[t], (t if refine else None), cam, name, t


def _write_render(out: Path, name: str, t: int, img: RenderedImage, bits: int) -> None:
    # premultiplied: shaded colors may exceed 1, so dividing by alpha would clip
    write_png(out / name / frame_name(t), img.rgb, img.alpha, bits=bits)


# ---------------------------------------------------------------- commands


def cmd_config_init(args) -> int:
    text = config_template()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_make_synthetic(args) -> int:
    from .synthetic import make_synthetic

    out = _require_out(args)
    ds = make_synthetic(args.kind, out, seed=0 if args.seed is None else args.seed)
    print(f"wrote {args.kind} dataset to {out}: {ds.num_frames} poses, {ds.num_views} views, "
          f"{ds.mesh.num_faces} faces")
    return 0


def cmd_fit(args) -> int:
    from .diff import fit

    cfg = _run_config(args)
    if args.iterations is not None:
        cfg.optim.iterations = args.iterations
        cfg.validate()
    _apply_threads(cfg.fit.threads)
    out = _require_out(args)
    ds = Dataset.load(args.dataset, palm_axis=cfg.model.palm_axis)
    t0 = time.perf_counter()
    result = fit(ds, cfg, out_dir=out)
    last = result.history[-1]
    print(f"fit {cfg.optim.iterations} iterations in {time.perf_counter() - t0:.1f}s: loss {last['total']:.6g}, "
          f"{len(result.avatar.gaussians)} Gaussians -> {out / 'final.hgs'}")
    return 0


def cmd_render(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    _apply_threads(args.threads or ck.config.fit.threads)
    out = _require_out(args)
    settings = ck.config.render.settings()
    n = 0
    for pose, row, cam, name, t in _shots(args, ck.avatar):
        img = ck.avatar.render(pose, row, cam, settings, method=args.method)
        _write_render(out, name, t, img, args.bits)
        n += 1
    print(f"rendered {n} images to {out}")
    return 0


def cmd_relight(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    _apply_threads(args.threads or ck.config.fit.threads)
    out = _require_out(args)
    try:
        env = DualEnvironment.from_json(_load_json(args.sh_override))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError("BAD_SH", f"{args.sh_override}: {e}") from e
    if env.order != ck.avatar.lighting.order:
        raise DatasetError("BAD_SH", f"override has SH order {env.order}, checkpoint uses {ck.avatar.lighting.order}")
    settings = ck.config.render.settings()
    n = 0
    for pose, row, cam, name, t in _shots(args, ck.avatar):
        img = ck.avatar.render(pose, row, cam, settings, env_override=env.stacked(), method=args.method)
        _write_render(out, name, t, img, args.bits)
        if args.debug:
            dbg = out / "debug" / name
            dbg.mkdir(parents=True, exist_ok=True)
            np.save(dbg / f"{t:05d}_rgb.npy", img.rgb)
            np.save(dbg / f"{t:05d}_alpha.npy", img.alpha)
        n += 1
    print(f"relit {n} images to {out}")
    return 0


def _image_files(root: Path) -> list[Path]:
    return sorted(p.relative_to(root) for p in root.rglob("*.png"))


def cmd_composite(args) -> int:
    out = _require_out(args)
    rendered, background = Path(args.rendered), Path(args.background)
    files = _image_files(rendered)
    if not files:
        raise DatasetError("MISSING_FILE", f"no PNG renders under {rendered}")
    for rel in files:
        rgb, alpha = read_png(rendered / rel, with_alpha=True)
        if not (background / rel).exists():
            raise DatasetError("MISSING_FILE", f"no background {background / rel}")
        bg = read_png(background / rel)
        mask = np.zeros(alpha.shape, dtype=bool)
        if args.masks:
            mp = Path(args.masks) / f"{int(rel.stem):05d}_object.png"
            if mp.exists():
                mask = read_mask(mp)
        img = composite_overlay(RenderedImage(rgb, alpha), bg, mask)
        write_png(out / rel, img, bits=args.bits)
    print(f"composited {len(files)} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    rendered, target = Path(args.rendered), Path(args.target)
    files = _image_files(rendered)
    rows = []
    for rel in files:
        if not (target / rel).exists():
            raise DatasetError("MISSING_FILE", f"no target {target / rel}")
        # renders are premultiplied, so their rgb is already the image over black
        a, b = read_png(rendered / rel), read_png(target / rel)
        if a.shape != b.shape:
            raise DatasetError("IMAGE_DIMS", f"{rel}: render {a.shape} vs target {b.shape}")
        rows.append({"frame": str(rel), "psnr": psnr(a, b), "ssim": ssim(a, b)})
    if rows:
        rows.append({"frame": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])),
                     "ssim": float(np.mean([r["ssim"] for r in rows]))})
    out = Path(args.out) if args.out else None
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=["frame", "psnr", "ssim"])
        w.writeheader()
        for r in rows:
            w.writerow({"frame": r["frame"], "psnr": repr(r["psnr"]), "ssim": repr(r["ssim"])})
    finally:
        if out:
            fh.close()
    return 0


def cmd_gradcheck(args) -> int:
    from .diff import gradient_check, random_gradcheck_scene

    torch.set_num_threads(max(1, args.threads or 1))
    seed0 = 0 if args.seed is None else args.seed
    failures = 0
    for k in range(args.scenes):
        avatar, sample, cfg = random_gradcheck_scene(seed0 + k)
        entries = gradient_check(avatar, sample, cfg)
        bad = [e for e in entries if not e.ok]
        failures += len(bad)
        print(f"scene {seed0 + k}: {len(entries)} parameters, {len(bad)} mismatches")
        for e in bad[:10]:
            print(f"  {e.block}[{e.index}] analytic {e.analytic:.9g} numeric {e.numeric:.9g}")
    print("gradcheck " + ("FAILED" if failures else "passed"))
    return 4 if failures else 0


def _bench_camera(avatar, size: int) -> Camera:
    v = avatar.mesh.rest_vertices
    center = 0.5 * (v.min(0) + v.max(0))
    radius = float(np.linalg.norm(v - center, axis=1).max())
    f = 0.8 * size
    eye = center + np.array([0.0, -1.0, 0.4]) / np.linalg.norm([0.0, -1.0, 0.4]) * radius * 2.2
    return Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size, look_at(eye, center, (0.0, 0.0, 1.0)))


def cmd_bench(args) -> int:
    if args.icosphere is not None:
        from .synthetic import bench_avatar

        avatar, settings = bench_avatar(args.icosphere), RunConfig().render.settings()
    elif args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        avatar, settings = ck.avatar, ck.config.render.settings()
    else:
        raise ConfigError("bench needs a checkpoint or --icosphere LEVEL")
    _apply_threads(args.threads or 1)
    if args.cameras:
        cam = Camera.from_json(_load_json(args.cameras)["views"][args.view])
    else:
        cam = _bench_camera(avatar, args.size)
    pose = PoseFrame.rest(avatar.mesh.num_joints)
    report = {"frames": args.frames, "width": cam.width, "height": cam.height, "splats": len(avatar.gaussians),
              "threads": args.threads or 1}
    if args.frames > 0:
        splats = avatar.screen_splats(pose, None, cam, settings)
        rasterize(splats, cam, settings)  # compile and warm up
        t0 = time.perf_counter()
        for _ in range(args.frames):
            splats = avatar.screen_splats(pose, None, cam, settings)
            rasterize(splats, cam, settings)
        dt = time.perf_counter() - t0
        report.update(seconds=dt, fps=args.frames / dt, splats_per_sec=args.frames * len(avatar.gaussians) / dt)
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--precision", choices=["f32", "f64"], help="fitting precision")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="handgs", description="Mesh-anchored relightable Gaussian hand avatars.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="configuration utilities")
    csub = c.add_subparsers(dest="config_command", required=True)
    ci = csub.add_parser("init", parents=[common], help="emit the commented default configuration")
    ci.set_defaults(func=cmd_config_init)

    s = sub.add_parser("make-synthetic", parents=[common], help="write a ground-truth-known dataset")
    s.add_argument("kind", choices=["quad", "icosphere", "two-bone-cylinder"])
    s.set_defaults(func=cmd_make_synthetic)

    f = sub.add_parser("fit", parents=[common], help="fit an avatar to a dataset")
    f.add_argument("dataset")
    f.add_argument("--iterations", type=int, help="override optim.iterations")
    f.set_defaults(func=cmd_fit)

    def shot_args(q):
        q.add_argument("--dataset", help="take poses and cameras from this dataset")
        q.add_argument("--poses", help="poses.json")
        q.add_argument("--cameras", help="cameras.json")
        q.add_argument("--frames", help="comma-separated frame ids (default: all)")
        q.add_argument("--scale", type=float, default=1.0, help="resolution multiplier")
        q.add_argument("--no-refine", action="store_true", help="ignore fitted per-frame pose refinements")
        q.add_argument("--method", choices=["tiled", "reference", "dense"], default="tiled")
        q.add_argument("--bits", type=int, choices=[8, 16], default=16)

    r = sub.add_parser("render", parents=[common], help="render a checkpoint")
    r.add_argument("checkpoint")
    shot_args(r)
    r.set_defaults(func=cmd_render)

    rl = sub.add_parser("relight", parents=[common], help="render under replacement SH environments")
    rl.add_argument("checkpoint")
    rl.add_argument("sh_override", help="JSON with order, palm and back coefficient arrays")
    rl.add_argument("--debug", action="store_true", help="also dump unclamped linear rgb/alpha as .npy")
    shot_args(rl)
    rl.set_defaults(func=cmd_relight)

    cp = sub.add_parser("composite", parents=[common], help="paste renders over background frames")
    cp.add_argument("rendered")
    cp.add_argument("background")
    cp.add_argument("--masks", help="directory holding <t>_object.png masks")
    cp.add_argument("--bits", type=int, choices=[8, 16], default=16)
    cp.set_defaults(func=cmd_composite)

    e = sub.add_parser("eval", parents=[common], help="per-frame PSNR/SSIM as CSV")
    e.add_argument("rendered")
    e.add_argument("target")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every parameter block")
    g.add_argument("--scenes", type=int, default=10)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="rasterizer throughput")
    b.add_argument("checkpoint", nargs="?")
    b.add_argument("--icosphere", type=int, help="benchmark a generated icosphere of this subdivision level")
    b.add_argument("--cameras", help="cameras.json to take the view from")
    b.add_argument("--view", type=int, default=0)
    b.add_argument("--size", type=int, default=512, help="image size when no camera is given")
    b.add_argument("--frames", type=int, default=20)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except HandGSError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
