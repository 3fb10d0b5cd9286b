"""One binary, six subcommands: gen, train, render, eval, pack, serve.

Every subcommand is deterministic given its config and seed.  Exit codes:
0 success, 1 validation error (bad arguments, config keys, inputs),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import scenes, stream_io, train as train_mod
from .render import (
    Camera,
    RenderConfig,
    camera_from_lookat,
    render_decomposition_map,
    render_image,
    write_png,
    write_raw,
)
from .scenes import (
    CATEGORY_DEFORM,
    CATEGORY_NEW,
    CATEGORY_STATIC,
    psnr,
    region_ssim,
    ssim,
)
from .server import RENDER_FOV_DEG, run_server

__all__ = ["run", "main"]

ABLATIONS = ("none", "no-deform", "no-new", "no-static")
REGION_NAMES = {"static": CATEGORY_STATIC, "deforming": CATEGORY_DEFORM,
                "new": CATEGORY_NEW}


class CliError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _build_parser():
    p = _Parser(prog="streamfields",
                description="fit, render, pack and stream decomposed "
                            "dynamic scene fields")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("kind", choices=["toy2d", "scene3d"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=0,
                   help="image side (default 96 toy, 64 scene3d)")
    g.add_argument("--frames", type=int, default=30)

    t = sub.add_parser("train", help="fit models to a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--ablate", choices=ABLATIONS, default=None)
    t.add_argument("--log-every", type=int, default=50)

    r = sub.add_parser("render", help="render images from a model")
    r.add_argument("--model", required=True,
                   help=".nfps stream, .ckpt file or fit directory")
    r.add_argument("--out", required=True)
    r.add_argument("--times", required=True,
                   help="comma-separated times, e.g. 0,2.5,7")
    r.add_argument("--pose", default=None,
                   help="px,py,pz,lx,ly,lz,ux,uy,uz (volumetric only)")
    r.add_argument("--width", type=int, default=0)
    r.add_argument("--height", type=int, default=0)
    r.add_argument("--samples", type=int, default=32)
    r.add_argument("--overlay", action="store_true",
                   help="blend the decomposition map over the render")

    e = sub.add_parser("eval", help="PSNR/SSIM table over holdout data")
    e.add_argument("--data", required=True)
    e.add_argument("--model", default=None,
                   help="fit directory or checkpoint; omit for the "
                        "ground-truth self check")
    e.add_argument("--out", required=True, help="output CSV path")
    e.add_argument("--ablate", choices=ABLATIONS, action="append",
                   default=None, help="extra eval-time variants")
    e.add_argument("--samples", type=int, default=32)

    k = sub.add_parser("pack", help="pack checkpoints into .nfps streams")
    k.add_argument("--checkpoint", required=True,
                   help=".ckpt file or fit directory")
    k.add_argument("--out", required=True,
                   help="output .nfps path (clip index appended for "
                        "multi-clip fits)")

    s = sub.add_parser("serve", help="serve a packed stream over HTTP")
    s.add_argument("--stream", required=True)
    s.add_argument("--bind", default="127.0.0.1:8799")
    s.add_argument("--cache-size", type=int, default=64)
    s.add_argument("--samples", type=int, default=32)
    return p


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args):
    if args.kind == "toy2d":
        size = args.size or 96
        spec = scenes.default_toy_spec(width=size, height=size,
                                       T=args.frames, seed=args.seed)
        ds = scenes.gen_toy2d(spec)
        scenes.save_toy_dataset(ds, args.out)
    else:
        size = args.size or 64
        spec = scenes.default_scene3d_spec(T=args.frames, size=size,
                                           seed=args.seed)
        ds = scenes.gen_scene3d(spec)
        scenes.save_scene3d_dataset(ds, args.out)
    print(f"wrote {args.kind} dataset to {args.out}")
    return 0


def _load_dataset(path):
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise CliError(f"no dataset manifest at {manifest}")
    with open(manifest) as fh:
        head = fh.read()
    if "toy2d" in head.splitlines()[0]:
        return scenes.load_toy_dataset(path)
    return scenes.load_scene3d_dataset(path)


def _cmd_train(args):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set needs KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.config:
        config = train_mod.load_config(args.config, overrides)
    elif overrides:
        import tempfile
        with tempfile.NamedTemporaryFile("w", suffix=".cfg",
                                         delete=False) as fh:
            train_mod.save_config(fh.name, train_mod.TrainConfig())
            name = fh.name
        config = train_mod.load_config(name, overrides)
        os.unlink(name)
    else:
        config = train_mod.TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.ablate is not None:
        config.ablate = args.ablate
    ds = _load_dataset(args.data)
    try:
        result = train_mod.fit(ds, config, log_every=args.log_every)
    except train_mod.TrainingDiverged as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None and partial.models:
            train_mod.save_fit(args.out, partial, config)
            print(f"saved {len(partial.models)} completed clip(s) before "
                  f"the abort -> {args.out}", file=sys.stderr)
        raise
    train_mod.save_fit(args.out, result, config)
    final = result.curves[-1][-1]
    print(f"fit {len(result.models)} clip(s); final loss {final.total:.5f} "
          f"-> {args.out}")
    return 0


def _load_models(path):
    """(FitResult-like, is_stream) from a stream, checkpoint or fit dir."""
    if os.path.isdir(path):
        return train_mod.load_fit(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == stream_io.MAGIC:
        model, _ = stream_io.unpack(path)
        return train_mod.FitResult(models=[model],
                                   clip_ranges=[(0, model.config.T)],
                                   curves=[])
    model = train_mod.load_checkpoint(path)
    return train_mod.FitResult(models=[model],
                               clip_ranges=[(0, model.config.T)], curves=[])


def _render_cfg(model, samples):
    c = model.config
    return RenderConfig(n_samples=samples, near=c.near, far=c.far,
                        stratified=False, background=(c.background,) * 3,
                        tau=c.tau)


def _camera_for(model, width, height, pose):
    if model.config.mode == "direct-2d":
        ident = np.column_stack([np.eye(3), np.zeros(3)])
        return Camera(pose=ident, fx=1.0, fy=1.0, cx=width / 2.0,
                      cy=height / 2.0, width=width, height=height)
    if pose is None:
        pose = [0.5, 1.1, 2.4, 0.5, 0.5, 0.5, 0.0, 1.0, 0.0]
    return camera_from_lookat(pose[0:3], pose[3:6], pose[6:9],
                              RENDER_FOV_DEG, width, height)


def _cmd_render(args):
    fitres = _load_models(args.model)
    mode = fitres.models[0].config.mode
    pose = None
    if args.pose:
        vals = [float(v) for v in args.pose.split(",")]
        if len(vals) != 9:
            raise CliError(f"--pose needs 9 numbers, got {len(vals)}")
        pose = vals
    width = args.width or 128
    height = args.height or 128
    os.makedirs(args.out, exist_ok=True)
    try:
        times = [float(v) for v in args.times.split(",") if v != ""]
    except ValueError as exc:
        raise CliError(f"bad --times: {exc}")
    for t in times:
        # fractional times interpolate inside one clip; clip models are
        # independent, so times straddling a clip boundary are rejected
        base = int(np.floor(t))
        model, local_base = fitres.model_for_frame(base)
        local = local_base + (t - base)
        cam = _camera_for(model, width, height, pose)
        cfg = _render_cfg(model, args.samples)
        img = render_image(model, cam, local, cfg)
        if args.overlay:
            cmap = render_decomposition_map(model, cam, local, cfg)
            img = 0.5 * img + 0.5 * cmap[..., ::-1]
        stem = os.path.join(args.out, f"render_t{t:08.3f}")
        write_png(stem + ".png", img)
        write_raw(stem + ".npy", img)
    print(f"rendered {len(times)} image(s) ({mode}) -> {args.out}")
    return 0


def _toy_region_rows(ds, variant, renders):
    """Aggregate per-region metrics over the holdout frames."""
    rows = []
    names = ["all", "static", "deforming", "new"]
    for region in names:
        psnrs, ssims = [], []
        for t, img in renders:
            gt = ds.frames[t]
            if region == "all":
                psnrs.append(psnr(img, gt))
                ssims.append(ssim(img, gt))
                continue
            mask = ds.masks[t] == REGION_NAMES[region]
            if not mask.any():
                continue
            psnrs.append(psnr(img, gt, mask=mask))
            try:
                ssims.append(region_ssim(img, gt, mask))
            except ValueError:
                pass
        if psnrs:
            rows.append((variant, region, float(np.mean(psnrs)),
                         float(np.mean(ssims)) if ssims else float("nan")))
    return rows


def _eval_toy(ds, fitres, variants, samples):
    rows = []
    for variant in variants:
        renders = []
        for t in ds.holdout_frames:
            model, local_t = fitres.model_for_frame(t)
            old = model.ablate
            model.ablate = variant if variant != "none" else old
            cam = _camera_for(model, ds.size[0], ds.size[1], None)
            img = render_image(model, cam, float(local_t),
                               _render_cfg(model, samples))
            model.ablate = old
            renders.append((t, img))
        rows.extend(_toy_region_rows(ds, variant, renders))
    return rows


def _eval_scene3d(ds, fitres, variants, samples):
    rows = []
    h, w = ds.images.shape[2:4]
    for variant in variants:
        psnrs, ssims = [], []
        for ci in ds.holdout_cameras:
            cam = ds.cameras[ci]
            for t in range(ds.T):
                model, local_t = fitres.model_for_frame(t)
                old = model.ablate
                model.ablate = variant if variant != "none" else old
                img = render_image(model, cam, float(local_t),
                                   _render_cfg(model, samples))
                model.ablate = old
                psnrs.append(psnr(img, ds.images[ci, t]))
                ssims.append(ssim(img, ds.images[ci, t]))
        rows.append((variant, "all", float(np.mean(psnrs)),
                     float(np.mean(ssims))))
    return rows


def _cmd_eval(args):
    ds = _load_dataset(args.data)
    scene = os.path.basename(os.path.normpath(args.data))
    if args.model is None:
        # ground truth against itself: oracle sanity check
        rows = [("identity", "all", 99.0, 1.0)]
    else:
        fitres = _load_models(args.model)
        variants = ["none"] + [v for v in (args.ablate or []) if v != "none"]
        if isinstance(ds, scenes.ToyDataset):
            rows = _eval_toy(ds, fitres, variants, args.samples)
        else:
            rows = _eval_scene3d(ds, fitres, variants, args.samples)
    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write("scene,variant,region,psnr,ssim\n")
        for variant, region, p, s in rows:
            fh.write(f"{scene},{variant},{region},{p:.4f},{s:.6f}\n")
    for variant, region, p, s in rows:
        print(f"{scene:12s} {variant:10s} {region:10s} "
              f"PSNR {p:7.3f}  SSIM {s:.4f}")
    return 0


def _cmd_pack(args):
    if os.path.isdir(args.checkpoint):
        fitres = train_mod.load_fit(args.checkpoint)
        if len(fitres.models) == 1:
            targets = [(fitres.models[0], args.out)]
        else:
            base, ext = os.path.splitext(args.out)
            targets = [(m, f"{base}.clip{ci:02d}{ext}")
                       for ci, m in enumerate(fitres.models)]
    else:
        targets = [(train_mod.load_checkpoint(args.checkpoint), args.out)]
    for model, path in targets:
        manifest = stream_io.pack(model, path)
        print(f"packed {path}: {manifest.total_bytes} bytes, "
              f"{stream_io.mean_bitrate(manifest):.1f} bytes/frame")
    return 0


def _cmd_serve(args):
    return run_server(args.stream, args.bind, cache_size=args.cache_size,
                      n_samples=args.samples)


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "pack": _cmd_pack,
    "serve": _cmd_serve,
}


def run(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (CliError, ValueError, FileNotFoundError,
            stream_io.StreamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (train_mod.TrainingDiverged, FloatingPointError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io failure: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
