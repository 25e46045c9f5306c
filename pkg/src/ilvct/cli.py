"""Command-line interface: phantoms, projection, reconstruction, training.

Every subcommand reads and writes the package's binary formats (.ilv volumes
and projection sets, .ilvc checkpoints) plus CSV and PGM for reports. All
randomized commands take ``--seed`` and are bit-reproducible for a fixed
value. Failures print ``error: <Kind>: <message>`` on stderr and exit
nonzero, where ``<Kind>`` is the exception class name.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import diffcore as dc
from .classical import asd_pocs, fdk, sart
from .config import default_config, load_config, save_config, \
    geometry_from_config
from .geom import ConeBeamGeometry, equispaced_angles
from .metrics import psnr_3d, ssim_3slab
from .train import build_models, infer, train, write_trace
from .voldata import (ProjectionSet, Volume, export_slice_pgm, load_projections,
                      load_volume, make_phantom, save_projections, save_volume,
                      shepp_logan_spec)
from .xproj import forward_project

__all__ = ["main"]

# detector margin over the bounding box used by generated bench geometries
DET_MARGIN = 1.5 * 1.05


def bench_geometry(dims, bbox_half=16.0, n_views=8, dso=1000.0, dsd=1500.0):
    """A detector that covers the bounding box with margin at desk scale."""
    det = int(max(dims)) if np.iterable(dims) else int(dims)
    det_pixel = 2.0 * bbox_half * DET_MARGIN / det
    return ConeBeamGeometry(dso=dso, dsd=dsd, det_rows=det, det_cols=det,
                            det_pixel=det_pixel,
                            angles=equispaced_angles(n_views),
                            bbox_half=bbox_half)


def _cmd_phantom(args):
    dims = (args.dims,) * 3
    voxel = 2.0 * args.bbox_half / args.dims
    vol = make_phantom(shepp_logan_spec(), dims, voxel)
    save_volume(vol, args.out)
    print(f"wrote {args.out}: {dims} volume, voxel {voxel:.4g}")
    return 0


def _cmd_project(args):
    vol = load_volume(args.volume)
    geom = bench_geometry(max(vol.dims), bbox_half=vol.bbox_half,
                          n_views=args.views)
    rng = np.random.default_rng(args.seed)
    proj = forward_project(vol, geom, range(geom.n_views),
                           noise_sigma=args.noise_sigma, rng=rng)
    save_projections(proj, args.out)
    print(f"wrote {args.out}: {proj.n_views} views of "
          f"{geom.det_rows}x{geom.det_cols}")
    return 0


def _subset(proj, k):
    if k is None or k >= proj.n_views:
        return proj
    return ProjectionSet(proj.geometry, proj.images[:k],
                         proj.view_indices[:k])


def _cmd_recon(args):
    proj = _subset(load_projections(args.projections), args.views)
    geom = proj.geometry
    dims = (args.dims,) * 3
    if args.algo == "fdk":
        vol, _ = fdk(proj, geom, dims)
    elif args.algo == "sart":
        vol = sart(proj, geom, dims, iters=args.iters, relax=args.relax)
    else:
        vol = asd_pocs(proj, geom, dims, iters=args.iters, relax=args.relax,
                       tv_steps=args.tv_steps, tv_alpha_init=args.tv_alpha)
    save_volume(vol, args.out)
    print(f"wrote {args.out}: {args.algo} from {proj.n_views} views")
    return 0


def _train_sample(cfg):
    """Synthesize the single-sample dataset implied by a configuration."""
    geom = geometry_from_config(cfg)
    n = int(cfg["train"]["vol_dims"])
    voxel = 2.0 * geom.bbox_half / n
    vol = make_phantom(shepp_logan_spec(), (n, n, n), voxel)
    proj = forward_project(vol, geom, range(geom.n_views))
    return vol, proj


def _cmd_train_ilv(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.volume and args.projections:
        vol = load_volume(args.volume)
        proj = load_projections(args.projections)
        want = geometry_from_config(cfg)
        have = proj.geometry
        same = (have.det_rows == want.det_rows
                and have.det_cols == want.det_cols
                and have.n_views == want.n_views
                and abs(have.det_pixel - want.det_pixel) < 1e-9
                and abs(have.dso - want.dso) < 1e-9
                and abs(have.dsd - want.dsd) < 1e-9)
        if not same:
            raise ValueError(
                "projection geometry does not match the [geometry] config "
                "section; training uses the config geometry")
        dataset = [(vol, proj)]
    else:
        dataset = [_train_sample(cfg)]
    os.makedirs(args.out_dir, exist_ok=True)
    save_config(cfg, os.path.join(args.out_dir, "config.ini"))
    models, trace = train(dataset, cfg)
    dc.save_checkpoint(models.parameters(),
                       os.path.join(args.out_dir, "checkpoint.ilvc"))
    write_trace(trace, os.path.join(args.out_dir, "trace.csv"))
    print(f"wrote {args.out_dir}: checkpoint.ilvc, trace.csv, config.ini "
          f"(final loss {trace[-1]['total']:.4g})")
    return 0


def _write_image_pgm(image, path):
    """Write a 2D image as PGM, normalized to its own maximum."""
    peak = max(float(np.max(image)), 1e-12)
    vol = Volume(image[None, :, :] / peak, 1.0)
    export_slice_pgm(vol, 0, 0, path)


def _cmd_infer_ilv(args):
    cfg = load_config(args.config)
    proj = load_projections(args.projections)
    models = build_models(cfg)
    dc.load_checkpoint(models.parameters(), args.checkpoint)
    coarse, refined, novel = infer(proj, cfg, models,
                                   novel_view=args.novel_view)
    voxel = 2.0 * proj.geometry.bbox_half / coarse.shape[0]
    save_volume(Volume(np.clip(coarse, 0.0, None), voxel), args.out_coarse)
    save_volume(Volume(np.clip(refined, 0.0, None), voxel), args.out_refined)
    wrote = [args.out_coarse, args.out_refined]
    if novel is not None and args.out_novel:
        _write_image_pgm(novel, args.out_novel)
        wrote.append(args.out_novel)
    print("wrote " + ", ".join(wrote))
    return 0


def _cmd_eval(args):
    a = load_volume(args.volume_a)
    b = load_volume(args.volume_b)
    row = {"psnr_db": f"{psnr_3d(a.data, b.data):.4f}",
           "ssim": f"{ssim_3slab(a.data, b.data):.6f}"}
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=["psnr_db", "ssim"])
        writer.writeheader()
        writer.writerow(row)
    finally:
        if args.out:
            out.close()
    return 0


def _cmd_export_slice(args):
    vol = load_volume(args.volume)
    export_slice_pgm(vol, args.axis, args.index, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_bench(args):
    dims = (args.dims,) * 3
    voxel = 2.0 * args.bbox_half / args.dims
    vol = make_phantom(shepp_logan_spec(), dims, voxel)
    view_counts = [int(v) for v in args.views.split(",")]
    rows = []
    for n_views in view_counts:
        geom = bench_geometry(args.dims, bbox_half=args.bbox_half,
                              n_views=n_views)
        proj = forward_project(vol, geom, range(n_views))
        methods = {
            "fdk": lambda: fdk(proj, geom, dims)[0],
            "sart": lambda: sart(proj, geom, dims, iters=args.iters),
            "asdpocs": lambda: asd_pocs(proj, geom, dims, iters=args.iters),
        }
        for name, run in methods.items():
            t0 = time.perf_counter()
            recon = run()
            wall = time.perf_counter() - t0
            rows.append({
                "method": name, "n_views": n_views,
                "psnr_db": f"{psnr_3d(recon.data, vol.data):.4f}",
                "ssim": f"{ssim_3slab(recon.data, vol.data):.6f}",
                "wall_seconds": f"{wall:.3f}"})
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "n_views",
                                                "psnr_db", "ssim",
                                                "wall_seconds"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}: {len(rows)} rows")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ilvct",
        description="Sparse-view cone-beam CT: classical and latent-volume "
                    "reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="rasterize the synthetic head phantom")
    p.add_argument("--dims", type=int, default=64)
    p.add_argument("--bbox-half", type=float, default=16.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("project", help="forward-project a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("recon", help="classical reconstruction")
    p.add_argument("--projections", required=True)
    p.add_argument("--algo", choices=["fdk", "sart", "asdpocs"],
                   required=True)
    p.add_argument("--views", type=int, default=None,
                   help="use only the first K views")
    p.add_argument("--dims", type=int, default=64)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--relax", type=float, default=0.3)
    p.add_argument("--tv-steps", type=int, default=10)
    p.add_argument("--tv-alpha", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_recon)

    p = sub.add_parser("train-ilv", help="train the latent-volume pipeline")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--volume", default=None)
    p.add_argument("--projections", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_train_ilv)

    p = sub.add_parser("infer-ilv", help="reconstruct with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--projections", required=True)
    p.add_argument("--novel-view", type=int, default=None)
    p.add_argument("--out-coarse", required=True)
    p.add_argument("--out-refined", required=True)
    p.add_argument("--out-novel", default=None)
    p.set_defaults(func=_cmd_infer_ilv)

    p = sub.add_parser("eval", help="PSNR/SSIM between two volumes")
    p.add_argument("volume_a")
    p.add_argument("volume_b")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-slice", help="write one slice as PGM")
    p.add_argument("--volume", required=True)
    p.add_argument("--axis", type=int, default=2)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_slice)

    p = sub.add_parser("bench", help="compare algorithms over view counts")
    p.add_argument("--dims", type=int, default=64)
    p.add_argument("--bbox-half", type=float, default=16.0)
    p.add_argument("--views", default="6,8,10",
                   help="comma-separated view counts")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - single reporting point
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
