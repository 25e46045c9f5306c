"""End-to-end training and inference for the latent-volume pipeline.

Each optimizer step encodes the sampled phantom's input views, runs the
latent update stack, decodes Gaussian primitives, renders the input views plus
one randomly held-out view, voxelizes the coarse volume, refines it with the
residual U-Net, and minimizes the combined image/volume/refinement objective
with AdamW under a warmup-cosine schedule. Runs are deterministic for a fixed
seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import gsplat
from .config import geometry_from_config
from .ilvnet import IlvConfig, build_weights, ilv_forward
from .losses import LossWeights, total_loss
from .metrics import psnr_3d
from .refine import build_unet, unet3d_refine

__all__ = ["TrainError", "ModelBundle", "build_models", "train", "infer",
           "write_trace"]

TRACE_FIELDS = ["step", "lr", "L_img", "L_vol", "L_refined", "total",
                "val_psnr"]


class TrainError(RuntimeError):
    pass


@dataclass
class ModelBundle:
    """Every trainable component of the pipeline plus its flat parameter list."""

    ilv: object
    decoder: object
    unet: object

    def parameters(self):
        return (self.ilv.parameters() + self.decoder.parameters()
                + self.unet.parameters())


def build_models(cfg, rng=None):
    """Instantiate all network weights from a configuration dict."""
    if rng is None:
        rng = np.random.default_rng(int(cfg["train"]["seed"]))
    m = cfg["model"]
    ilv_cfg = IlvConfig(
        patch=int(m["patch"]), c_low=int(m["c_low"]), c_high=int(m["c_high"]),
        enc_layers=int(m["enc_layers"]), l_f=int(m["l_f"]), l_z=int(m["l_z"]),
        c_z=int(m["c_z"]), n_layers=int(m["n_layers"]),
        n_groups=int(m["n_groups"]), kv_reduce=int(m["kv_reduce"]))
    d = cfg["decoder"]
    decoder = gsplat.build_decoder(
        c_z=ilv_cfg.c_z, c_g=int(d["c_g"]), hidden=int(d["hidden"]),
        kernel=int(d["kernel"]), stride=int(d["stride"]), rng=rng)
    unet = build_unet(rng=rng)
    return ModelBundle(build_weights(ilv_cfg, rng), decoder, unet)


def loss_weights_from_config(cfg):
    lo = cfg["loss"]
    return LossWeights(
        l1=float(lo["l1"]), ssim=float(lo["ssim"]), vol=float(lo["vol"]),
        refined=float(lo["refined"]),
        refine_activation_step=int(lo["refine_activation_step"]))


def forward_pipeline(models, images, geom, input_views, render_views,
                     vol_dims, bbox_half):
    """Forward pass from input images to rendered views and volumes."""
    cfg = models.ilv.config
    v_z = ilv_forward(images, geom, input_views, models.ilv)
    feat = gsplat.upsample_latent(v_z, models.decoder, cfg.l_z)
    gtens = gsplat.decode_gaussians(feat, models.decoder, bbox_half)
    rendered = [gsplat.render_xray(gtens, geom, int(k)) for k in render_views]
    coarse = gsplat.voxelize(gtens, vol_dims, bbox_half)
    refined = unet3d_refine(coarse, models.unet)
    return rendered, coarse, refined, gtens


def train(dataset, cfg, models=None, callback=None):
    """Optimize the pipeline on a dataset of (Volume, ProjectionSet) samples.

    Each sample's projection set must cover all geometry views; the first
    ``input_views`` (by stored view index order) are the network inputs and
    the rest form the held-out rendering pool. Returns ``(models, trace)``
    where the trace is a list of per-step dicts (see ``TRACE_FIELDS``).
    """
    if not dataset:
        raise TrainError("dataset must hold at least 1 sample")
    tr = cfg["train"]
    seed = int(tr["seed"])
    steps = int(tr["steps"])
    warmup = int(tr["warmup"])
    base_lr = float(tr["base_lr"])
    weight_decay = float(tr["weight_decay"])
    val_every = int(tr["val_every"])
    n_input = int(tr["input_views"])
    vol_dims = (int(tr["vol_dims"]),) * 3
    geom = geometry_from_config(cfg)
    lw = loss_weights_from_config(cfg)

    for vol, proj in dataset:
        if proj.n_views <= n_input:
            raise TrainError(
                f"sample has {proj.n_views} views; need more than the "
                f"{n_input} input views to hold one out")

    if models is None:
        models = build_models(cfg, np.random.default_rng(seed))
    params = models.parameters()
    rng = np.random.default_rng(seed + 1)

    # fixed normalization so projections land in the SSIM data range [0, 1]
    img_scale = max(float(np.max(p.images)) for _, p in dataset)
    img_scale = max(img_scale, 1e-6)

    trace = []
    for step in range(1, steps + 1):
        idx = int(rng.integers(0, len(dataset)))
        vol, proj = dataset[idx]
        input_views = proj.view_indices[:n_input]
        held = int(rng.integers(n_input, proj.n_views))
        render_pos = list(range(n_input)) + [held]
        render_views = [int(proj.view_indices[i]) for i in render_pos]
        images_in = proj.images[:n_input] / img_scale
        images_gt = [proj.images[i] / img_scale for i in render_pos]

        rendered, coarse, refined, _ = forward_pipeline(
            models, images_in, geom, input_views, render_views, vol_dims,
            geom.bbox_half)
        rendered = [dc.mul(im, 1.0 / img_scale) for im in rendered]
        loss, bd = total_loss(rendered, images_gt, coarse, refined,
                              vol.data, lw, step)
        if not np.isfinite(bd["total"]):
            raise TrainError(f"non-finite loss at step {step}: {bd}")

        for p in params:
            p.zero_grad()
        loss.backward()
        lr = dc.cosine_warmup_lr(step, warmup=warmup, total=steps,
                                 base_lr=base_lr)
        dc.adamw_step(params, lr, weight_decay=weight_decay, t=step)

        row = {"step": step, "lr": lr, "L_img": bd["img"], "L_vol": bd["vol"],
               "L_refined": bd["refined"], "total": bd["total"],
               "val_psnr": ""}
        if val_every > 0 and step % val_every == 0:
            row["val_psnr"] = psnr_3d(coarse.values, vol.data)
        trace.append(row)
        if callback is not None:
            callback(step, row, models)
    return models, trace


def infer(proj, cfg, models, novel_view=None):
    """Reconstruct coarse and refined volumes from a projection set.

    Uses the first ``input_views`` views of ``proj`` as network inputs.
    Returns ``(coarse, refined, novel_image_or_None)`` as plain arrays.
    """
    tr = cfg["train"]
    n_input = min(int(tr["input_views"]), proj.n_views)
    vol_dims = (int(tr["vol_dims"]),) * 3
    geom = proj.geometry
    img_scale = max(float(np.max(proj.images[:n_input])), 1e-6)
    images_in = proj.images[:n_input] / img_scale
    render_views = [] if novel_view is None else [int(novel_view)]
    rendered, coarse, refined, _ = forward_pipeline(
        models, images_in, geom, proj.view_indices[:n_input], render_views,
        vol_dims, geom.bbox_half)
    novel = rendered[0].values if render_views else None
    return coarse.values, refined.values, novel


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        writer.writerows(trace)
