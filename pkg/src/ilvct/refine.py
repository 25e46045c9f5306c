"""Residual 3D U-Net that refines coarse voxelized reconstructions.

Two strided-convolution downsampling stages (factors 4 and 2), a bottleneck,
and a symmetric transposed-convolution decoder with skip concatenation. The
final convolution is zero-initialized, so refinement is the identity map at
initialization: the network output is added to its input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DTensor, Param, uniform_init, zeros_init

__all__ = ["UNetWeights", "build_unet", "unet3d_refine", "RefineError"]


class RefineError(ValueError):
    pass


@dataclass
class UNetWeights:
    """All U-Net parameters; ``final_w``/``final_b`` start at zero."""

    down_a_w: Param
    down_a_b: Param
    down_b_w: Param
    down_b_b: Param
    mid1_w: Param
    mid1_b: Param
    mid2_w: Param
    mid2_b: Param
    up_b_w: Param
    up_b_b: Param
    dec_b_w: Param
    dec_b_b: Param
    up_a_w: Param
    up_a_b: Param
    final_w: Param
    final_b: Param

    def parameters(self):
        return [self.down_a_w, self.down_a_b, self.down_b_w, self.down_b_b,
                self.mid1_w, self.mid1_b, self.mid2_w, self.mid2_b,
                self.up_b_w, self.up_b_b, self.dec_b_w, self.dec_b_b,
                self.up_a_w, self.up_a_b, self.final_w, self.final_b]


def build_unet(c1=16, c2=32, cb=64, rng=None):
    """Construct U-Net parameters with the 16/32/64 desk-scale channel plan."""
    if rng is None:
        rng = np.random.default_rng(0)

    def u(name, shape, fan_in):
        return uniform_init(rng, name, shape, fan_in)

    return UNetWeights(
        down_a_w=u("unet.down_a_w", (c1, 1, 4, 4, 4), 64),
        down_a_b=zeros_init("unet.down_a_b", (c1,)),
        down_b_w=u("unet.down_b_w", (c2, c1, 2, 2, 2), c1 * 8),
        down_b_b=zeros_init("unet.down_b_b", (c2,)),
        mid1_w=u("unet.mid1_w", (cb, c2, 3, 3, 3), c2 * 27),
        mid1_b=zeros_init("unet.mid1_b", (cb,)),
        mid2_w=u("unet.mid2_w", (c2, cb, 3, 3, 3), cb * 27),
        mid2_b=zeros_init("unet.mid2_b", (c2,)),
        up_b_w=u("unet.up_b_w", (c2, c1, 2, 2, 2), c2 * 8),
        up_b_b=zeros_init("unet.up_b_b", (c1,)),
        dec_b_w=u("unet.dec_b_w", (c1, 2 * c1, 3, 3, 3), 2 * c1 * 27),
        dec_b_b=zeros_init("unet.dec_b_b", (c1,)),
        up_a_w=u("unet.up_a_w", (c1, c1 // 2, 4, 4, 4), c1 * 64),
        up_a_b=zeros_init("unet.up_a_b", (c1 // 2,)),
        final_w=zeros_init("unet.final_w", (1, c1 // 2 + 1, 3, 3, 3)),
        final_b=zeros_init("unet.final_b", (1,)),
    )


def unet3d_refine(v_coarse, weights):
    """Refine a voxel field: output = input + UNet(input).

    ``v_coarse`` is a (D, H, W) array or DTensor with every dim divisible by 8.
    """
    x = v_coarse if isinstance(v_coarse, DTensor) else dc.constant(
        np.asarray(v_coarse, dtype=np.float64))
    dims = x.shape
    if len(dims) != 3 or any(d % 8 for d in dims):
        raise RefineError(f"dims must be 3D and divisible by 8, got {dims}")
    w = weights
    x0 = dc.reshape(x, (1,) + tuple(dims))

    a = dc.gelu(dc.conv3d(x0, w.down_a_w.tensor, w.down_a_b.tensor, stride=4))
    b = dc.gelu(dc.conv3d(a, w.down_b_w.tensor, w.down_b_b.tensor, stride=2))
    m = dc.gelu(dc.conv3d(b, w.mid1_w.tensor, w.mid1_b.tensor, padding=1))
    m = dc.gelu(dc.conv3d(m, w.mid2_w.tensor, w.mid2_b.tensor, padding=1))
    ub = dc.gelu(dc.conv_transpose3d(m, w.up_b_w.tensor, w.up_b_b.tensor,
                                     stride=2))
    cat_b = dc.concat([ub, a], axis=0)
    db = dc.gelu(dc.conv3d(cat_b, w.dec_b_w.tensor, w.dec_b_b.tensor,
                           padding=1))
    ua = dc.gelu(dc.conv_transpose3d(db, w.up_a_w.tensor, w.up_a_b.tensor,
                                     stride=4))
    cat_a = dc.concat([ua, x0], axis=0)
    res = dc.conv3d(cat_a, w.final_w.tensor, w.final_b.tensor, padding=1)
    return dc.add(x, dc.reshape(res, tuple(dims)))
