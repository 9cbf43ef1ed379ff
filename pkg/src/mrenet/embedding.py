"""Attentional multi-scale per-voxel embedding.

Pipeline: concatenate the backbone's right-side feature maps (bottleneck,
first decoder block, final map) upsampled to patch size, append Cartesian
coordinate channels expressed in the whole-volume frame, recalibrate
channels with a squeeze-and-excitation gate, expand receptive fields with
an atrous spatial pyramid (rates 6/12/18 plus a 1x1x1 and an image-level
branch), and fuse with a linear 1x1x1 convolution to ``n_embed`` channels.

Each stage can be toggled off for ablations; the fusion convolution always
runs so the embedding width is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mrenet import tensor as T
from mrenet.layers import Conv3d, ConvBlock, Linear
from mrenet.params import ParamStore
from mrenet.tensor import ConfigError, Tensor

ASPP_RATES = (6, 12, 18)
SE_REDUCTION = 4


@dataclass(frozen=True)
class CoordinateFrame:
    """Placement of a patch inside its source volume (extents in D,H,W).

    ``mirror_w`` marks a patch whose content was laterally mirrored after
    extraction; the coordinate channels then report each voxel's source
    position so position/content pairs stay consistent under augmentation.
    """

    volume_extents: tuple[int, int, int]
    offset: tuple[int, int, int] = (0, 0, 0)
    mirror_w: bool = False

    def __post_init__(self):
        for o, n in zip(self.offset, self.volume_extents):
            if o < 0 or n < 1:
                raise ConfigError(
                    f"invalid frame: offset {self.offset} in extents "
                    f"{self.volume_extents}")


def coordinate_map(frame: CoordinateFrame, patch_extents, dtype=np.float64):
    """Location channels: axis a at patch voxel v holds
    2*(offset_a + v)/(volume_extent_a - 1) - 1; a degenerate axis maps to 0.
    A mirrored frame reverses the W channel so it tracks source positions."""
    patch_extents = tuple(patch_extents)
    axes = []
    for a, (n_vol, off, n_patch) in enumerate(
            zip(frame.volume_extents, frame.offset, patch_extents)):
        if off + n_patch > n_vol:
            raise ConfigError(
                f"patch (offset {off}, extent {n_patch}) exceeds volume extent "
                f"{n_vol} on axis {a}")
        pos = off + np.arange(n_patch, dtype=np.float64)
        axes.append(2.0 * pos / (n_vol - 1) - 1.0 if n_vol > 1
                    else np.zeros(n_patch))
    if frame.mirror_w:
        axes[2] = axes[2][::-1]
    grid = np.zeros((3,) + patch_extents, dtype=dtype)
    grid[0] = axes[0][:, None, None]
    grid[1] = axes[1][None, :, None]
    grid[2] = axes[2][None, None, :]
    return grid


class SEBlock:
    """Channel gating: GAP -> fc(C -> C//r) -> ReLU -> fc(-> C) -> sigmoid."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 rng: np.random.Generator, dtype=np.float64):
        reduced = max(1, channels // SE_REDUCTION)
        self.fc1 = Linear(store, name + ".fc1", channels, reduced, rng, dtype)
        self.fc2 = Linear(store, name + ".fc2", reduced, channels, rng, dtype)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        pooled = T.global_avg_pool(x)                      # [B,C,1,1,1]
        b = pooled.data.shape[0]
        vec = T.reshape(pooled, (b, self.channels))
        gates = T.sigmoid(self.fc2(T.relu(self.fc1(vec))))
        return T.mul(x, T.reshape(gates, (b, self.channels, 1, 1, 1)))


class ASPP:
    """Five parallel branches concatenated: 1x1x1, three dilated 3x3x3,
    and image-level pooling, each ``branch_channels`` wide."""

    def __init__(self, store: ParamStore, name: str, c_in: int,
                 branch_channels: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.point = ConvBlock(store, name + ".point", c_in, branch_channels,
                               1, rng, dtype)
        self.dilated = [
            ConvBlock(store, f"{name}.rate{r}", c_in, branch_channels, 3, rng,
                      dtype, padding=r, dilation=r)
            for r in ASPP_RATES
        ]
        self.image = ConvBlock(store, name + ".image", c_in, branch_channels,
                               1, rng, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        extents = x.data.shape[-3:]
        branches = [self.point(x, training)]
        branches += [b(x, training) for b in self.dilated]
        pooled = self.image(T.global_avg_pool(x), training)
        branches.append(T.upsample_nearest(pooled, extents))
        return T.concat(branches, axis=-4)


class EmbeddingNet:
    """Maps backbone outputs (+ coordinates) to an n_embed-channel field."""

    def __init__(self, store: ParamStore, tap_channels, final_channels: int,
                 n_embed: int, rng: np.random.Generator, dtype=np.float64,
                 coords_on: bool = True, se_on: bool = True,
                 aspp_on: bool = True, prefix: str = "embed"):
        self.n_embed = n_embed
        self.coords_on = coords_on
        self.dtype = dtype
        cat = int(sum(tap_channels)) + final_channels + (3 if coords_on else 0)
        self.se = SEBlock(store, f"{prefix}.se", cat, rng, dtype) if se_on \
            else None
        if aspp_on:
            if n_embed % 4 != 0:
                raise ConfigError(
                    f"n_embed must be divisible by 4 when the pyramid stage is "
                    f"enabled, got {n_embed}")
            self.aspp = ASPP(store, f"{prefix}.aspp", cat, n_embed // 4, rng,
                             dtype)
            fuse_in = 5 * (n_embed // 4)
        else:
            self.aspp = None
            fuse_in = cat
        self.fuse = Conv3d(store, f"{prefix}.fuse", fuse_in, n_embed, 1, rng,
                           dtype)

    def __call__(self, final: Tensor, taps, frames, training: bool) -> Tensor:
        """``final``/``taps`` from the backbone (batched [B,C,D,H,W]);
        ``frames`` is one CoordinateFrame per batch element."""
        extents = final.data.shape[-3:]
        feats = [T.upsample_nearest(t, extents) for t in taps] + [final]
        x = T.concat(feats, axis=-4)
        if self.coords_on:
            coords = np.stack([
                coordinate_map(f, extents, dtype=self.dtype) for f in frames])
            x = T.concat([x, Tensor(coords)], axis=-4)
        if self.se is not None:
            x = self.se(x)
        if self.aspp is not None:
            x = self.aspp(x, training)
        return self.fuse(x)
