"""Full segmentation network: backbone -> embedding -> classifier head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mrenet.backbone import Backbone, BackboneConfig
from mrenet.embedding import CoordinateFrame, EmbeddingNet
from mrenet.head import FcnHead, MreHead
from mrenet.params import ParamStore
from mrenet.tensor import ConfigError, Tensor, no_grad


@dataclass(frozen=True)
class ModelConfig:
    k: int
    m: int = 3
    n_embed: int = 256
    channel_scale: float = 0.25
    in_channels: int = 1
    head: str = "mre"                 # mre | fcn
    distance: str = "cosine"          # cosine | euclidean
    mixing: str = "adaptive"          # adaptive | onehot | average
    coords_on: bool = True
    se_on: bool = True
    aspp_on: bool = True
    dtype: str = "float64"            # float64 | float32

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"need at least 2 categories, got k={self.k}")
        if self.head not in ("mre", "fcn"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.head == "fcn" and (self.distance != "cosine"
                                   or self.mixing != "adaptive"):
            raise ConfigError(
                "the plain convolutional head has no distance/mixing knobs")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


class SegmentationModel:
    """Owns the parameter store and wires the three stages together."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
        dtype = cfg.np_dtype
        self.backbone = Backbone(
            self.store,
            BackboneConfig(in_channels=cfg.in_channels,
                           channel_scale=cfg.channel_scale),
            rng, dtype=dtype)
        self.embedding = EmbeddingNet(
            self.store, self.backbone.tap_channels, self.backbone.out_channels,
            cfg.n_embed, rng, dtype=dtype, coords_on=cfg.coords_on,
            se_on=cfg.se_on, aspp_on=cfg.aspp_on)
        if cfg.head == "mre":
            self.head = MreHead(self.store, cfg.n_embed, cfg.k, cfg.m, rng,
                                dtype=dtype, distance=cfg.distance,
                                mixing=cfg.mixing)
        else:
            self.head = FcnHead(self.store, cfg.n_embed, cfg.k, rng,
                                dtype=dtype)

    def forward(self, images: Tensor, frames, training: bool) -> Tensor:
        """images [B,C,D,H,W] with one CoordinateFrame per element ->
        posterior [B,K,D,H,W]."""
        if images.data.ndim != 5:
            raise ConfigError(
                f"expected batched [B,C,D,H,W] input, got {images.data.shape}")
        if len(frames) != images.data.shape[0]:
            raise ConfigError(
                f"{images.data.shape[0]} patches but {len(frames)} frames")
        final, taps = self.backbone(images, training)
        emb = self.embedding(final, taps, frames, training)
        return self.head(emb, training)

    def posterior(self, patch: np.ndarray, frame: CoordinateFrame) -> np.ndarray:
        """Eval-mode posterior for one unbatched [C,D,H,W] patch."""
        x = Tensor(np.asarray(patch, dtype=self.cfg.np_dtype)[None])
        with no_grad():
            post = self.forward(x, [frame], training=False)
        return post.data[0]
