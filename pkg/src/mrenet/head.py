"""Multimodal prototype classifier.

Each of the K categories is represented by M prototype vectors stored as
columns of a weight matrix W [n_embed, K*M] (column (k-1)*M + j is category
k's j-th mode).  Scores are scaled cosine similarities between L2-normalized
per-voxel embeddings and L2-normalized prototype columns, computed as a
bias-free 1x1x1 convolution so prototype matching is an ordinary forward
pass.  A per-voxel mixing network assigns convex weights to each category's
modes, and the class posterior is the normalized alpha-weighted mixture of
mode likelihoods.

A plain convolutional softmax head is provided for the no-metric-learning
ablation, and a squared-Euclidean posterior for the distance ablation.
"""

from __future__ import annotations

import numpy as np

from mrenet import tensor as T
from mrenet.layers import Conv3d, Linear
from mrenet.params import ParamStore
from mrenet.tensor import ConfigError, Tensor

XI_INIT = 10.0
MIXING_STRATEGIES = ("adaptive", "onehot", "average")


def mixing_hidden_width(n_embed: int, k: int, m: int) -> int:
    """Squeeze width: 512 capped, at least K*M, scaled down with n_embed."""
    return min(512, max(k * m, n_embed // 4))


class PrototypeBank:
    """W [n_embed, K*M] plus the learnable score scale xi."""

    def __init__(self, store: ParamStore, n_embed: int, k: int, m: int,
                 rng: np.random.Generator, dtype=np.float64,
                 prefix: str = "head"):
        if k < 2 or m < 1:
            raise ConfigError(f"need K >= 2 and M >= 1, got K={k}, M={m}")
        self.k = k
        self.m = m
        self.n_embed = n_embed
        self.weight = store.add(
            prefix + ".prototypes",
            (rng.normal(size=(n_embed, k * m)) / np.sqrt(n_embed)).astype(dtype))
        self.xi = store.add(prefix + ".xi", np.array(XI_INIT, dtype=dtype))

    def column(self, k: int, j: int) -> np.ndarray:
        """Prototype for category k (1-based), mode j (1-based)."""
        return self.weight.data[:, (k - 1) * self.m + (j - 1)]


class MixingNet:
    """Per-voxel fc(n_embed -> d) -> ReLU -> fc(d -> K*M) -> sigmoid."""

    def __init__(self, store: ParamStore, n_embed: int, k: int, m: int,
                 rng: np.random.Generator, dtype=np.float64,
                 prefix: str = "head.mix"):
        d = mixing_hidden_width(n_embed, k, m)
        self.fc1 = Linear(store, prefix + ".fc1", n_embed, d, rng, dtype)
        self.fc2 = Linear(store, prefix + ".fc2", d, k * m, rng, dtype)

    def beta(self, emb_last: Tensor) -> Tensor:
        """emb_last: [..., n_embed] -> beta in (0,1), shape [..., K*M]."""
        return T.sigmoid(self.fc2(T.relu(self.fc1(emb_last))))


def _channels_last(x: Tensor) -> Tensor:
    b, c = x.data.shape[0], x.data.shape[1]
    flat = T.reshape(x, (b, c, -1))
    return T.transpose(flat, (0, 2, 1))  # [B, N, C]


def _channels_first(x: Tensor, extents) -> Tensor:
    b, n, c = x.data.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (b, c) + tuple(extents))


def cosine_scores(emb: Tensor, bank: PrototypeBank) -> Tensor:
    """xi * cos(embedding, prototype) per voxel: [B, K*M, D, H, W]."""
    if emb.data.shape[1] != bank.n_embed:
        raise ConfigError(
            f"embedding has {emb.data.shape[1]} channels, prototypes expect "
            f"{bank.n_embed}")
    e_hat = T.l2_normalize(emb, axis=1)
    c_hat = T.l2_normalize(bank.weight, axis=0)
    kernel = T.reshape(T.transpose(c_hat, (1, 0)),
                       (bank.k * bank.m, bank.n_embed, 1, 1, 1))
    return T.mul(T.conv3d(e_hat, kernel), bank.xi)


def mixing_coefficients(emb: Tensor, mix: MixingNet | None, strategy: str,
                        k: int, m: int, scores: Tensor | None = None) -> Tensor:
    """Convex mode weights per voxel and category: [B, K*M, D, H, W].

    adaptive: per-category softmax of the mixing net's sigmoid outputs;
    average: 1/M everywhere; onehot: 1 on each category's best-scoring mode.
    """
    if strategy == "average":
        ref = emb.data.shape
        shape = (ref[0], k * m) + tuple(ref[2:])
        return Tensor(np.full(shape, 1.0 / m, dtype=emb.data.dtype))
    if strategy == "onehot":
        if scores is None:
            raise ConfigError("onehot mixing requires the score field")
        s = scores.data.reshape(scores.data.shape[0], k, m, -1)
        best = s.argmax(axis=2)  # ties -> lowest mode index
        alpha = np.zeros_like(s)
        np.put_along_axis(alpha, best[:, :, None, :], 1.0, axis=2)
        return Tensor(alpha.reshape(scores.data.shape))
    if strategy == "adaptive":
        if mix is None:
            raise ConfigError("adaptive mixing requires mixing-net parameters")
        extents = emb.data.shape[-3:]
        beta = mix.beta(_channels_last(emb))          # [B, N, K*M]
        b, n = beta.data.shape[0], beta.data.shape[1]
        alpha = T.softmax(T.reshape(beta, (b, n, k, m)), axis=3)
        return _channels_first(T.reshape(alpha, (b, n, k * m)), extents)
    raise ConfigError(f"unknown mixing strategy {strategy!r}")


def mixture_posterior(scores: Tensor, alpha: Tensor, k: int, m: int) -> Tensor:
    """P(category | voxel) = sum_j alpha_kj exp(score_kj) / total: [B,K,D,H,W].

    Stabilized by subtracting the per-voxel max score (a constant w.r.t. the
    graph) before exponentiation.
    """
    b = scores.data.shape[0]
    extents = scores.data.shape[-3:]
    peak = scores.data.max(axis=1, keepdims=True)
    weighted = T.mul(alpha, T.exp(T.sub(scores, Tensor(peak))))
    per_mode = T.reshape(weighted, (b, k, m) + tuple(extents))
    per_cat = T.reduce_sum(per_mode, axis=2)
    total = T.reduce_sum(per_cat, axis=1, keepdims=True)
    return T.div(per_cat, total)


def euclidean_posterior(emb: Tensor, bank: PrototypeBank, alpha: Tensor) -> Tensor:
    """Mixture posterior from exp(-xi * ||e_hat - c_hat||^2) likelihoods.

    Computed by explicit dense distances (no weight-embedding shortcut).
    """
    b = emb.data.shape[0]
    extents = emb.data.shape[-3:]
    e_hat = T.l2_normalize(emb, axis=1)
    c_hat = T.l2_normalize(bank.weight, axis=0)
    e_flat = T.reshape(e_hat, (b, bank.n_embed, 1, -1))     # [B,C,1,N]
    c_cols = T.reshape(c_hat, (1, bank.n_embed, bank.k * bank.m, 1))
    d_sq = T.reduce_sum(T.square(T.sub(e_flat, c_cols)), axis=1)  # [B,KM,N]
    scores = T.mul(d_sq, T.mul(bank.xi, Tensor(np.array(-1.0, emb.data.dtype))))
    scores = T.reshape(scores, (b, bank.k * bank.m) + tuple(extents))
    return mixture_posterior(scores, alpha, bank.k, bank.m)


def predict_labels(posterior: Tensor | np.ndarray) -> np.ndarray:
    """Per-voxel argmax as 1-based labels; ties go to the lowest category."""
    probs = posterior.data if isinstance(posterior, Tensor) else posterior
    axis = 0 if probs.ndim == 4 else 1
    return (probs.argmax(axis=axis) + 1).astype(np.uint8)


class MreHead:
    """Prototype bank + mixing network; embedding field -> posterior field."""

    def __init__(self, store: ParamStore, n_embed: int, k: int, m: int,
                 rng: np.random.Generator, dtype=np.float64,
                 distance: str = "cosine", mixing: str = "adaptive"):
        if distance not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown distance {distance!r}")
        if mixing not in MIXING_STRATEGIES:
            raise ConfigError(f"unknown mixing strategy {mixing!r}")
        self.bank = PrototypeBank(store, n_embed, k, m, rng, dtype)
        self.mix = MixingNet(store, n_embed, k, m, rng, dtype) \
            if mixing == "adaptive" else None
        self.distance = distance
        self.mixing = mixing

    def __call__(self, emb: Tensor, training: bool) -> Tensor:
        k, m = self.bank.k, self.bank.m
        scores = cosine_scores(emb, self.bank)
        alpha = mixing_coefficients(emb, self.mix, self.mixing, k, m,
                                    scores=scores)
        if self.distance == "euclidean":
            return euclidean_posterior(emb, self.bank, alpha)
        return mixture_posterior(scores, alpha, k, m)


class FcnHead:
    """Plain 1x1x1 convolutional classifier + softmax (no prototypes)."""

    def __init__(self, store: ParamStore, n_embed: int, k: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.k = k
        self.conv = Conv3d(store, "head.fcn", n_embed, k, 1, rng, dtype)

    def __call__(self, emb: Tensor, training: bool) -> Tensor:
        return T.softmax(self.conv(emb), axis=1)
