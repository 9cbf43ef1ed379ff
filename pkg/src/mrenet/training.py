"""Training loop: patch sampling, augmentation, hard-example mining,
per-category-normalized cross-entropy, and Adam with a step schedule."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mrenet import tensor as T
from mrenet.embedding import CoordinateFrame
from mrenet.model import ModelConfig, SegmentationModel
from mrenet.params import backward_pass
from mrenet.tensor import ConfigError, Tensor

# Guard inside log() so a posterior that underflows to 0 yields a large
# finite loss instead of -inf.
LOG_GUARD = 1e-30


@dataclass(frozen=True)
class AugmentConfig:
    """Online augmentation knobs; all draws happen even when an op is a
    no-op so the random stream does not depend on the parameters."""
    mirror_prob: float = 0.5
    brightness_delta: float = 0.1
    contrast_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ConfigError(
                f"mirror_prob must be in [0,1], got {self.mirror_prob}")
        if self.brightness_delta < 0:
            raise ConfigError(
                f"brightness_delta must be >= 0, got {self.brightness_delta}")
        lo, hi = self.contrast_range
        if not lo <= hi:
            raise ConfigError(f"contrast_range is empty: ({lo}, {hi})")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch: int = 24
    patch_extents: tuple[int, int, int] = (36, 36, 12)  # (H, W, D)
    eta: float = 1e-3
    schedule_interval: int = 1500
    schedule_factor: float = 0.1
    n_lg: int = 6               # majority-keep multiple for hard-example mining
    minority: tuple[int, ...] = ()
    majority: tuple[int, ...] = ()
    ohem_on: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if len(self.patch_extents) != 3 or any(
                e < 1 for e in self.patch_extents):
            raise ConfigError(
                f"patch_extents must be 3 positive ints, got {self.patch_extents}")
        if self.eta <= 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.schedule_interval < 1:
            raise ConfigError(
                f"schedule_interval must be >= 1, got {self.schedule_interval}")
        if self.n_lg < 1:
            raise ConfigError(f"n_lg must be >= 1, got {self.n_lg}")
        overlap = set(self.minority) & set(self.majority)
        if overlap:
            raise ConfigError(
                f"categories {sorted(overlap)} are in both groups")
        if self.checkpoint_interval < 1:
            raise ConfigError(
                f"checkpoint_interval must be >= 1, got {self.checkpoint_interval}")

    @property
    def patch_extents_dhw(self) -> tuple[int, int, int]:
        """Patch extents in internal array order [D,H,W]; the config field
        is (H, W, D)."""
        h, w, d = self.patch_extents
        return (d, h, w)


def learning_rate(cfg: TrainConfig, t: int) -> float:
    """Step schedule: eta scaled by factor every `schedule_interval` steps."""
    return cfg.eta * cfg.schedule_factor ** (t // cfg.schedule_interval)


def sample_patch(cohort: Sequence, rng: np.random.Generator,
                 patch_extents_dhw: tuple[int, int, int]):
    """Pick a uniform subject and a uniform valid offset within it.

    `cohort` elements expose `.image` [C,D,H,W] and `.labels` [D,H,W].
    Returns (image patch, label patch, CoordinateFrame).
    """
    if len(cohort) == 0:
        raise ConfigError("cohort is empty")
    subj = cohort[int(rng.integers(len(cohort)))]
    image, labels = subj.image, subj.labels
    volume = image.shape[1:]
    offset = []
    for name, pe, ve in zip("DHW", patch_extents_dhw, volume):
        if pe > ve:
            raise ConfigError(
                f"patch extent {pe} exceeds volume extent {ve} on axis {name}")
        offset.append(int(rng.integers(ve - pe + 1)))
    sl = tuple(slice(o, o + p) for o, p in zip(offset, patch_extents_dhw))
    frame = CoordinateFrame(tuple(volume), tuple(offset))
    return image[(slice(None),) + sl].copy(), labels[sl].copy(), frame


def augment_patch(image: np.ndarray, labels: np.ndarray, aug: AugmentConfig,
                  rng: np.random.Generator):
    """Random lateral mirror (image and labels together) plus contrast
    multiply and brightness add on the image only.

    Returns (image, labels, mirrored); the caller must propagate the mirror
    flag into the patch's CoordinateFrame so the coordinate channels keep
    describing source positions.
    """
    u = rng.random()
    contrast = rng.uniform(*aug.contrast_range)
    brightness = rng.uniform(-aug.brightness_delta, aug.brightness_delta)
    mirrored = u < aug.mirror_prob
    if mirrored:
        image = image[..., ::-1]
        labels = labels[..., ::-1]
    image = image * contrast + brightness
    return np.ascontiguousarray(image), np.ascontiguousarray(labels), mirrored


def ohem_select(per_voxel_loss: np.ndarray, labels: np.ndarray,
                minority: Sequence[int], majority: Sequence[int],
                n_lg: int) -> np.ndarray:
    """Keep every minority-group voxel plus the `n_lg * (minority count)`
    highest-loss majority-group voxels (all of them if fewer exist).

    Ties break toward the lower flat voxel index. With no minority voxels
    in the batch the ratio is undefined, so the whole batch is kept (the
    selection degrades to the plain loss) and a warning is emitted.
    Selection spans the whole mini-batch.
    """
    loss = np.asarray(per_voxel_loss, dtype=np.float64).ravel()
    lab_arr = np.asarray(labels)
    lab = lab_arr.ravel()
    if loss.shape != lab.shape:
        raise ConfigError(
            f"loss map has {loss.shape[0]} voxels but labels have {lab.shape[0]}")
    is_min = np.isin(lab, list(minority))
    is_maj = np.isin(lab, list(majority))
    stray = ~(is_min | is_maj)
    if stray.any():
        bad = sorted(np.unique(lab[stray]).tolist())
        raise ConfigError(
            f"categories {bad} are present but assigned to no group")
    keep = is_min.copy()
    maj_idx = np.flatnonzero(is_maj)
    n_min = int(is_min.sum())
    if n_min == 0:
        n_keep = maj_idx.size
        warnings.warn(
            "mini-batch has no minority-group voxels; keeping the whole "
            "batch", RuntimeWarning, stacklevel=2)
    else:
        n_keep = min(n_lg * n_min, maj_idx.size)
    if maj_idx.size:
        order = np.argsort(-loss[maj_idx], kind="stable")
        keep[maj_idx[order[:n_keep]]] = True
    return keep.reshape(lab_arr.shape)


def per_voxel_nll(posterior: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """-log P(true category) per voxel; plain arrays, no graph."""
    b, k = posterior.shape[:2]
    lab = np.asarray(labels)
    flat = posterior.reshape(b, k, -1)
    idx = (lab.reshape(b, -1) - 1)[:, None, :]
    p = np.take_along_axis(flat, idx, axis=1)[:, 0, :]
    return (-np.log(p + LOG_GUARD)).reshape(lab.shape)


def dml_loss(posterior: Tensor, labels: np.ndarray,
             keep: np.ndarray) -> Tensor:
    """Sum over kept voxels of -log P(true)/N_k, with N_k the kept count of
    the voxel's category — each present category contributes its mean NLL."""
    lab = np.asarray(labels)
    keep_arr = np.asarray(keep, dtype=bool)
    b, k = posterior.data.shape[:2]
    if lab.shape != (b,) + posterior.data.shape[2:]:
        raise ConfigError(
            f"labels shape {lab.shape} does not match posterior "
            f"{posterior.data.shape}")
    if keep_arr.shape != lab.shape:
        raise ConfigError(
            f"keep-mask shape {keep_arr.shape} does not match labels {lab.shape}")
    if lab.min() < 1 or lab.max() > k:
        raise ConfigError(
            f"labels must lie in [1..{k}], got range "
            f"[{lab.min()}..{lab.max()}]")
    kept = np.flatnonzero(keep_arr.ravel())
    if kept.size == 0:
        raise ConfigError("keep-mask excludes every voxel")
    voxels = int(np.prod(posterior.data.shape[2:]))
    bi = kept // voxels
    vi = kept % voxels
    cat = lab.reshape(b, -1)[bi, vi].astype(np.int64) - 1
    p = posterior.reshape(b, k, voxels)[(bi, cat, vi)]
    counts = np.bincount(cat, minlength=k).astype(np.float64)
    weights = np.zeros(k)
    present = counts > 0
    weights[present] = 1.0 / counts[present]
    w = weights[cat].astype(posterior.data.dtype, copy=False)
    return -(T.log(p + LOG_GUARD) * w).sum()


def _validate_groups(k: int, cfg: TrainConfig) -> None:
    assigned = set(cfg.minority) | set(cfg.majority)
    known = set(range(1, k + 1))
    unknown = assigned - known
    if unknown:
        raise ConfigError(
            f"group lists mention unknown categories {sorted(unknown)} "
            f"(model has categories 1..{k})")
    missing = known - assigned
    if missing:
        raise ConfigError(
            f"categories {sorted(missing)} are assigned to no group")


@dataclass
class TrainResult:
    model: SegmentationModel
    losses: list[float]
    etas: list[float]
    trace_path: Path | None
    checkpoint_paths: list[Path]


def train(cohort: Sequence, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir=None, model: SegmentationModel | None = None,
          progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run the sample -> forward -> loss -> backward -> Adam loop.

    Deterministic given the seed: iteration t draws from a fresh generator
    keyed on (seed, t), so a run resumed from a checkpoint (the store's step
    counter marks completed iterations) produces the identical trace. Writes
    an append-only `loss_trace.csv` and periodic checkpoints when `out_dir`
    is given.
    """
    if model is None:
        model = SegmentationModel(model_cfg, seed=train_cfg.seed)
    if train_cfg.ohem_on:
        _validate_groups(model.cfg.k, train_cfg)
    if len(cohort) == 0:
        raise ConfigError("cohort is empty")
    in_ch = cohort[0].image.shape[0]
    if in_ch != model.cfg.in_channels:
        raise ConfigError(
            f"cohort volumes have {in_ch} channels but the model expects "
            f"{model.cfg.in_channels}")
    dtype = model.cfg.np_dtype
    extents = train_cfg.patch_extents_dhw

    out = Path(out_dir) if out_dir is not None else None
    trace_path = None
    trace_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trace_path = out / "loss_trace.csv"
        fresh = not trace_path.exists() or trace_path.stat().st_size == 0
        trace_file = open(trace_path, "a", encoding="utf-8")
        if fresh:
            trace_file.write("iter,loss,eta\n")

    losses: list[float] = []
    etas: list[float] = []
    checkpoints: list[Path] = []
    start = model.store.step
    try:
        for t in range(start, train_cfg.iterations):
            rng = np.random.default_rng(
                np.random.SeedSequence([train_cfg.seed, t]))
            images = np.empty((train_cfg.batch, in_ch) + extents, dtype=dtype)
            labels = np.empty((train_cfg.batch,) + extents, dtype=np.int64)
            frames = []
            for b in range(train_cfg.batch):
                img, lab, frame = sample_patch(cohort, rng, extents)
                img, lab, mirrored = augment_patch(
                    img, lab, train_cfg.augment, rng)
                images[b] = img
                labels[b] = lab
                frames.append(replace(frame, mirror_w=mirrored))
            posterior = model.forward(Tensor(images), frames, training=True)
            if train_cfg.ohem_on:
                nll = per_voxel_nll(posterior.data, labels)
                keep = ohem_select(nll, labels, train_cfg.minority,
                                   train_cfg.majority, train_cfg.n_lg)
            else:
                keep = np.ones(labels.shape, dtype=bool)
            loss = dml_loss(posterior, labels, keep)
            backward_pass(loss, model.store)
            eta_t = learning_rate(train_cfg, t)
            model.store.adam_step(eta_t)
            value = float(loss.data)
            losses.append(value)
            etas.append(eta_t)
            if trace_file is not None:
                trace_file.write(f"{t},{value:.17g},{eta_t:.17g}\n")
                trace_file.flush()
            done = t + 1
            if out is not None and (done % train_cfg.checkpoint_interval == 0
                                    or done == train_cfg.iterations):
                path = out / f"checkpoint_{done:06d}.mreckpt"
                model.store.save(path)
                checkpoints.append(path)
            if progress is not None:
                progress(t, value)
    finally:
        if trace_file is not None:
            trace_file.close()
    return TrainResult(model=model, losses=losses, etas=etas,
                       trace_path=trace_path, checkpoint_paths=checkpoints)
