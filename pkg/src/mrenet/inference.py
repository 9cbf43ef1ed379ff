"""Whole-volume sliding-window inference and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from mrenet.embedding import CoordinateFrame
from mrenet.tensor import ConfigError


def _window_plan(extent: int, core: int, margin: int, window: int):
    """Per-axis tiling: yields (write_start, write_len, win_start, crop_start)
    so that the written regions partition [0, extent)."""
    plans = []
    start = 0
    while start < extent:
        length = min(core, extent - start)
        win_start = min(max(start - margin, 0), extent - window)
        plans.append((start, length, win_start, start - win_start))
        start += core
    return plans


def sliding_window_infer(volume: np.ndarray, model,
                         core_extents: tuple[int, int, int],
                         margin: tuple[int, int, int]) -> np.ndarray:
    """Label a full volume by tiling it with expanded windows.

    ``volume`` is [C,D,H,W]. Each window of extents ``core + 2*margin`` is
    evaluated in eval mode and only its core region is written, so every
    voxel receives exactly one prediction. Windows near the border clamp
    inside the volume and shift their core crop; a volume smaller than one
    window is zero-padded symmetrically and the result cropped back.
    Returns a uint8 label map [D,H,W] with categories numbered from 1.
    """
    vol = np.asarray(volume)
    if vol.ndim != 4:
        raise ConfigError(
            f"expected a [C,D,H,W] volume, got shape {vol.shape}")
    core = tuple(int(c) for c in core_extents)
    marg = tuple(int(m) for m in margin)
    if any(c < 1 for c in core):
        raise ConfigError(f"core extents must be positive, got {core}")
    if any(m < 0 for m in marg):
        raise ConfigError(f"margins must be non-negative, got {marg}")
    window = tuple(c + 2 * m for c, m in zip(core, marg))

    pad = [max(0, w - e) for w, e in zip(window, vol.shape[1:])]
    before = [p // 2 for p in pad]
    if any(pad):
        spec = [(0, 0)] + [(b, p - b) for b, p in zip(before, pad)]
        work = np.pad(vol, spec)
    else:
        work = vol
    extents = work.shape[1:]

    labels = np.zeros(extents, dtype=np.uint8)
    for pd, ld, wd, cd in _window_plan(extents[0], core[0], marg[0], window[0]):
        for ph, lh, wh, ch in _window_plan(extents[1], core[1], marg[1],
                                           window[1]):
            for pw, lw, ww, cw in _window_plan(extents[2], core[2], marg[2],
                                               window[2]):
                patch = work[:, wd:wd + window[0], wh:wh + window[1],
                             ww:ww + window[2]]
                frame = CoordinateFrame(tuple(extents), (wd, wh, ww))
                post = model.posterior(patch, frame)
                pred = (np.argmax(post, axis=0) + 1).astype(np.uint8)
                labels[pd:pd + ld, ph:ph + lh, pw:pw + lw] = \
                    pred[cd:cd + ld, ch:ch + lh, cw:cw + lw]
    if any(pad):
        labels = labels[before[0]:before[0] + vol.shape[1],
                        before[1]:before[1] + vol.shape[2],
                        before[2]:before[2] + vol.shape[3]]
    return labels


def dice_coefficient(pred: np.ndarray, truth: np.ndarray,
                     category: int) -> float:
    """2|A∩B| / (|A|+|B|); both sets empty -> 1.0."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ConfigError(
            f"label maps differ in shape: {p.shape} vs {t.shape}")
    a = p == category
    b = t == category
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices [n,3] of mask voxels with a 6-neighbour outside the mask
    (out-of-bounds counts as outside, so array edges are surface)."""
    m = np.asarray(mask, dtype=bool)
    interior = np.ones_like(m)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        shifted = np.zeros_like(m)
        shifted[tuple(lo)] = m[tuple(hi)]      # neighbour at +1
        interior &= shifted
        shifted = np.zeros_like(m)
        shifted[tuple(hi)] = m[tuple(lo)]      # neighbour at -1
        interior &= shifted
    return np.argwhere(m & ~interior)


def volume_diagonal(extents, spacing) -> float:
    return math.sqrt(sum((e * s) ** 2 for e, s in zip(extents, spacing)))


def _nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    ordered = np.sort(values)
    rank = max(1, math.ceil(q / 100.0 * ordered.size))
    return float(ordered[rank - 1])


def hd95(pred: np.ndarray, truth: np.ndarray, category: int,
         spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
    """Max over both directions of the nearest-rank 95th percentile of
    surface-to-surface nearest distances, in physical units.

    One side empty -> the volume's physical diagonal (sentinel); both
    empty -> 0.0.
    """
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ConfigError(
            f"label maps differ in shape: {p.shape} vs {t.shape}")
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (3,) or (sp <= 0).any():
        raise ConfigError(f"spacing must be 3 positive floats, got {spacing}")
    a = surface_voxels(p == category)
    b = surface_voxels(t == category)
    if a.size == 0 and b.size == 0:
        return 0.0
    if a.size == 0 or b.size == 0:
        return volume_diagonal(p.shape, sp)
    pa = a * sp
    pb = b * sp
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return max(_nearest_rank_percentile(d_ab, 95.0),
               _nearest_rank_percentile(d_ba, 95.0))


# -- evaluation reports -----------------------------------------------------

@dataclass
class SubjectMetrics:
    subject: str
    dice: dict[int, float]
    hd95: dict[int, float]
    sentinel: dict[int, bool]


@dataclass
class MetricsReport:
    """Per-subject and aggregated Dice / HD95 for a set of categories."""
    categories: tuple[int, ...]
    subjects: list[SubjectMetrics] = field(default_factory=list)
    config_fingerprint: str = ""

    def category_mean(self, metric: str, category: int) -> float:
        values = [getattr(s, metric)[category] for s in self.subjects]
        return float(np.mean(values))

    def category_std(self, metric: str, category: int) -> float:
        values = [getattr(s, metric)[category] for s in self.subjects]
        return float(np.std(values))

    def mean(self, metric: str) -> float:
        return float(np.mean(
            [self.category_mean(metric, c) for c in self.categories]))

    def std(self, metric: str) -> float:
        return float(np.std(
            [self.category_mean(metric, c) for c in self.categories]))

    def sentinel_count(self, category: int) -> int:
        return sum(1 for s in self.subjects if s.sentinel[category])

    def to_text(self) -> str:
        lines = ["metrics-report",
                 f"  config-fingerprint: {self.config_fingerprint}",
                 f"  categories: {' '.join(str(c) for c in self.categories)}",
                 f"  subjects: {len(self.subjects)}",
                 "  [per-category]"]
        for c in self.categories:
            lines.append(
                f"  category {c}: dice {self.category_mean('dice', c):.6f} "
                f"+/- {self.category_std('dice', c):.6f} | "
                f"hd95 {self.category_mean('hd95', c):.6f} "
                f"+/- {self.category_std('hd95', c):.6f} "
                f"(sentinels {self.sentinel_count(c)})")
        lines.append("  [cross-category]")
        lines.append(f"  dice mean {self.mean('dice'):.6f} "
                     f"std {self.std('dice'):.6f}")
        lines.append(f"  hd95 mean {self.mean('hd95'):.6f} "
                     f"std {self.std('hd95'):.6f}")
        lines.append("  [subjects]")
        for s in self.subjects:
            for c in self.categories:
                flag = " sentinel" if s.sentinel[c] else ""
                lines.append(f"  subject {s.subject} category {c}: "
                             f"dice {s.dice[c]:.6f} hd95 {s.hd95[c]:.6f}"
                             f"{flag}")
        return "\n".join(lines) + "\n"

    def to_csv_rows(self) -> list[str]:
        rows = ["subject,category,metric,value,sentinel"]
        for s in self.subjects:
            for c in self.categories:
                rows.append(f"{s.subject},{c},dice,{s.dice[c]:.10g},0")
                rows.append(f"{s.subject},{c},hd95,{s.hd95[c]:.10g},"
                            f"{int(s.sentinel[c])}")
        return rows


def evaluate_subject(model, subject, name: str,
                     core_extents: tuple[int, int, int],
                     margin: tuple[int, int, int],
                     categories) -> SubjectMetrics:
    """Sliding-window prediction of one subject scored against its labels."""
    pred = sliding_window_infer(subject.image, model, core_extents, margin)
    spacing = tuple(getattr(subject, "spacing", (1.0, 1.0, 1.0)))
    dice = {}
    hd = {}
    sent = {}
    diag = volume_diagonal(subject.labels.shape, spacing)
    for c in categories:
        dice[c] = dice_coefficient(pred, subject.labels, c)
        hd[c] = hd95(pred, subject.labels, c, spacing)
        empty_pred = not (pred == c).any()
        empty_true = not (subject.labels == c).any()
        sent[c] = (empty_pred != empty_true) and hd[c] == diag
    return SubjectMetrics(subject=name, dice=dice, hd95=hd, sentinel=sent)


def evaluate_cohort(model, subjects, names,
                    core_extents: tuple[int, int, int],
                    margin: tuple[int, int, int],
                    categories, config_fingerprint: str = "") -> MetricsReport:
    report = MetricsReport(categories=tuple(categories),
                           config_fingerprint=config_fingerprint)
    for subject, name in zip(subjects, names):
        report.subjects.append(evaluate_subject(
            model, subject, name, core_extents, margin, categories))
    return report
