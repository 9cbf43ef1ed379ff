"""Experiment driver: shot splits, rotation, reports, and ablation grids.

An experiment = train one model per shot split (optionally rotating the
training subjects through the cohort), evaluate each on its held-out
subjects, and persist per-run plus aggregate reports. Every report embeds
the fully resolved configuration and a content hash of the data manifest,
and the aggregate is a pure function of the persisted per-run rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from mrenet.inference import MetricsReport, evaluate_cohort
from mrenet.model import ModelConfig, SegmentationModel
from mrenet.synthdata import (
    CohortManifest,
    CohortSpec,
    load_cohort,
    synthesize_cohort,
)
from mrenet.tensor import ConfigError
from mrenet.training import AugmentConfig, TrainConfig, train

CONFIG_HEADER = "mre-experiment-config"
REPORT_HEADER = "mre-experiment-report"
AGGREGATE_HEADER = "mre-aggregate-report"

ABLATION_AXES = ("n_e", "modes", "components", "distance", "mixing")


def desk_model_config() -> ModelConfig:
    """Model sized so a cold-start training run finishes in about a minute
    of CPU time while keeping every architectural component exercised."""
    return ModelConfig(k=5, m=3, n_embed=32, channel_scale=0.0625,
                       dtype="float32")


def desk_train_config() -> TrainConfig:
    """Training preset tuned so the full model converges (mean Dice ~0.8 on
    held-out subjects of the default cohort) in about 1.5 minutes of CPU
    time, with the rate decayed once late to stabilize the tail."""
    return TrainConfig(iterations=900, batch=4, patch_extents=(16, 16, 8),
                       eta=3e-3, schedule_interval=600, schedule_factor=0.1,
                       n_lg=6, minority=(5,), majority=(1, 2, 3, 4),
                       ohem_on=True, checkpoint_interval=300,
                       augment=AugmentConfig(brightness_delta=0.03,
                                             contrast_range=(0.97, 1.03)))


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=desk_model_config)
    train: TrainConfig = field(default_factory=desk_train_config)
    data: CohortSpec = field(default_factory=CohortSpec)
    data_manifest: str = ""        # when set, load this cohort instead
    shots_train: tuple[int, ...] = (0,)
    shots_test: tuple[int, ...] = ()   # empty = every other subject
    rotation: bool = False
    seed: int = 0
    # The default window equals the training patch so the pooled statistics
    # the gating/pyramid stages see at inference match training.
    infer_core: tuple[int, int, int] = (16, 16, 8)    # (H, W, D)
    infer_margin: tuple[int, int, int] = (0, 0, 0)    # (H, W, D)

    def __post_init__(self):
        if not self.shots_train:
            raise ConfigError("shots_train must name at least one subject")
        if len(set(self.shots_train)) != len(self.shots_train):
            raise ConfigError(f"duplicate train shots {self.shots_train}")
        overlap = set(self.shots_train) & set(self.shots_test)
        if overlap:
            raise ConfigError(
                f"subjects {sorted(overlap)} are in both train and test shots")
        if any(i < 0 for i in self.shots_train + self.shots_test):
            raise ConfigError("shot indices must be non-negative")
        if len(self.infer_core) != 3 or any(c < 1 for c in self.infer_core):
            raise ConfigError(
                f"infer_core must be 3 positive ints, got {self.infer_core}")
        if len(self.infer_margin) != 3 or any(m < 0 for m in self.infer_margin):
            raise ConfigError(
                f"infer_margin must be 3 non-negative ints, "
                f"got {self.infer_margin}")
        if not self.data_manifest and self.model.k != self.data.k:
            raise ConfigError(
                f"model.k={self.model.k} does not match data.k={self.data.k}")

    @property
    def infer_core_dhw(self) -> tuple[int, int, int]:
        h, w, d = self.infer_core
        return (d, h, w)

    @property
    def infer_margin_dhw(self) -> tuple[int, int, int]:
        h, w, d = self.infer_margin
        return (d, h, w)


# -- flat key serialization ---------------------------------------------------

def _fmt_float(v: float) -> str:
    return f"{float(v):.17g}"


def _fmt_ints(v) -> str:
    return " ".join(str(int(x)) for x in v)


def _fmt_floats(v) -> str:
    return " ".join(_fmt_float(x) for x in v)


def _parse_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ConfigError(f"expected 'true' or 'false', got {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split())


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split())


def to_flat(cfg: ExperimentConfig) -> dict[str, str]:
    m, t, d = cfg.model, cfg.train, cfg.data
    a = t.augment
    return {
        "model.k": str(m.k),
        "model.m": str(m.m),
        "model.n_embed": str(m.n_embed),
        "model.channel_scale": _fmt_float(m.channel_scale),
        "model.in_channels": str(m.in_channels),
        "model.head": m.head,
        "model.distance": m.distance,
        "model.mixing": m.mixing,
        "model.coords_on": "true" if m.coords_on else "false",
        "model.se_on": "true" if m.se_on else "false",
        "model.aspp_on": "true" if m.aspp_on else "false",
        "model.dtype": m.dtype,
        "train.iterations": str(t.iterations),
        "train.batch": str(t.batch),
        "train.patch_extents": _fmt_ints(t.patch_extents),
        "train.eta": _fmt_float(t.eta),
        "train.schedule_interval": str(t.schedule_interval),
        "train.schedule_factor": _fmt_float(t.schedule_factor),
        "train.n_lg": str(t.n_lg),
        "train.minority": _fmt_ints(t.minority),
        "train.majority": _fmt_ints(t.majority),
        "train.ohem_on": "true" if t.ohem_on else "false",
        "train.checkpoint_interval": str(t.checkpoint_interval),
        "train.augment.mirror_prob": _fmt_float(a.mirror_prob),
        "train.augment.brightness_delta": _fmt_float(a.brightness_delta),
        "train.augment.contrast_range": _fmt_floats(a.contrast_range),
        "data.manifest": cfg.data_manifest,
        "data.subjects": str(d.subjects),
        "data.k": str(d.k),
        "data.extents": _fmt_ints(d.extents),
        "data.modes_per_class": str(d.modes_per_class),
        "data.deform_sigma": _fmt_float(d.deform_sigma),
        "data.intensity_jitter": _fmt_float(d.intensity_jitter),
        "data.noise_sigma": _fmt_float(d.noise_sigma),
        "data.spacing": _fmt_floats(d.spacing),
        "data.seed": str(d.seed),
        "shots.train": _fmt_ints(cfg.shots_train),
        "shots.test": _fmt_ints(cfg.shots_test),
        "rotation": "true" if cfg.rotation else "false",
        "seed": str(cfg.seed),
        "infer.core_extents": _fmt_ints(cfg.infer_core),
        "infer.margin": _fmt_ints(cfg.infer_margin),
    }


def from_flat(flat: dict[str, str]) -> ExperimentConfig:
    base = to_flat(ExperimentConfig())
    unknown = sorted(set(flat) - set(base))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    v = dict(base)
    v.update(flat)
    try:
        model = ModelConfig(
            k=int(v["model.k"]), m=int(v["model.m"]),
            n_embed=int(v["model.n_embed"]),
            channel_scale=float(v["model.channel_scale"]),
            in_channels=int(v["model.in_channels"]),
            head=v["model.head"], distance=v["model.distance"],
            mixing=v["model.mixing"],
            coords_on=_parse_bool(v["model.coords_on"]),
            se_on=_parse_bool(v["model.se_on"]),
            aspp_on=_parse_bool(v["model.aspp_on"]),
            dtype=v["model.dtype"])
        contrast = _parse_floats(v["train.augment.contrast_range"])
        if len(contrast) != 2:
            raise ConfigError(
                f"contrast_range needs 2 values, got {contrast}")
        augment = AugmentConfig(
            mirror_prob=float(v["train.augment.mirror_prob"]),
            brightness_delta=float(v["train.augment.brightness_delta"]),
            contrast_range=(contrast[0], contrast[1]))
        pe = _parse_ints(v["train.patch_extents"])
        if len(pe) != 3:
            raise ConfigError(f"patch_extents needs 3 values, got {pe}")
        tcfg = TrainConfig(
            iterations=int(v["train.iterations"]),
            batch=int(v["train.batch"]), patch_extents=(pe[0], pe[1], pe[2]),
            eta=float(v["train.eta"]),
            schedule_interval=int(v["train.schedule_interval"]),
            schedule_factor=float(v["train.schedule_factor"]),
            n_lg=int(v["train.n_lg"]),
            minority=_parse_ints(v["train.minority"]),
            majority=_parse_ints(v["train.majority"]),
            ohem_on=_parse_bool(v["train.ohem_on"]),
            augment=augment,
            checkpoint_interval=int(v["train.checkpoint_interval"]))
        ext = _parse_ints(v["data.extents"])
        if len(ext) != 3:
            raise ConfigError(f"data.extents needs 3 values, got {ext}")
        spacing = _parse_floats(v["data.spacing"])
        if len(spacing) != 3:
            raise ConfigError(f"data.spacing needs 3 values, got {spacing}")
        data = CohortSpec(
            subjects=int(v["data.subjects"]), k=int(v["data.k"]),
            extents=(ext[0], ext[1], ext[2]),
            modes_per_class=int(v["data.modes_per_class"]),
            deform_sigma=float(v["data.deform_sigma"]),
            intensity_jitter=float(v["data.intensity_jitter"]),
            noise_sigma=float(v["data.noise_sigma"]),
            spacing=(spacing[0], spacing[1], spacing[2]),
            seed=int(v["data.seed"]))
        core = _parse_ints(v["infer.core_extents"])
        marg = _parse_ints(v["infer.margin"])
        if len(core) != 3 or len(marg) != 3:
            raise ConfigError(
                f"infer extents need 3 values, got {core} and {marg}")
        return ExperimentConfig(
            model=model, train=tcfg, data=data,
            data_manifest=v["data.manifest"],
            shots_train=_parse_ints(v["shots.train"]),
            shots_test=_parse_ints(v["shots.test"]),
            rotation=_parse_bool(v["rotation"]),
            seed=int(v["seed"]),
            infer_core=(core[0], core[1], core[2]),
            infer_margin=(marg[0], marg[1], marg[2]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = [CONFIG_HEADER]
    for key, value in to_flat(cfg).items():
        lines.append(f"  {key}: {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ExperimentConfig:
    lines = text.splitlines()
    stripped = [ln for ln in lines if ln.strip()]
    if not stripped or stripped[0].strip() != CONFIG_HEADER:
        raise ConfigError(f"config file must start with '{CONFIG_HEADER}'")
    flat: dict[str, str] = {}
    for ln in stripped[1:]:
        if ":" not in ln:
            raise ConfigError(f"expected 'key: value', got {ln!r}")
        key, _, value = ln.partition(":")
        flat[key.strip()] = value.strip()
    return from_flat(flat)


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply flat `key=value` override strings on top of a config."""
    flat = to_flat(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, _, value = pair.partition("=")
        key = key.strip()
        if key not in flat:
            raise ConfigError(f"unknown config keys: ['{key}']")
        flat[key] = value.strip()
    return from_flat(flat)


# -- experiment runs ----------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def resolve_cohort(cfg: ExperimentConfig):
    """Return (subjects, k, data hash). The hash covers the manifest bytes
    for on-disk cohorts and the equivalent manifest text for in-memory ones,
    so a report names its data regardless of where the volumes live."""
    if cfg.data_manifest:
        path = Path(cfg.data_manifest)
        if path.is_dir():
            from mrenet.synthdata import MANIFEST_NAME
            path = path / MANIFEST_NAME
        spec, subjects = load_cohort(path)
        if spec.k != cfg.model.k:
            raise ConfigError(
                f"model.k={cfg.model.k} does not match the manifest cohort "
                f"k={spec.k}")
        return subjects, spec.k, _sha256(path.read_bytes())
    subjects = synthesize_cohort(cfg.data)
    manifest = CohortManifest(
        spec=cfg.data,
        entries=[(f"{s.name}.image.mrevol", f"{s.name}.labels.mrevol")
                 for s in subjects])
    return subjects, cfg.data.k, _sha256(manifest.to_text().encode("utf-8"))


def shot_splits(cfg: ExperimentConfig, n_subjects: int):
    """Expand shots (and the rotation flag) into a list of
    (train indices, test indices) pairs that each partition the cohort."""
    everyone = set(range(n_subjects))
    bad = [i for i in cfg.shots_train + cfg.shots_test if i >= n_subjects]
    if bad:
        raise ConfigError(
            f"shot indices {sorted(set(bad))} exceed the cohort size "
            f"{n_subjects}")
    if cfg.rotation:
        shots = len(cfg.shots_train)
        if shots >= n_subjects:
            raise ConfigError(
                f"rotation needs test subjects: {shots} shots >= "
                f"{n_subjects} subjects")
        splits = []
        for r in range(n_subjects):
            tr = tuple((r + j) % n_subjects for j in range(shots))
            te = tuple(sorted(everyone - set(tr)))
            splits.append((tr, te))
        return splits
    train_idx = tuple(cfg.shots_train)
    if cfg.shots_test:
        test_idx = tuple(cfg.shots_test)
        if set(train_idx) | set(test_idx) != everyone:
            raise ConfigError(
                "shots must partition the cohort: "
                f"train {sorted(train_idx)} + test {sorted(test_idx)} "
                f"does not cover all {n_subjects} subjects")
    else:
        test_idx = tuple(sorted(everyone - set(train_idx)))
    if not test_idx:
        raise ConfigError("no test subjects remain after the train shots")
    return [(train_idx, test_idx)]


def run_seed(cfg: ExperimentConfig, run_index: int) -> int:
    return int(np.random.SeedSequence(
        [cfg.seed, run_index]).generate_state(1)[0])


@dataclass
class RunResult:
    index: int
    train_subjects: tuple[int, ...]
    test_subjects: tuple[int, ...]
    run_dir: Path
    report: MetricsReport | None


@dataclass
class AggregateReport:
    """Mean/std over runs of each run's per-category and overall means."""
    categories: tuple[int, ...]
    rows: list[tuple[int, str, str, float]]    # (run, category|all, metric, v)
    fingerprint: str

    def _values(self, category: str, metric: str) -> list[float]:
        return [v for run, cat, met, v in self.rows
                if cat == category and met == metric]

    def mean(self, metric: str, category: str = "all") -> float:
        return float(np.mean(self._values(category, metric)))

    def std(self, metric: str, category: str = "all") -> float:
        return float(np.std(self._values(category, metric)))

    def n_runs(self) -> int:
        return len({run for run, _, _, _ in self.rows})

    def to_text(self) -> str:
        lines = [AGGREGATE_HEADER,
                 f"  fingerprint: {self.fingerprint}",
                 f"  runs: {self.n_runs()}",
                 "  [per-category]"]
        for c in self.categories:
            lines.append(
                f"  category {c}: dice {self.mean('dice', str(c)):.6f} "
                f"+/- {self.std('dice', str(c)):.6f} | "
                f"hd95 {self.mean('hd95', str(c)):.6f} "
                f"+/- {self.std('hd95', str(c)):.6f}")
        lines.append("  [overall]")
        lines.append(f"  dice mean {self.mean('dice'):.6f} "
                     f"std {self.std('dice'):.6f}")
        lines.append(f"  hd95 mean {self.mean('hd95'):.6f} "
                     f"std {self.std('hd95'):.6f}")
        return "\n".join(lines) + "\n"

    def to_csv_rows(self) -> list[str]:
        out = ["run,category,metric,value"]
        for run, cat, met, v in self.rows:
            out.append(f"{run},{cat},{met},{v:.10g}")
        for met in ("dice", "hd95"):
            for cat in [str(c) for c in self.categories] + ["all"]:
                out.append(f"mean,{cat},{met},{self.mean(met, cat):.10g}")
                out.append(f"std,{cat},{met},{self.std(met, cat):.10g}")
        return out


def aggregate_from_reports(categories, reports, fingerprint: str
                           ) -> AggregateReport:
    rows = []
    for run, report in enumerate(reports):
        for metric in ("dice", "hd95"):
            for c in categories:
                rows.append((run, str(c), metric,
                             report.category_mean(metric, c)))
            rows.append((run, "all", metric, report.mean(metric)))
    return AggregateReport(categories=tuple(categories), rows=rows,
                           fingerprint=fingerprint)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    out_dir: Path
    runs: list[RunResult]
    aggregate: AggregateReport | None
    fingerprint: str


def _write_report_files(run_dir: Path, report: MetricsReport,
                        config_text: str, data_hash: str):
    config_hash = _sha256(config_text.encode("utf-8"))
    text = "\n".join([
        REPORT_HEADER,
        f"  data-sha256: {data_hash}",
        f"  config-sha256: {config_hash}",
        "[config]",
        config_text.rstrip("\n"),
        "[metrics]",
        report.to_text().rstrip("\n"),
    ]) + "\n"
    (run_dir / "report.txt").write_text(text, encoding="utf-8")
    rows = [f"# config-sha256={config_hash}", f"# data-sha256={data_hash}"]
    rows += report.to_csv_rows()
    (run_dir / "report.csv").write_text("\n".join(rows) + "\n",
                                        encoding="utf-8")


def latest_checkpoint(run_dir: Path):
    ckpts = sorted(run_dir.glob("checkpoint_*.mreckpt"))
    return ckpts[-1] if ckpts else None


def run_experiment(cfg: ExperimentConfig, out_dir, *, do_train: bool = True,
                   do_eval: bool = True, figures: bool = True,
                   progress: Callable[[str], None] | None = None
                   ) -> ExperimentResult:
    """Train and/or evaluate every shot split of an experiment.

    Training is resumable: each run directory keeps checkpoints, and a rerun
    picks up from the newest one (or skips training entirely when the run is
    already complete). Evaluation rebuilds the model from the final
    checkpoint, so `do_train` and `do_eval` can be split across invocations.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects, k, data_hash = resolve_cohort(cfg)
    splits = shot_splits(cfg, len(subjects))
    config_text = config_to_text(cfg)
    (out / "config.resolved.txt").write_text(config_text, encoding="utf-8")
    fingerprint = (f"config={_sha256(config_text.encode('utf-8'))[:16]} "
                   f"data={data_hash[:16]}")
    categories = tuple(range(1, k + 1))

    runs: list[RunResult] = []
    reports: list[MetricsReport] = []
    for r, (train_idx, test_idx) in enumerate(splits):
        run_dir = out / f"run_{r:02d}"
        run_dir.mkdir(exist_ok=True)
        seed_r = run_seed(cfg, r)
        train_cfg = replace(cfg.train, seed=seed_r)
        model = SegmentationModel(cfg.model, seed=seed_r)
        ckpt = latest_checkpoint(run_dir)
        if ckpt is not None:
            model.store.load_state(ckpt)
        if do_train and model.store.step < train_cfg.iterations:
            if progress is not None:
                progress(f"run {r}: training from step {model.store.step} "
                         f"(train subjects {list(train_idx)})")
            train([subjects[i] for i in train_idx], cfg.model, train_cfg,
                  out_dir=run_dir, model=model)
        report = None
        if do_eval:
            if model.store.step < train_cfg.iterations:
                raise ConfigError(
                    f"run {r} is not trained: checkpoint step "
                    f"{model.store.step} < {train_cfg.iterations}; "
                    "run the train phase first")
            if progress is not None:
                progress(f"run {r}: evaluating {len(test_idx)} subjects")
            report = evaluate_cohort(
                model, [subjects[i] for i in test_idx],
                [subjects[i].name for i in test_idx],
                cfg.infer_core_dhw, cfg.infer_margin_dhw, categories,
                config_fingerprint=f"{fingerprint} run={r}")
            _write_report_files(run_dir, report, config_text, data_hash)
            if figures:
                from mrenet.figures import render_run_figures
                render_run_figures(report, run_dir)
            reports.append(report)
        runs.append(RunResult(index=r, train_subjects=train_idx,
                              test_subjects=test_idx, run_dir=run_dir,
                              report=report))

    aggregate = None
    if do_eval:
        aggregate = aggregate_from_reports(categories, reports, fingerprint)
        (out / "aggregate.txt").write_text(aggregate.to_text(),
                                           encoding="utf-8")
        (out / "aggregate.csv").write_text(
            "\n".join(aggregate.to_csv_rows()) + "\n", encoding="utf-8")
        if figures:
            from mrenet.figures import render_aggregate_figures
            render_aggregate_figures(aggregate, out)
    return ExperimentResult(config=cfg, out_dir=out, runs=runs,
                            aggregate=aggregate, fingerprint=fingerprint)


# -- ablation grids -----------------------------------------------------------

def _fcn_variant(model: ModelConfig, **kwargs) -> ModelConfig:
    """Switch to the plain convolutional head, which forbids the metric
    knobs, while toggling the requested components."""
    return replace(model, head="fcn", distance="cosine", mixing="adaptive",
                   **kwargs)


def ablation_cells(base: ExperimentConfig, axis: str):
    """Grid of (label, config) cells for one ablation axis."""
    m = base.model
    if axis == "n_e":
        sizes = []
        for factor in (0.25, 0.5, 1.0, 2.0):
            n = max(4, int(round(m.n_embed * factor)))
            if n not in sizes:
                sizes.append(n)
        return [(f"ne{n}", replace(base, model=replace(m, n_embed=n)))
                for n in sizes]
    if axis == "modes":
        return [(f"m{i}", replace(base, model=replace(m, m=i)))
                for i in (1, 2, 3, 4, 5)]
    if axis == "components":
        t = base.train
        off = dict(coords_on=False, se_on=False, aspp_on=False)
        cells = [
            ("a_baseline", replace(
                base, model=_fcn_variant(m, **off),
                train=replace(t, ohem_on=False))),
            ("b_metric", replace(
                base, model=replace(m, head="mre", **off),
                train=replace(t, ohem_on=False))),
            ("c_coords", replace(
                base, model=replace(m, head="mre", coords_on=True,
                                    se_on=False, aspp_on=False),
                train=replace(t, ohem_on=False))),
            ("d_attention", replace(
                base, model=replace(m, head="mre", coords_on=True,
                                    se_on=True, aspp_on=True),
                train=replace(t, ohem_on=False))),
            ("e_full", replace(
                base, model=replace(m, head="mre", coords_on=True,
                                    se_on=True, aspp_on=True),
                train=replace(t, ohem_on=True))),
            ("f_no_metric", replace(
                base, model=_fcn_variant(m, coords_on=True, se_on=True,
                                         aspp_on=True),
                train=replace(t, ohem_on=True))),
            ("g_no_coords", replace(
                base, model=replace(m, head="mre", coords_on=False,
                                    se_on=True, aspp_on=True),
                train=replace(t, ohem_on=True))),
        ]
        return cells
    if axis == "distance":
        return [(name, replace(base, model=replace(m, distance=name)))
                for name in ("cosine", "euclidean")]
    if axis == "mixing":
        return [(name, replace(base, model=replace(m, mixing=name)))
                for name in ("onehot", "average", "adaptive")]
    raise ConfigError(
        f"unknown ablation axis {axis!r}; valid axes: {ABLATION_AXES}")


@dataclass
class AblationResult:
    axis: str
    cells: list[tuple[str, ExperimentConfig, AggregateReport]]
    out_dir: Path

    def table_rows(self) -> list[str]:
        out = ["axis,cell,dice_mean,dice_std,hd95_mean,hd95_std"]
        for label, _, agg in self.cells:
            out.append(
                f"{self.axis},{label},{agg.mean('dice'):.10g},"
                f"{agg.std('dice'):.10g},{agg.mean('hd95'):.10g},"
                f"{agg.std('hd95'):.10g}")
        return out

    def to_text(self) -> str:
        lines = [f"mre-ablation-table axis={self.axis}"]
        for label, _, agg in self.cells:
            lines.append(
                f"  {label}: dice {agg.mean('dice'):.6f} "
                f"+/- {agg.std('dice'):.6f} | hd95 {agg.mean('hd95'):.6f} "
                f"+/- {agg.std('hd95'):.6f}")
        return "\n".join(lines) + "\n"


def run_ablation_suite(base: ExperimentConfig, axis: str, out_dir, *,
                       figures: bool = True,
                       progress: Callable[[str], None] | None = None
                       ) -> AblationResult:
    """Run one cell per grid point of the chosen axis and emit a comparison
    table (text + CSV) over the cells' aggregate Dice and HD95."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for label, cfg in ablation_cells(base, axis):
        if progress is not None:
            progress(f"cell {label}")
        result = run_experiment(cfg, out / f"cell_{label}", figures=figures,
                                progress=progress)
        cells.append((label, cfg, result.aggregate))
    result = AblationResult(axis=axis, cells=cells, out_dir=out)
    (out / "table.csv").write_text("\n".join(result.table_rows()) + "\n",
                                   encoding="utf-8")
    (out / "table.txt").write_text(result.to_text(), encoding="utf-8")
    if figures:
        from mrenet.figures import render_ablation_figures
        render_ablation_figures(result, out)
    return result
