"""Command-line driver: data generation, training, inference, evaluation,
and the ablation grid.

Every command takes `--config <path>` (structured text mirroring the flat
config keys) plus repeatable `--set key=value` overrides; `--seed` and
`--out-dir` are global conveniences. Exit code 0 on success; on failure a
single `error: ...` line goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from mrenet.binio import FormatError
from mrenet.experiments import (
    ABLATION_AXES,
    apply_overrides,
    config_from_text,
    config_to_text,
    ExperimentConfig,
    run_ablation_suite,
    run_experiment,
)
from mrenet.inference import sliding_window_infer
from mrenet.model import SegmentationModel
from mrenet.synthdata import generate_cohort, read_volume, write_volume
from mrenet.tensor import ConfigError


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = config_from_text(
            Path(args.config).read_text(encoding="utf-8"))
    else:
        cfg = ExperimentConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"seed={args.seed}"])
    return cfg


def _require_out_dir(args) -> Path:
    if not args.out_dir:
        raise ConfigError("this command needs --out-dir")
    return Path(args.out_dir)


def _progress(line: str):
    print(line, flush=True)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _require_out_dir(args)
    manifest = generate_cohort(cfg.data, out)
    import hashlib

    digest = hashlib.sha256(
        manifest.to_text().encode("utf-8")).hexdigest()
    print(f"manifest={out / 'cohort.manifest'} subjects="
          f"{len(manifest.entries)} sha256={digest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _require_out_dir(args)
    result = run_experiment(cfg, out, do_train=True, do_eval=False,
                            figures=not args.no_figures, progress=_progress)
    print(f"trained runs={len(result.runs)} out_dir={out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _require_out_dir(args)
    result = run_experiment(cfg, out, do_train=False, do_eval=True,
                            figures=not args.no_figures, progress=_progress)
    agg = result.aggregate
    print(f"aggregate dice_mean={agg.mean('dice'):.6f} "
          f"dice_std={agg.std('dice'):.6f} "
          f"hd95_mean={agg.mean('hd95'):.6f} "
          f"report={out / 'aggregate.csv'}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    volume, spacing = read_volume(args.input)
    model = SegmentationModel(cfg.model, seed=cfg.seed)
    model.store.load_state(args.checkpoint)
    labels = sliding_window_infer(
        volume.astype(cfg.model.np_dtype), model,
        cfg.infer_core_dhw, cfg.infer_margin_dhw)
    write_volume(args.output, labels[None].astype(np.uint8), spacing)
    print(f"wrote {args.output} extents={tuple(labels.shape)} "
          f"categories={int(labels.max())}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _require_out_dir(args)
    result = run_ablation_suite(cfg, args.axis, out,
                                figures=not args.no_figures,
                                progress=_progress)
    print(f"table={out / 'table.csv'} cells={len(result.cells)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrenet",
        description="Low-shot 3D segmentation: synthetic data, training, "
                    "inference, evaluation, and ablations.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="structured-text config file")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a flat config key (repeatable)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the experiment seed")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--no-figures", action="store_true",
                       help="skip rendering matplotlib figures")

    p = sub.add_parser("gen-data", help="write a synthetic cohort + manifest")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train every shot split into --out-dir")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained runs in --out-dir")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="label one volume with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--input", required=True, help="input volume (.mrevol)")
    p.add_argument("--output", required=True, help="output label volume")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run one ablation axis")
    common(p)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("show-config",
                       help="print the fully resolved config and exit")
    common(p)
    p.set_defaults(func=cmd_show_config)
    return parser


def cmd_show_config(args) -> int:
    print(config_to_text(_load_config(args)), end="")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, IsADirectoryError,
            NotADirectoryError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
