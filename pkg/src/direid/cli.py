"""Command-line front-end: ``direid <subcommand> [--config FILE] [--set key=value ...]``.

Every subcommand resolves its configuration (defaults < config file < ``--set``
overrides < subcommand flags), writes it next to its outputs as
``<subcommand>_config.yaml`` and only ever writes under the output directory.
``DIREID_OUT`` replaces the configured output root.

Exit status: 0 on success, 2 for usage errors (bad flags, unknown config keys,
missing files), 1 for failures while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, dump_config, load_config

log = logging.getLogger("direid")

REPORT_FIELDS = ("cmc", "map", "variant")
REPORT_RANKS = (1, 5, 10)


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# helpers

def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required field: {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _require_dataset(cfg: ExperimentConfig) -> None:
    root = Path(cfg.data.root)
    if not (root / "manifest.csv").exists():
        raise UsageError(f"data.root has no manifest.csv: {root} (run `direid generate-data`)")


def resolve_config(args, extra: list[str] | None = None) -> ExperimentConfig:
    overrides = list(args.set or []) + list(extra or [])
    cfg = load_config(args.config, overrides)
    env_out = os.environ.get("DIREID_OUT")
    if env_out:
        cfg.out_dir = env_out
    return cfg


def _prepare_out(cfg: ExperimentConfig, command: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / f"{command.replace('-', '_')}_config.yaml")
    return out


# ----------------------------------------------------------------------------
# subcommands

def cmd_generate_data(args) -> int:
    from .experiment import generate_dataset

    extra = []
    for flag, key in (("ids", "num_identities"), ("per_id", "images_per_identity"),
                      ("cameras", "num_cameras"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            extra.append(f"data.{key}={getattr(args, flag)}")
    if args.out is not None:
        extra.append(f"data.root={args.out}")
    cfg = resolve_config(args, extra)
    root = Path(cfg.data.root)
    train, test = generate_dataset(cfg, root)
    dump_config(cfg, root / "generate_data_config.yaml")
    print(f"wrote {len(train) + len(test)} images ({train.num_identities} train / "
          f"{test.num_identities} test identities) to {root}")
    return 0


def cmd_degrade(args) -> int:
    from .degradations import degrade_directory

    src = _require_file(args.input, "--in")
    if not src.is_dir():
        raise UsageError(f"--in must be a directory: {src}")
    n = degrade_directory(str(src), args.out, args.kind, args.param)
    print(f"degraded {n} images ({args.kind}, {args.param}) into {args.out}")
    return 0


def cmd_pretrain_id(args) -> int:
    from .experiment import dataset_split, new_model, run_stage0, train_corpus

    cfg = resolve_config(args)
    _require_dataset(cfg)
    out = _prepare_out(cfg, args.command)
    train_m, _ = dataset_split(cfg)
    res = run_stage0(cfg, train_corpus(cfg, train_m), out, new_model(cfg))
    print(json.dumps(res, default=str))
    return 0


def cmd_train_ddgan(args) -> int:
    from .experiment import dataset_split, new_model, run_stage1, train_corpus

    cfg = resolve_config(args)
    _require_dataset(cfg)
    stage0 = _require_file(args.stage0, "stage0 checkpoint (--stage0)")
    resume = _require_file(args.resume, "--resume checkpoint") if args.resume else None
    out = _prepare_out(cfg, args.command)
    train_m, _ = dataset_split(cfg)
    res = run_stage1(cfg, train_corpus(cfg, train_m), out, stage0, new_model(cfg), resume=resume)
    print(json.dumps(res, default=str))
    return 0


def cmd_train_dfen(args) -> int:
    from .experiment import dataset_split, new_model, run_stage2, train_corpus

    cfg = resolve_config(args)
    _require_dataset(cfg)
    stage0 = _require_file(args.stage0, "stage0 checkpoint (--stage0)")
    stage1 = None
    if not args.skip_stage1:
        stage1 = _require_file(args.stage1, "stage1 checkpoint (--stage1)")
    out = _prepare_out(cfg, args.command)
    train_m, _ = dataset_split(cfg)
    res = run_stage2(cfg, train_corpus(cfg, train_m), out, stage0, stage1, new_model(cfg),
                     skip_stage1=args.skip_stage1)
    print(json.dumps(res, default=str))
    return 0


def cmd_evaluate(args) -> int:
    from .experiment import evaluate_checkpoint

    ckpt = _require_file(args.checkpoint, "checkpoint (--checkpoint)")
    extra = [f"eval.variant={args.variant}"] if args.variant else []
    cfg = resolve_config(args, extra)
    _require_dataset(cfg)
    out = _prepare_out(cfg, args.command)
    report = evaluate_checkpoint(cfg, str(ckpt), cfg.eval.variant)
    report.pop("trial_cmc", None)
    (out / f"metrics_{cfg.eval.variant}.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report))
    return 0


def cmd_ablate(args) -> int:
    from .experiment import PRESETS, run_preset

    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    cfg = resolve_config(args)
    _require_dataset(cfg)
    stage0 = _require_file(args.stage0, "--stage0 checkpoint") if args.stage0 else None
    stage1 = _require_file(args.stage1, "--stage1 checkpoint") if args.stage1 else None
    out = _prepare_out(cfg, args.command) / args.preset
    res = run_preset(cfg, args.preset, out, stage0, stage1)
    for variant, rep in res["reports"].items():
        print(json.dumps({k: v for k, v in rep.items() if k != "trial_cmc"}))
    return 0


def load_report(path) -> dict:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{p}: not a readable metrics report ({exc})") from exc
    missing = [f for f in REPORT_FIELDS if not isinstance(data, dict) or f not in data]
    if missing:
        raise UsageError(f"{p}: metrics schema mismatch, missing {missing}")
    if not isinstance(data["cmc"], list) or len(data["cmc"]) < max(REPORT_RANKS):
        raise UsageError(f"{p}: metrics schema mismatch, cmc must list at least "
                         f"{max(REPORT_RANKS)} ranks")
    return data


def format_report(paths) -> str:
    if not paths:
        raise UsageError("report needs at least one metrics file")
    reports = [load_report(p) for p in paths]

    def row_values(r):
        return [r["cmc"][k - 1] for k in REPORT_RANKS] + [r["map"]]

    base = row_values(reports[0])
    cols = [f"R{k}" for k in REPORT_RANKS] + ["mAP"]
    header = ["run", "variant"] + cols + [f"d{c}" for c in cols]
    rows = []
    for p, r in zip(paths, reports):
        vals = row_values(r)
        rows.append([str(p), str(r["variant"])] + [f"{v:.3f}" for v in vals]
                    + [f"{v - b:+.3f}" for v, b in zip(vals, base)])
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]

    def fmt(cells):
        return "  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                         for i, (c, w) in enumerate(zip(cells, widths))).rstrip()

    return "\n".join([fmt(header)] + [fmt(r) for r in rows])


def cmd_report(args) -> int:
    print(format_report(args.files))
    return 0


# ----------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-path override, repeatable (e.g. train.ddgan.iterations=100)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="direid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("generate-data", parents=[common], help="render the synthetic corpus")
    p.add_argument("--ids", type=int)
    p.add_argument("--per-id", type=int)
    p.add_argument("--cameras", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: data.root)")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("degrade", parents=[common], help="apply one degradation to a directory")
    p.add_argument("--kind", required=True, choices=["resolution", "illumination"])
    p.add_argument("--param", required=True, type=float)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("pretrain-id", parents=[common], help="Stage 0: identity encoder")
    p.set_defaults(func=cmd_pretrain_id)

    p = sub.add_parser("train-ddgan", parents=[common], help="Stage 1: disentangling GAN")
    p.add_argument("--stage0")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train_ddgan)

    p = sub.add_parser("train-dfen", parents=[common], help="Stage 2: feature embedding")
    p.add_argument("--stage0")
    p.add_argument("--stage1")
    p.add_argument("--skip-stage1", action="store_true")
    p.set_defaults(func=cmd_train_dfen)

    p = sub.add_parser("evaluate", parents=[common], help="single-shot MLR evaluation")
    p.add_argument("--checkpoint")
    p.add_argument("--variant", choices=["fused", "f_inv", "f_sen_weighted"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate an ablation preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--stage0", help="reuse a Stage-0 checkpoint")
    p.add_argument("--stage1", help="reuse a Stage-1 checkpoint")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="compare metrics reports")
    p.add_argument("files", nargs="*")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"direid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any failure as a diagnostic
        log.debug("failure", exc_info=True)
        print(f"direid {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
