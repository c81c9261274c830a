"""highway-lab command line.

Usage:
    highway-lab count-params --model swin-b [--methods e3va,adapter,lora]
    highway-lab train --model toy-1 --method e3va --alpha 2 --steps 200 --seed 7
    highway-lab gradcheck --model micro --method lora
    highway-lab profile --model toy-1 --method e3va --k 20
    highway-lab compare --model toy-1 --methods fixed,full,adapter,e3va --k 20
    highway-lab ablate --model toy-1 --steps 100

Flags override the --config JSON file; E3VA_SEED overrides the file's seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler

from highway_lab import __version__
from highway_lab.accountant import count_row, verify_against_built
from highway_lab.config import (
    METHOD_ALIASES,
    ExperimentConfig,
    MethodConfig,
    load_config,
    preset,
    seed_from_env,
)
from highway_lab.data import gen_synthetic
from highway_lab.errors import ConfigError
from highway_lab.gradcheck import gradcheck
from highway_lab.profiler import (
    ABLATE_COLUMNS,
    COMPARE_COLUMNS,
    ablate,
    compare_methods,
    profile_step,
    render_ablation,
    render_comparison,
)
from highway_lab.reports import csv_text, ensure_free, report_name, write_csv, write_json
from highway_lab.train import train

log = logging.getLogger(__name__)

COUNT_COLUMNS = ("method", "backbone", "alpha", "trainable", "total", "delta_vs_full_pct")
DEFAULT_COUNT_METHODS = ("full", "fixed", "bitfit", "norm", "partial1", "adapter", "lora",
                         "adaptformer", "e3va", "e3va+", "e3va++")

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """File, then environment seed, then flags."""
    base = load_config(getattr(args, "config", None))
    data = base.model_dump()
    if getattr(args, "model", None):
        data["model"] = preset(args.model).model_dump()
    if getattr(args, "precision", None):
        data["model"]["precision"] = args.precision

    method = data["method"]
    if getattr(args, "method", None):
        chosen = METHOD_ALIASES.get(args.method, {"name": args.method})
        if chosen["name"] != method["name"]:
            method["train_fpn_norm"] = None
        method = {**method, **chosen}
    for flag in ("alpha", "adapter_dim", "train_fpn_norm", "trainable_reduction", "fusion"):
        value = getattr(args, flag, None)
        if value is not None:
            method[flag] = value
    data["method"] = method

    for flag in ("steps", "batch", "lr", "weight_decay", "n_images", "rule"):
        value = getattr(args, flag, None)
        if value is not None:
            data["train"][flag] = value
    for flag in ("out_dir", "format", "force"):
        value = getattr(args, flag, None)
        if value is not None:
            data["report"][flag] = value

    data["seed"] = args.seed if getattr(args, "seed", None) is not None else seed_from_env(base.seed)
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    log.debug("resolved %s/%s seed=%d", cfg.model.name, cfg.method.label, cfg.seed)
    return cfg


def _materializable(cfg: ExperimentConfig, command: str) -> None:
    if not cfg.model.materializable:
        raise ConfigError(
            f"{cfg.model.name} is too large to build; only count-params accepts it (got {command})"
        )


def _dataset(cfg: ExperimentConfig, n: int | None = None):
    return gen_synthetic(cfg.seed, n or cfg.train.n_images, cfg.model.img, cfg.head.num_classes,
                         cell=cfg.model.patch, rule=cfg.train.rule)


def _methods(raw: str | None, cfg: ExperimentConfig, default: Sequence[str]) -> list[MethodConfig]:
    names = [n.strip() for n in raw.split(",") if n.strip()] if raw else list(default)
    overrides = {
        "adapter_dim": cfg.method.adapter_dim,
        "train_fpn_norm": cfg.method.train_fpn_norm,
        "trainable_reduction": cfg.method.trainable_reduction,
        "fusion": cfg.method.fusion,
    }
    out = []
    for name in names:
        alpha = None if name in METHOD_ALIASES else cfg.method.alpha
        out.append(MethodConfig.parse(name, alpha=alpha, **overrides))
    return out


def _out(cfg: ExperimentConfig, name: str) -> Path:
    return cfg.report.out_dir / name


def cmd_count_params(args: argparse.Namespace) -> None:
    """Symbolic parameter table (works for every preset)."""
    cfg = resolve_config(args)
    methods = [cfg.method] if args.method and not args.methods else _methods(args.methods, cfg, DEFAULT_COUNT_METHODS)
    rows = [count_row(cfg.model, m, cfg.head) for m in methods]
    if args.verify:
        _materializable(cfg, "count-params --verify")
        for m in methods:
            result = verify_against_built(cfg.model, m, cfg.head, cfg.seed)
            if not result.ok:
                raise RuntimeError(f"{m.label}: " + "; ".join(result.mismatches))
    if args.out:
        write_csv(args.out, rows, COUNT_COLUMNS, force=cfg.report.force)
    sys.stdout.write(csv_text(rows, COUNT_COLUMNS))


def cmd_train(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    _materializable(cfg, "train")
    data = _dataset(cfg)
    curve_path, report_path = (_out(cfg, report_name(None, cfg.method.label, cfg.seed, cfg.train.steps, ext=ext))
                               for ext in ("csv", "json"))
    ensure_free([curve_path, report_path], force=cfg.report.force)
    report = train(cfg.model, cfg.method, data, steps=cfg.train.steps, seed=cfg.seed,
                   train_cfg=cfg.train, head=cfg.head)
    rows = [{"step": i + 1, "loss": v} for i, v in enumerate(report.loss_curve)]
    write_csv(curve_path, rows, ("step", "loss"), force=cfg.report.force)
    write_json(report_path, report, force=cfg.report.force)
    print(json.dumps({
        "ok": True,
        "method": report.method,
        "steps": report.steps,
        "final_loss": report.final_loss if report.loss_curve else None,
        "final_pixel_acc": round(report.final_pixel_acc, 4),
        "curve": str(curve_path),
        "report": str(report_path),
    }))


def cmd_gradcheck(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    _materializable(cfg, "gradcheck")
    report = gradcheck(cfg.model, cfg.method, seed=cfg.seed, eps=args.eps,
                       max_coords=args.max_coords, head=cfg.head)
    write_json(_out(cfg, report_name("gradcheck", cfg.method.label, cfg.seed, ext="json")), report,
               force=cfg.report.force)
    print(report.model_dump_json())
    if not report.passed:
        raise RuntimeError(f"gradient check failed: max relative error {report.max_rel_err:.3e}")


def cmd_profile(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    _materializable(cfg, "profile")
    data = _dataset(cfg, max(cfg.train.batch, 8))
    prof = profile_step(cfg.model, cfg.method, data, k=args.k, seed=cfg.seed, batch=cfg.train.batch,
                        head=cfg.head)
    write_json(_out(cfg, report_name("profile", cfg.method.label, cfg.seed, args.k, ext="json")), prof,
               force=cfg.report.force)
    print(prof.model_dump_json(exclude={"step_times_ms"}))


def cmd_compare(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    _materializable(cfg, "compare")
    methods = _methods(args.methods, cfg, ("fixed", "full", "adapter", "e3va"))
    data = _dataset(cfg, max(cfg.train.batch, 8))
    report = compare_methods(cfg.model, methods, data, k=args.k, seed=cfg.seed, batch=cfg.train.batch,
                             parallel=args.parallel)
    rows = [r.model_dump() for r in report.rows]
    name = report_name("compare", cfg.seed, args.k, ext=cfg.report.format)
    if cfg.report.format == "json":
        write_json(_out(cfg, name), report, force=cfg.report.force)
    else:
        write_csv(_out(cfg, name), rows, COMPARE_COLUMNS, force=cfg.report.force)
    render_comparison(report)
    sys.stdout.write(csv_text(rows, COMPARE_COLUMNS))


def cmd_ablate(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    _materializable(cfg, "ablate")
    toggles = [t.strip() for t in args.toggles.split(",") if t.strip()]
    report = ablate(cfg.model, _dataset(cfg), steps=cfg.train.steps, seed=cfg.seed,
                    alpha=cfg.method.alpha, toggles=toggles, train_cfg=cfg.train)
    rows = [r.model_dump() for r in report.rows]
    name = report_name("ablate", cfg.seed, cfg.train.steps, ext=cfg.report.format)
    if cfg.report.format == "json":
        write_json(_out(cfg, name), report, force=cfg.report.force)
    else:
        write_csv(_out(cfg, name), rows, ABLATE_COLUMNS, force=cfg.report.force)
    render_ablation(report)
    sys.stdout.write(csv_text(rows, ABLATE_COLUMNS))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON experiment file")
    p.add_argument("--model", default=None, help="Backbone preset (toy-1, micro, swin-b, swin-l)")
    p.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p.add_argument("--method", default=None, help="Tuning method (e3va, e3va+, e3va++, adapter, ...)")
    p.add_argument("--alpha", type=int, default=None, help="Highway adapter rank")
    p.add_argument("--adapter-dim", dest="adapter_dim", type=int, default=None)
    p.add_argument("--train-fpn-norm", dest="train_fpn_norm", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--trainable-reduction", dest="trainable_reduction", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--fusion", choices=("additive", "highway_only"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", dest="out_dir", type=Path, default=None)
    p.add_argument("--format", choices=("csv", "json"), default=None)
    p.add_argument("--force", action="store_true", default=None, help="Overwrite existing reports")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--n-images", dest="n_images", type=int, default=None)
    p.add_argument("--rule", choices=("sine", "linear"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="highway-lab", description="Gradient-highway adapter tuning lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    p_count = sub.add_parser("count-params", help="Symbolic trainable/total parameter table")
    _add_common(p_count)
    p_count.add_argument("--methods", default=None, help="Comma-separated methods (default: all)")
    p_count.add_argument("--out", type=Path, default=None, help="Also write the CSV here")
    p_count.add_argument("--verify", action="store_true", help="Cross-check against a built model")
    p_count.set_defaults(func=cmd_count_params)

    p_train = sub.add_parser("train", help="Train one method on synthetic data")
    _add_common(p_train)
    _add_training(p_train)
    p_train.set_defaults(func=cmd_train)

    p_grad = sub.add_parser("gradcheck", help="Tape gradients vs central differences")
    _add_common(p_grad)
    p_grad.add_argument("--eps", type=float, default=1e-4)
    p_grad.add_argument("--max-coords", dest="max_coords", type=int, default=500)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_prof = sub.add_parser("profile", help="Gradient bytes and step time of one method")
    _add_common(p_prof)
    _add_training(p_prof)
    p_prof.add_argument("--k", type=int, default=20, help="Timed steps (median reported)")
    p_prof.set_defaults(func=cmd_profile)

    p_cmp = sub.add_parser("compare", help="Profile several methods against full fine-tuning")
    _add_common(p_cmp)
    _add_training(p_cmp)
    p_cmp.add_argument("--methods", default=None, help="Comma-separated methods")
    p_cmp.add_argument("--k", type=int, default=20)
    p_cmp.add_argument("--parallel", action="store_true", help="One process per method")
    p_cmp.set_defaults(func=cmd_compare)

    p_abl = sub.add_parser("ablate", help="e3va toggle grid")
    _add_common(p_abl)
    _add_training(p_abl)
    p_abl.add_argument("--toggles", default="trainable_reduction,train_fpn_norm")
    p_abl.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
    )
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ValueError, FileExistsError, FloatingPointError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
