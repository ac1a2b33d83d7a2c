"""Command-line entry point: generate | train | sweep | evaluate.

Exit codes: 0 ok, 2 configuration or input error, 3 numerical abort,
4 checkpoint/schema mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data import SPLIT_FILES, DatasetSplit, empirical_ctr_by_position, generate, load_split, write_split
from .distill import DistillMode, Variant, sweep_lambda
from .experiment import DISPLAY_NAMES, MODEL_NAMES, build_model, train_named
from .metrics import compare_models, comparison_csv, curve_csv, evaluate_scores, mean_by_position
from .nn import ContractError, load_checkpoint, read_checkpoint, save_checkpoint
from .training import NumericalAbort, score

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISMATCH = 4

OUTPUT_ROOT_ENV = "POSDISTILL_OUTPUT_ROOT"

log = logging.getLogger("posdistill")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _out_dir(arg: str | None, command: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


def _resolve_config(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.set or [])
        train_changes = {}
        for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr")):
            value = getattr(args, flag, None)
            if value is not None:
                train_changes[key] = value
        mode = cfg.train.mode
        if getattr(args, "mode", None) is not None:
            mode = DistillMode(Variant(args.mode), mode.lam if args.mode != "none" else 0.0)
        if getattr(args, "lam", None) is not None:
            mode = DistillMode(mode.variant, args.lam)
        train_changes["mode"] = mode
        cfg = replace(cfg, train=replace(cfg.train, **train_changes))
        if getattr(args, "model", None) is not None:
            cfg = replace(cfg, model=args.model)
        if getattr(args, "data_seed", None) is not None:
            cfg = replace(cfg, data_seed=args.data_seed)
        return cfg
    except (ConfigError, ContractError, ValueError) as exc:
        raise CommandError(EXIT_CONFIG, f"config error: {exc}") from None


def _echo_config(cfg: RunConfig) -> None:
    print(f"run config hash: {cfg.hash()}")


def _load_data(data_dir: str, cfg: RunConfig) -> DatasetSplit:
    d = Path(data_dir)
    missing = [f for f in SPLIT_FILES.values() if not (d / f).is_file()]
    if missing:
        raise CommandError(EXIT_CONFIG, f"dataset directory {d} lacks {missing}")
    try:
        return load_split(d, cfg.schema)
    except ContractError as exc:
        raise CommandError(EXIT_CONFIG, f"cannot load dataset: {exc}") from None


def _ctr_table(rows) -> str:
    lines = [f"{'pos':>4}{'impressions':>13}{'clicks':>9}{'ctr':>10}"]
    for r in rows:
        ctr = "-" if r["ctr"] is None else f"{r['ctr']:.5f}"
        lines.append(f"{r['position']:>4}{r['impressions']:>13}{r['clicks']:>9}{ctr:>10}")
    return "\n".join(lines)


# -- commands ---------------------------------------------------------------------------------
def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg)
    out = _out_dir(args.out, "data")
    split = generate(cfg.gen, cfg.data_seed)
    split.manifest["run_config_hash"] = cfg.hash()
    try:
        write_split(split, out)
        (out / "run_config.yaml").write_text(cfg.to_yaml())
    except OSError as exc:
        raise CommandError(EXIT_CONFIG, f"cannot write to {out}: {exc}") from None
    rows = empirical_ctr_by_position(split.train, cfg.gen.num_positions)
    (out / "ctr_by_position.csv").write_text(
        curve_csv([r["ctr"] for r in rows], "ctr", extra=[r["impressions"] for r in rows])
    )
    print(f"wrote {out} ({split.manifest['counts']})")
    print("empirical CTR by position (train):")
    print(_ctr_table(rows))
    return EXIT_OK


def _checkpoint_meta(cfg: RunConfig) -> dict:
    return {
        "model": cfg.model,
        "run_config": cfg.to_dict(),
        "run_config_hash": cfg.hash(),
    }


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg)
    split = _load_data(args.data, cfg)
    out = _out_dir(args.out, f"train/{cfg.model}")
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, history = train_named(cfg.model, split, cfg.schema, cfg.tower, cfg.train, cfg.dropout_rate)
    except NumericalAbort as exc:
        raise CommandError(EXIT_NUMERIC, f"numerical abort: {exc}") from None
    except ContractError as exc:
        raise CommandError(EXIT_MISMATCH, f"data does not match the configured schema: {exc}") from None
    save_checkpoint(model.params, out / "checkpoint.json", _checkpoint_meta(cfg))
    (out / "history.csv").write_text(history.to_csv())
    (out / "run_config.yaml").write_text(cfg.to_yaml())
    last = history.records[-1]
    print(f"model={cfg.model} epochs={len(history)} checkpoint={out / 'checkpoint.json'}")
    print(f"validation: auc={last['val_auc_s']:.5f} logloss={last['val_logloss_s']:.5f}")
    if cfg.model == "ours":
        print(f"teacher (logged positions): auc={last['val_auc_t']:.5f} logloss={last['val_logloss_t']:.5f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg)
    split = _load_data(args.data, cfg)
    out = _out_dir(args.out, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "lambda", "val_logloss", "val_auc", "selected", "error"])
    winners = []
    for variant in (Variant.LOGIT, Variant.FEATURE):
        result = sweep_lambda(split, cfg.schema, cfg.tower, cfg.train, cfg.sweep_grid, variant)
        for row in result.rows:
            writer.writerow([variant.value, repr(row.lam), repr(row.val_logloss), repr(row.val_auc),
                             int(row.selected), row.error or ""])
            status = f"FAILED: {row.error}" if row.error else f"val_logloss={row.val_logloss:.5f} val_auc={row.val_auc:.5f}"
            print(f"{variant.value:>8} lambda={row.lam:<6g} {status}")
        best = result.selected
        winners.append(f"winner {variant.value}: " + (f"lambda={best.lam:g} val_logloss={best.val_logloss:.5f}" if best else "none"))
    (out / "sweep.csv").write_text(buf.getvalue())
    for line in winners:
        print(line)
    return EXIT_OK


def _restore(path: Path):
    ckpt = path / "checkpoint.json" if path.is_dir() else path
    if not ckpt.is_file():
        raise CommandError(EXIT_MISMATCH, f"checkpoint not found: {ckpt}")
    try:
        meta, _ = read_checkpoint(ckpt)
        cfg = RunConfig.from_dict(meta["run_config"])
        model = build_model(cfg.model, cfg.schema, cfg.tower, cfg.train.seed, cfg.train.mode, cfg.dropout_rate)
        load_checkpoint(model.params, ckpt)
    except (ContractError, ConfigError, KeyError, ValueError) as exc:
        raise CommandError(EXIT_MISMATCH, f"cannot restore {ckpt}: {exc}") from None
    return cfg, model


def cmd_evaluate(args) -> int:
    restored = [_restore(Path(p)) for p in args.checkpoints]
    data_cfg = restored[0][0]
    if args.config:
        data_cfg = _resolve_config(args)
    _echo_config(data_cfg)
    split = _load_data(args.data, data_cfg)
    test = split.test
    out = _out_dir(args.out, "evaluate")
    out.mkdir(parents=True, exist_ok=True)
    K = data_cfg.schema.num_positions

    groups: dict[str, list] = defaultdict(list)
    for cfg, model in restored:
        if cfg.schema != data_cfg.schema:
            raise CommandError(EXIT_MISMATCH, f"checkpoint schema {cfg.schema} differs from data schema {data_cfg.schema}")
        try:
            scores = score(model.serve, test)
        except ContractError as exc:
            raise CommandError(EXIT_MISMATCH, f"checkpoint/data mismatch: {exc}") from None
        report = evaluate_scores(scores, test, K)
        groups[cfg.model].append(report)
        if args.teacher and model.has_diagnostic:
            diag = score(model.diagnostic, test)
            groups[f"{cfg.model}:logged-position"].append(evaluate_scores(diag, test, K))

    order = [n for n in MODEL_NAMES if n in groups] + [n for n in groups if n not in MODEL_NAMES]
    entries = [(DISPLAY_NAMES.get(n, n), groups[n]) for n in order]
    table = compare_models(entries, show_reference=True)
    print(table)
    (out / "comparison.txt").write_text(table + "\n")
    (out / "comparison.csv").write_text(comparison_csv(entries))
    ctr = [r for r in empirical_ctr_by_position(test, K)]
    (out / "ctr_by_position.csv").write_text(
        curve_csv([r["ctr"] for r in ctr], "ctr", extra=[r["impressions"] for r in ctr])
    )
    for name in order:
        curves = np.array([[np.nan if v is None else v for v in r.pctr_by_position] for r in groups[name]])
        mean_curve = [None if np.isnan(v) else float(v) for v in np.nanmean(curves, axis=0)]
        safe = name.replace(":", "_")
        (out / f"pctr_by_position_{safe}.csv").write_text(curve_csv(mean_curve, "mean_pctr"))
        rel = [r.relevance_auc for r in groups[name] if r.relevance_auc is not None]
        if rel:
            print(f"relevance AUC {name}: {np.mean(rel):.5f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_train=False):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. gen.eta=1.5")
        p.add_argument("--out", help=f"output directory (default under ${OUTPUT_ROOT_ENV} or ./runs)")
        if with_train:
            p.add_argument("--seed", type=int)
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--mode", choices=[v.value for v in Variant])
            p.add_argument("--lam", type=float)

    p = sub.add_parser("generate", help="write a synthetic click log")
    common(p)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    common(p, with_train=True)
    p.add_argument("--model", choices=MODEL_NAMES)
    p.add_argument("--data", required=True, help="directory written by 'generate'")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="lambda sweep for logit and feature distillation")
    common(p, with_train=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="compare trained checkpoints on the test split")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", action="store_true", help="also score position-aware towers with logged positions")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files or training output directories")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
