"""Multi-seed comparison of the distilled student against the baselines."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import POS_DROPOUT_RATE, Baseline, BaselineKind, build_baseline, train_baseline
from .data import DatasetSplit, FeatureSchema
from .distill import DistillMode, DistillModel, SweepResult, TrainConfig, Variant, sweep_lambda, train
from .metrics import MetricsReport, evaluate_scores, pctr_by_position, position_spearman
from .model import TowerConfig
from .nn import ContractError
from .training import TrainHistory, score

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
MODEL_NAMES = ("backbone", "fixed_pos", "pos_dropout", "pal", "ours")
DISPLAY_NAMES = {
    "backbone": "Backbone",
    "fixed_pos": "Backbone + Fixed Position",
    "pos_dropout": "Backbone + PosDropOut",
    "pal": "Backbone + PAL",
    "ours": "Ours",
}


def build_model(
    name: str,
    schema: FeatureSchema,
    tower_cfg: TowerConfig,
    seed: int = 0,
    mode: DistillMode | None = None,
    dropout_rate: float = POS_DROPOUT_RATE,
):
    """Untrained model for a roster name (used to restore checkpoints)."""
    if name == "ours":
        return DistillModel(schema, tower_cfg, seed, mode)
    if name not in MODEL_NAMES:
        raise ContractError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
    return build_baseline(Baseline(BaselineKind(name), dropout_rate), schema, tower_cfg, seed)


def train_named(
    name: str,
    split: DatasetSplit,
    schema: FeatureSchema,
    tower_cfg: TowerConfig,
    train_cfg: TrainConfig,
    dropout_rate: float = POS_DROPOUT_RATE,
):
    """Train one roster entry by name; ``ours`` uses ``train_cfg.mode``."""
    if name == "ours":
        return train(split.train, schema, tower_cfg, train_cfg, split.validation)
    baseline = Baseline(BaselineKind(name), dropout_rate)
    return train_baseline(baseline, split.train, schema, tower_cfg, train_cfg, split.validation)


@dataclass
class RunOutcome:
    name: str
    seed: int
    report: MetricsReport
    history: TrainHistory
    teacher_curve: list | None = None
    seconds: float = 0.0
    model: object | None = None


@dataclass
class ComparisonResult:
    outcomes: list[RunOutcome] = field(default_factory=list)
    sweeps: dict[str, SweepResult] = field(default_factory=dict)

    def reports(self, name: str) -> list[MetricsReport]:
        return [o.report for o in self.outcomes if o.name == name]

    def entries(self, names=MODEL_NAMES) -> list[tuple[str, list[MetricsReport]]]:
        return [(DISPLAY_NAMES.get(n, n), self.reports(n)) for n in names if self.reports(n)]

    def metric(self, name: str, key: str) -> np.ndarray:
        return np.array([getattr(r, key) for r in self.reports(name)], dtype=np.float64)


def evaluate_model(model, split: DatasetSplit, schema: FeatureSchema) -> tuple[MetricsReport, list | None]:
    test = split.test
    report = evaluate_scores(score(model.serve, test), test, schema.num_positions)
    teacher_curve = None
    if getattr(model, "has_diagnostic", False):
        teacher_curve = pctr_by_position(lambda d: score(model.diagnostic, d), test, schema.num_positions)
    return report, teacher_curve


def run_comparison(
    split: DatasetSplit,
    schema: FeatureSchema,
    tower_cfg: TowerConfig,
    train_cfg: TrainConfig,
    seeds=DEFAULT_SEEDS,
    names=MODEL_NAMES,
    ours_mode: DistillMode | None = None,
    keep_models: bool = False,
) -> ComparisonResult:
    result = ComparisonResult()
    for seed in seeds:
        for name in names:
            cfg = replace(train_cfg, seed=int(seed))
            if name == "ours" and ours_mode is not None:
                cfg = replace(cfg, mode=ours_mode)
            start = time.perf_counter()
            model, history = train_named(name, split, schema, tower_cfg, cfg)
            report, teacher_curve = evaluate_model(model, split, schema)
            elapsed = time.perf_counter() - start
            log.info(
                "%s seed=%d auc=%.4f logloss=%.4f rel_auc=%s (%.1fs)",
                name, seed, report.auc, report.logloss, report.relevance_auc, elapsed,
            )
            result.outcomes.append(
                RunOutcome(name, int(seed), report, history, teacher_curve, elapsed, model if keep_models else None)
            )
    return result


def pooled_std(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    va = a.var(ddof=1) if len(a) > 1 else 0.0
    vb = b.var(ddof=1) if len(b) > 1 else 0.0
    return float(math.sqrt((va + vb) / 2.0))


def full_protocol(
    split: DatasetSplit,
    schema: FeatureSchema,
    tower_cfg: TowerConfig,
    train_cfg: TrainConfig,
    seeds=DEFAULT_SEEDS,
    grid=None,
    keep_models: bool = False,
) -> ComparisonResult:
    """Sweep lambda for both distillation forms, then run the roster with the logit winner."""
    from .distill import DEFAULT_LAMBDA_GRID

    grid = DEFAULT_LAMBDA_GRID if grid is None else grid
    sweeps = {
        v.value: sweep_lambda(split, schema, tower_cfg, train_cfg, grid, v)
        for v in (Variant.LOGIT, Variant.FEATURE)
    }
    best = sweeps[Variant.LOGIT.value].selected
    lam = best.lam if best is not None else 1.0
    result = run_comparison(
        split, schema, tower_cfg, train_cfg, seeds, MODEL_NAMES, DistillMode(Variant.LOGIT, lam), keep_models
    )
    result.sweeps = sweeps
    return result


def spearman_summary(result: ComparisonResult, num_positions: int) -> dict[str, float]:
    """Mean position Spearman of served pCTR per model, plus the teacher's."""
    out = {}
    for name in MODEL_NAMES:
        reps = result.reports(name)
        if reps:
            out[name] = float(np.mean([position_spearman(r.pctr_by_position) for r in reps]))
    teacher = [o.teacher_curve for o in result.outcomes if o.name == "ours" and o.teacher_curve]
    if teacher:
        out["teacher"] = float(np.mean([position_spearman(c) for c in teacher]))
    return out
