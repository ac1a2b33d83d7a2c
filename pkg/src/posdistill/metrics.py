"""AUC, LogLoss, position-wise pCTR curves and the model comparison table."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .data import Dataset, empirical_ctr_by_position
from .nn import ContractError

PROB_CLAMP = 1e-7

# Published production results (AUC, LogLoss), shown for orientation only.
REFERENCE_ROWS = [
    ("Backbone", 0.7473, 0.5092),
    ("Backbone + Fixed Position", 0.7477, 0.5087),
    ("Backbone + PosDropOut", 0.7483, 0.5082),
    ("Backbone + PAL", 0.7485, 0.5080),
    ("Ours", 0.7528, 0.5050),
]


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties = 1/2).

    Uses doubled mid-ranks so the numerator stays an integer; the result is
    bitwise equal to an exhaustive pair count.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ContractError(f"auc: scores {scores.shape} and labels {labels.shape} differ")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC undefined: need at least one positive and one negative label")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    # Group occupying ranks starts+1 .. ends has doubled mid-rank starts+1+ends.
    doubled_rank = (starts + 1 + ends)[inverse]
    u2 = int(doubled_rank[pos].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def auc_bruteforce(scores, labels) -> float:
    """O(n^2) pair count; the independent check for :func:`auc`."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p = scores[labels == 1]
    n = scores[labels != 1]
    if len(p) == 0 or len(n) == 0:
        raise ContractError("AUC undefined: need at least one positive and one negative label")
    greater = int((p[:, None] > n[None, :]).sum())
    ties = int((p[:, None] == n[None, :]).sum())
    return (2 * greater + ties) / (2 * len(p) * len(n))


def per_example_ce(scores, labels) -> np.ndarray:
    p = np.clip(np.asarray(scores, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def logloss(scores, labels) -> float:
    return float(np.mean(per_example_ce(scores, labels)))


def relevance_auc(scores, rel) -> float:
    """AUC of the scores against true relevance thresholded at its median."""
    rel = np.asarray(rel, dtype=np.float64)
    if np.isnan(rel).any():
        raise ContractError("relevance_auc needs true relevance for every example")
    return auc(scores, (rel > np.median(rel)).astype(np.int64))


def safe_auc(scores, labels) -> float:
    try:
        return auc(scores, labels)
    except ContractError:
        return math.nan


# -- position analysis ------------------------------------------------------------
def mean_by_position(values, positions, num_positions: int) -> list[float | None]:
    positions = np.asarray(positions)
    values = np.asarray(values, dtype=np.float64)
    counts = np.bincount(positions, minlength=num_positions)[:num_positions]
    sums = np.bincount(positions, weights=values, minlength=num_positions)[:num_positions]
    return [float(s / c) if c else None for s, c in zip(sums, counts)]


def pctr_by_position(
    serving_rule: Callable[[Dataset], np.ndarray], dataset: Dataset, num_positions: int
) -> list[float | None]:
    """Mean served pCTR grouped by each example's logged position."""
    return mean_by_position(serving_rule(dataset), dataset.pos, num_positions)


def position_spearman(curve: Sequence[float | None]) -> float:
    """Spearman correlation between position index and a per-position curve."""
    pts = [(k, v) for k, v in enumerate(curve) if v is not None]
    if len(pts) < 2:
        return math.nan
    ks, vs = zip(*pts)
    return float(stats.spearmanr(ks, vs).statistic)


@dataclass
class MetricsReport:
    auc: float
    logloss: float
    n: int
    pctr_by_position: list = field(default_factory=list)
    ctr_by_position: list = field(default_factory=list)
    relevance_auc: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate_scores(scores: np.ndarray, dataset: Dataset, num_positions: int) -> MetricsReport:
    ctr = [r["ctr"] for r in empirical_ctr_by_position(dataset, num_positions)]
    return MetricsReport(
        auc=safe_auc(scores, dataset.click),
        logloss=logloss(scores, dataset.click),
        n=len(dataset),
        pctr_by_position=mean_by_position(scores, dataset.pos, num_positions),
        ctr_by_position=ctr,
        relevance_auc=relevance_auc(scores, dataset.rel) if dataset.has_relevance else None,
    )


# -- comparison table ----------------------------------------------------------------
def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def summarize(entries: Sequence[tuple[str, Sequence[MetricsReport]]]) -> list[dict]:
    """Mean and sample std (n-1) of each metric per model, best AUC flagged."""
    if not entries:
        raise ContractError("compare_models needs at least one model")
    rows = []
    for name, reports in entries:
        reports = [reports] if isinstance(reports, MetricsReport) else list(reports)
        row = {"model": name, "runs": len(reports)}
        row["auc"], row["auc_std"] = _mean_std([r.auc for r in reports])
        row["logloss"], row["logloss_std"] = _mean_std([r.logloss for r in reports])
        rel = [r.relevance_auc for r in reports if r.relevance_auc is not None]
        if rel:
            row["relevance_auc"], row["relevance_auc_std"] = _mean_std(rel)
        rows.append(row)
    best = max(range(len(rows)), key=lambda i: rows[i]["auc"])
    base_auc, base_ll = rows[0]["auc"], rows[0]["logloss"]
    for i, row in enumerate(rows):
        row["best"] = i == best
        row["auc_delta"] = row["auc"] - base_auc
        row["auc_rel_pct"] = 100.0 * row["auc_delta"] / base_auc if base_auc else math.nan
        row["logloss_delta"] = row["logloss"] - base_ll
        row["logloss_rel_pct"] = 100.0 * row["logloss_delta"] / base_ll if base_ll else math.nan
    return rows


def compare_models(
    entries: Sequence[tuple[str, Sequence[MetricsReport]]], show_reference: bool = False
) -> str:
    """Plain-text table: AUC / LogLoss as mean ± std, deltas against the first row."""
    rows = summarize(entries)
    has_rel = any("relevance_auc" in r for r in rows)
    header = f"{'Model':<28}{'AUC':>20}{'LogLoss':>20}"
    if has_rel:
        header += f"{'RelAUC':>20}"
    header += f"{'dAUC':>10}{'dAUC%':>9}{'dLL':>10}{'dLL%':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        line = f"{r['model'] + (' *' if r['best'] else ''):<28}"
        line += f"{r['auc']:>11.4f} ± {r['auc_std']:.4f}"
        line += f"{r['logloss']:>11.4f} ± {r['logloss_std']:.4f}"
        if has_rel:
            if "relevance_auc" in r:
                line += f"{r['relevance_auc']:>11.4f} ± {r['relevance_auc_std']:.4f}"
            else:
                line += f"{'-':>20}"
        line += f"{r['auc_delta']:>+10.4f}{r['auc_rel_pct']:>+8.2f}%"
        line += f"{r['logloss_delta']:>+10.4f}{r['logloss_rel_pct']:>+8.2f}%"
        lines.append(line)
    lines.append("* best mean AUC; deltas are against the first row")
    if show_reference:
        lines.append("")
        lines.append("Reference (proprietary production data, not reproducible here):")
        for name, a, ll in REFERENCE_ROWS:
            lines.append(f"  {name:<28}{a:>8.4f}{ll:>10.4f}")
    return "\n".join(lines)


def comparison_csv(entries: Sequence[tuple[str, Sequence[MetricsReport]]]) -> str:
    rows = summarize(entries)
    cols = [
        "model", "runs", "auc", "auc_std", "logloss", "logloss_std",
        "relevance_auc", "relevance_auc_std", "best",
        "auc_delta", "auc_rel_pct", "logloss_delta", "logloss_rel_pct",
    ]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", restval="")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


def curve_csv(curve: Sequence[float | None], value_name: str, extra: Sequence | None = None, extra_name: str = "impressions") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["position", extra_name, value_name] if extra is not None else ["position", value_name])
    for k, v in enumerate(curve):
        val = "" if v is None else repr(float(v))
        writer.writerow([k, extra[k], val] if extra is not None else [k, val])
    return buf.getvalue()
