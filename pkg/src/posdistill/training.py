"""Seeded mini-batch training loop shared by the proposed model and baselines."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .data import Dataset
from .metrics import logloss, safe_auc
from .nn import AdamState, ContractError, Tensor, adam_step

log = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    "epoch",
    "student_ce",
    "teacher_ce",
    "distill",
    "val_auc_s",
    "val_logloss_s",
    "val_auc_t",
    "val_logloss_t",
)

SCORE_BATCH = 4096


class NumericalAbort(RuntimeError):
    """A non-finite loss appeared during training."""

    def __init__(self, epoch: int, step: int, components: dict[str, float]):
        self.epoch = epoch
        self.step = step
        self.components = components
        detail = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch} step {step}: {detail}")


class TrainableModel(Protocol):
    params: object
    has_diagnostic: bool

    def loss(self, batch: Dataset, rng: np.random.Generator) -> tuple[Tensor, dict[str, float]]: ...

    def serve(self, batch: Dataset) -> np.ndarray: ...

    def diagnostic(self, batch: Dataset) -> np.ndarray: ...


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in self.records:
            row = []
            for col in HISTORY_COLUMNS:
                v = r[col]
                if col == "epoch":
                    row.append(int(v))
                elif v is None or (isinstance(v, float) and math.isnan(v)):
                    row.append("")
                else:
                    row.append(repr(float(v)))
            writer.writerow(row)
        return buf.getvalue()


def score(fn, dataset: Dataset, batch_size: int = SCORE_BATCH) -> np.ndarray:
    """Apply a batch scoring function over a whole dataset."""
    if len(dataset) == 0:
        return np.zeros(0)
    return np.concatenate([fn(b) for b in dataset.batches(batch_size)])


def _metrics(scores: np.ndarray | None, data: Dataset) -> tuple[float, float]:
    if scores is None or len(data) == 0:
        return math.nan, math.nan
    return safe_auc(scores, data.click), logloss(scores, data.click)


def fit(
    model: TrainableModel,
    train: Dataset,
    validation: Dataset | None,
    *,
    epochs: int,
    batch_size: int,
    seed: int,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
    eval_every: int = 1,
) -> TrainHistory:
    """Minimise ``model.loss`` with Adam; validate every ``eval_every`` epochs.

    Raises :class:`NumericalAbort` as soon as a loss is not finite.
    """
    if len(train) == 0:
        raise ContractError("training set is empty")
    if epochs < 1 or batch_size < 1:
        raise ContractError(f"epochs and batch_size must be >= 1, got {epochs}, {batch_size}")
    params = model.params
    params.zero_grad()
    state = AdamState.for_store(params)
    rng = np.random.default_rng([int(seed), 1])
    history = TrainHistory()

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        sums: dict[str, float] = {"student_ce": 0.0, "teacher_ce": 0.0, "distill": 0.0}
        seen = 0
        for step, batch in enumerate(train.batches(batch_size, order)):
            loss, comps = model.loss(batch, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalAbort(epoch, step, dict(comps, total=value))
            loss.backward()
            adam_step(params, state, lr, beta1, beta2, epsilon)
            n = len(batch)
            seen += n
            for k in sums:
                sums[k] += comps.get(k, math.nan) * n

        record = {"epoch": epoch, **{k: v / seen for k, v in sums.items()}}
        if validation is not None and (epoch % eval_every == 0 or epoch == epochs):
            record["val_auc_s"], record["val_logloss_s"] = _metrics(score(model.serve, validation), validation)
            diag = score(model.diagnostic, validation) if model.has_diagnostic else None
            record["val_auc_t"], record["val_logloss_t"] = _metrics(diag, validation)
        else:
            record.update(val_auc_s=math.nan, val_logloss_s=math.nan, val_auc_t=math.nan, val_logloss_t=math.nan)
        log.info(
            "epoch %d: student_ce=%.5f teacher_ce=%.5f distill=%.5f val_logloss_s=%.5f val_auc_s=%.4f",
            epoch, record["student_ce"], record["teacher_ce"], record["distill"],
            record["val_logloss_s"], record["val_auc_s"],
        )
        history.append(record)
    return history


def train_config_kwargs(cfg) -> dict:
    """Optimizer/loop arguments of :func:`fit` taken from a TrainConfig."""
    d = asdict(cfg) if not isinstance(cfg, dict) else cfg
    keys = ("epochs", "batch_size", "seed", "lr", "beta1", "beta2", "epsilon", "eval_every")
    return {k: d[k] for k in keys}
