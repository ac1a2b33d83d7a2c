"""Teacher-student distillation of position knowledge.

A position-aware teacher and a position-free student share one base module
and train jointly on

    CE(y_s, y) + CE(y_t, y) + lam * distill

where ``distill`` is either the soft-label cross entropy of the student
against the teacher's prediction (``LOGIT``) or the mean squared distance
between the two encoders' outputs (``FEATURE``). Only the student serves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from .data import Dataset, DatasetSplit, FeatureSchema
from .model import CTRNet, TowerConfig
from .nn import ContractError, Tensor, clip, log, mean, mul, sub, sum_
from .training import NumericalAbort, TrainHistory, fit, score

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
DEFAULT_LAMBDA_GRID = (0.01, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)


class Variant(str, Enum):
    LOGIT = "logit"
    FEATURE = "feature"
    NONE = "none"


@dataclass(frozen=True)
class DistillMode:
    variant: Variant = Variant.LOGIT
    lam: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.lam < 0 or math.isnan(self.lam):
            raise ContractError(f"lambda must be >= 0, got {self.lam}")
        if self.variant is Variant.NONE:
            object.__setattr__(self, "lam", 0.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 256
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    mode: DistillMode = field(default_factory=DistillMode)
    detach_teacher: bool = True
    # "mean": squared distance divided by width; "sum": raw squared norm.
    feature_reduction: str = "mean"
    eval_every: int = 1

    def __post_init__(self):
        if isinstance(self.mode, dict):
            object.__setattr__(self, "mode", DistillMode(**self.mode))
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if self.feature_reduction not in ("mean", "sum"):
            raise ContractError(f"feature_reduction must be 'mean' or 'sum', got {self.feature_reduction!r}")
        if self.eval_every < 1:
            raise ContractError("eval_every must be >= 1")

    def loop_kwargs(self) -> dict:
        return dict(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed, lr=self.lr,
            beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon, eval_every=self.eval_every,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = {"variant": self.mode.variant.value, "lam": self.mode.lam}
        return d


# -- losses ---------------------------------------------------------------------------
def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.atleast_1d(np.asarray(x, dtype=np.float64)))


def soft_ce(p, target) -> Tensor:
    """Mean of ``-[t log p + (1 - t) log(1 - p)]`` with ``p`` clamped."""
    p = clip(_t(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = _t(target)
    per = mul(t, log(p)) + mul(sub(1.0, t), log(sub(1.0, p)))
    return -mean(per)


def ce_loss(p, y) -> Tensor:
    """Binary cross entropy against hard labels, averaged over the batch."""
    return soft_ce(p, Tensor(np.atleast_1d(np.asarray(y, dtype=np.float64))))


def logit_distill_loss(y_hat_s, y_hat_t) -> Tensor:
    """Soft-label cross entropy of the student against the teacher's pCTR.

    The caller decides whether ``y_hat_t`` is detached.
    """
    return soft_ce(y_hat_s, y_hat_t)


def feature_distill_loss(z_s, z_t, reduction: str = "mean") -> Tensor:
    """Squared distance between encoder outputs, averaged over the batch.

    ``reduction="mean"`` divides each squared norm by the width.
    """
    z_s, z_t = _t(z_s), _t(z_t)
    if z_s.shape != z_t.shape:
        raise ContractError(f"feature_distill_loss: z_s {z_s.shape} and z_t {z_t.shape} differ")
    if z_s.ndim == 1:
        z_s = z_s.reshape(1, -1)
        z_t = z_t.reshape(1, -1)
    diff = sub(z_s, z_t)
    sq = sum_(mul(diff, diff), axis=-1)
    if reduction == "mean":
        sq = mul(sq, 1.0 / z_s.shape[-1])
    elif reduction != "sum":
        raise ContractError(f"unknown reduction {reduction!r}")
    return mean(sq)


def total_loss(
    y_hat_s,
    y_hat_t,
    z_s,
    z_t,
    y_g,
    mode: DistillMode,
    detach_teacher: bool = True,
    feature_reduction: str = "mean",
) -> tuple[Tensor, dict[str, float]]:
    """Joint objective; returns the loss and its components as floats."""
    y_hat_s, y_hat_t = _t(y_hat_s), _t(y_hat_t)
    ce_s = ce_loss(y_hat_s, y_g)
    ce_t = ce_loss(y_hat_t, y_g)
    loss = ce_s + ce_t
    distill_value = 0.0
    if mode.variant is not Variant.NONE:
        if mode.variant is Variant.LOGIT:
            target = y_hat_t.detach() if detach_teacher else y_hat_t
            term = logit_distill_loss(y_hat_s, target)
        else:
            z_s, z_t = _t(z_s), _t(z_t)
            target = z_t.detach() if detach_teacher else z_t
            term = feature_distill_loss(z_s, target, feature_reduction)
        distill_value = term.item()
        # lam == 0 leaves the graph untouched so results match NONE bit for bit.
        if mode.lam != 0.0:
            loss = loss + mul(term, mode.lam)
    comps = {"student_ce": ce_s.item(), "teacher_ce": ce_t.item(), "distill": distill_value}
    return loss, comps


# -- model -------------------------------------------------------------------------------
def _hide_positions(batch: Dataset) -> Dataset:
    # An out-of-range sentinel: any attempt to embed it raises.
    return batch.with_positions(np.full(len(batch), -1))


def serve(net: CTRNet, batch: Dataset, prefix: str = "student") -> np.ndarray:
    """Serving pCTR: base module then the student tower, position never read."""
    h_s = net.base(_hide_positions(batch))
    _, y = net.student_forward(h_s, prefix)
    return y.data


class DistillModel:
    name = "ours"
    has_diagnostic = True

    def __init__(
        self,
        schema: FeatureSchema,
        tower_cfg: TowerConfig,
        seed: int = 0,
        mode: DistillMode | None = None,
        detach_teacher: bool = True,
        feature_reduction: str = "mean",
    ):
        self.mode = mode or DistillMode()
        self.detach_teacher = detach_teacher
        self.feature_reduction = feature_reduction
        self.net = CTRNet(schema, tower_cfg, seed, towers={"student": False, "teacher": True})
        self.params = self.net.params

    def forward(self, batch: Dataset):
        h_s = self.net.base(batch)
        z_s, y_s = self.net.student_forward(h_s)
        z_t, y_t = self.net.teacher_forward(h_s, batch.pos)
        return z_s, y_s, z_t, y_t

    def loss(self, batch: Dataset, rng=None):
        z_s, y_s, z_t, y_t = self.forward(batch)
        return total_loss(
            y_s, y_t, z_s, z_t, batch.click, self.mode,
            detach_teacher=self.detach_teacher, feature_reduction=self.feature_reduction,
        )

    def serve(self, batch: Dataset) -> np.ndarray:
        return serve(self.net, batch)

    def diagnostic(self, batch: Dataset) -> np.ndarray:
        """Teacher pCTR with the logged positions (analysis only, never served)."""
        h_s = self.net.base(batch)
        return self.net.teacher_forward(h_s, batch.pos)[1].data


def train(
    dataset: Dataset,
    schema: FeatureSchema,
    tower_config: TowerConfig,
    train_config: TrainConfig,
    validation: Dataset | None = None,
) -> tuple[DistillModel, TrainHistory]:
    """Jointly train teacher and student from scratch."""
    if len(dataset) == 0:
        raise ContractError("train: dataset is empty")
    model = DistillModel(
        schema, tower_config, train_config.seed, train_config.mode,
        detach_teacher=train_config.detach_teacher,
        feature_reduction=train_config.feature_reduction,
    )
    history = fit(model, dataset, validation, **train_config.loop_kwargs())
    return model, history


# -- lambda sweep -------------------------------------------------------------------------
@dataclass
class SweepRow:
    lam: float
    val_logloss: float = math.nan
    val_auc: float = math.nan
    selected: bool = False
    error: str | None = None
    history: TrainHistory | None = None
    model: DistillModel | None = None


@dataclass
class SweepResult:
    variant: Variant
    rows: list[SweepRow]

    @property
    def selected(self) -> SweepRow | None:
        return next((r for r in self.rows if r.selected), None)


def sweep_lambda(
    split: DatasetSplit,
    schema: FeatureSchema,
    tower_config: TowerConfig,
    train_config: TrainConfig,
    grid=DEFAULT_LAMBDA_GRID,
    variant: Variant = Variant.LOGIT,
    keep_models: bool = False,
) -> SweepResult:
    """Train one model per lambda with a fixed seed; flag the lowest validation LogLoss.

    A failing cell is recorded with its error and the sweep moves on.
    """
    grid = list(grid)
    if not grid:
        raise ContractError("sweep_lambda: grid is empty")
    variant = Variant(variant)
    rows = []
    for lam in grid:
        cfg = replace(train_config, mode=DistillMode(variant, float(lam)))
        row = SweepRow(lam=float(lam))
        try:
            model, history = train(split.train, schema, tower_config, cfg, split.validation)
        except (NumericalAbort, ContractError, FloatingPointError) as exc:
            row.error = str(exc)
            logger.warning("sweep cell lambda=%s failed: %s", lam, exc)
        else:
            row.history = history
            row.val_logloss = history.records[-1]["val_logloss_s"]
            row.val_auc = history.records[-1]["val_auc_s"]
            if keep_models:
                row.model = model
        rows.append(row)
    ok = [r for r in rows if r.error is None and not math.isnan(r.val_logloss)]
    if ok:
        min(ok, key=lambda r: r.val_logloss).selected = True
    return SweepResult(variant, rows)


def validation_scores(model, data: Dataset) -> np.ndarray:
    return score(model.serve, data)
