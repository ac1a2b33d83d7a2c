"""Comparison systems built on the same base module and training loop.

* BACKBONE: one position-free tower, trained and served identically.
* FIXED_POSITION: position embedding as an input feature; served at slot 0.
* POS_DROPOUT: like FIXED_POSITION, but each training example's position is
  replaced by the reserved unknown slot with probability ``rate``; served at
  the unknown slot.
* PAL: training pCTR = ProbSeen(position) * pClick(features); ProbSeen is
  one learned logit per slot. Only pClick serves.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import Dataset, FeatureSchema
from .distill import TrainConfig, _hide_positions, ce_loss
from .model import CTRNet, TowerConfig
from .nn import ContractError, Tensor, embedding, mul, reshape, sigmoid
from .training import TrainHistory, fit

POS_DROPOUT_RATE = 0.1


class BaselineKind(str, Enum):
    BACKBONE = "backbone"
    FIXED_POSITION = "fixed_pos"
    POS_DROPOUT = "pos_dropout"
    PAL = "pal"


@dataclass(frozen=True)
class Baseline:
    kind: BaselineKind = BaselineKind.BACKBONE
    dropout_rate: float = POS_DROPOUT_RATE

    def __post_init__(self):
        object.__setattr__(self, "kind", BaselineKind(self.kind))
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ContractError(f"dropout_rate must lie in [0, 1], got {self.dropout_rate}")


class BackboneModel:
    name = "backbone"
    has_diagnostic = False

    def __init__(self, schema: FeatureSchema, tower_cfg: TowerConfig, seed: int = 0):
        self.net = CTRNet(schema, tower_cfg, seed, towers={"student": False})
        self.params = self.net.params

    def forward(self, batch: Dataset) -> Tensor:
        return self.net.student_forward(self.net.base(batch))[1]

    def loss(self, batch: Dataset, rng=None):
        ce = ce_loss(self.forward(batch), batch.click)
        return ce, {"student_ce": ce.item()}

    def serve(self, batch: Dataset) -> np.ndarray:
        return self.forward(_hide_positions(batch)).data

    def diagnostic(self, batch: Dataset) -> np.ndarray:
        raise NotImplementedError


class PositionFeatureModel:
    """One tower over ``[h_s, e_p]`` with a fixed serving position."""

    has_diagnostic = True

    def __init__(
        self,
        schema: FeatureSchema,
        tower_cfg: TowerConfig,
        seed: int = 0,
        dropout_rate: float = 0.0,
        serving_position: int = 0,
    ):
        if not 0.0 <= dropout_rate <= 1.0:
            raise ContractError(f"dropout rate must lie in [0, 1], got {dropout_rate}")
        if not 0 <= serving_position < schema.position_vocab:
            raise ContractError(f"serving position {serving_position} outside [0, {schema.num_positions}]")
        self.schema = schema
        self.dropout_rate = dropout_rate
        self.serving_position = serving_position
        self.net = CTRNet(schema, tower_cfg, seed, towers={"tower": True})
        self.params = self.net.params

    @property
    def name(self) -> str:
        return "pos_dropout" if self.serving_position == self.schema.unknown_position else "fixed_pos"

    def forward(self, batch: Dataset, positions) -> Tensor:
        h_s = self.net.base(batch)
        return self.net.teacher_forward(h_s, positions, prefix="tower")[1]

    def training_positions(self, batch: Dataset, rng: np.random.Generator) -> np.ndarray:
        pos = batch.pos
        if self.dropout_rate > 0.0:
            drop = rng.random(len(pos)) < self.dropout_rate
            pos = np.where(drop, self.schema.unknown_position, pos)
        return pos

    def loss(self, batch: Dataset, rng: np.random.Generator):
        ce = ce_loss(self.forward(batch, self.training_positions(batch, rng)), batch.click)
        return ce, {"student_ce": ce.item()}

    def serve(self, batch: Dataset) -> np.ndarray:
        """Score with every logged position overridden by the serving slot."""
        pinned = np.full(len(batch), self.serving_position)
        return self.forward(_hide_positions(batch), pinned).data

    def diagnostic(self, batch: Dataset) -> np.ndarray:
        return self.forward(batch, batch.pos).data


class PALModel:
    name = "pal"
    has_diagnostic = True

    def __init__(self, schema: FeatureSchema, tower_cfg: TowerConfig, seed: int = 0, freeze_seen: bool = False):
        self.schema = schema
        self.freeze_seen = freeze_seen
        self.net = CTRNet(schema, tower_cfg, seed, towers={"student": False})
        self.params = self.net.params
        if not freeze_seen:
            # Starts at sigmoid(0) = 0.5 for every slot.
            self.params.add("pal/seen", np.zeros((schema.num_positions, 1)))

    def prob_seen(self, positions) -> Tensor:
        positions = np.asarray(positions, dtype=np.int64)
        if self.freeze_seen:
            return Tensor(np.ones(len(positions)))
        logit = embedding(self.params["pal/seen"], positions)
        return sigmoid(reshape(logit, (len(positions),)))

    def learned_prob_seen(self) -> np.ndarray:
        if self.freeze_seen:
            return np.ones(self.schema.num_positions)
        return 1.0 / (1.0 + np.exp(-self.params["pal/seen"].data[:, 0]))

    def loss(self, batch: Dataset, rng=None):
        train_p, _ = pal_forward(self, self.net.base(batch), batch.pos)
        ce = ce_loss(train_p, batch.click)
        return ce, {"student_ce": ce.item()}

    def serve(self, batch: Dataset) -> np.ndarray:
        h_s = self.net.base(_hide_positions(batch))
        return self.net.student_forward(h_s)[1].data

    def diagnostic(self, batch: Dataset) -> np.ndarray:
        return pal_forward(self, self.net.base(batch), batch.pos)[0].data


def pal_forward(model: PALModel, h_s: Tensor, position_index) -> tuple[Tensor, Tensor]:
    """``(ProbSeen(pos) * pClick, pClick)``; the second is the serving pCTR."""
    p_click = model.net.student_forward(h_s)[1]
    return mul(model.prob_seen(position_index), p_click), p_click


def build_baseline(
    baseline: Baseline, schema: FeatureSchema, tower_cfg: TowerConfig, seed: int
):
    kind = baseline.kind
    if kind is BaselineKind.BACKBONE:
        return BackboneModel(schema, tower_cfg, seed)
    if kind is BaselineKind.FIXED_POSITION:
        return PositionFeatureModel(schema, tower_cfg, seed, dropout_rate=0.0, serving_position=0)
    if kind is BaselineKind.POS_DROPOUT:
        return PositionFeatureModel(
            schema, tower_cfg, seed, dropout_rate=baseline.dropout_rate,
            serving_position=schema.unknown_position,
        )
    return PALModel(schema, tower_cfg, seed)


def train_baseline(
    baseline: Baseline,
    dataset: Dataset,
    schema: FeatureSchema,
    tower_cfg: TowerConfig,
    train_cfg: TrainConfig,
    validation: Dataset | None = None,
) -> tuple[object, TrainHistory]:
    model = build_baseline(baseline, schema, tower_cfg, train_cfg.seed)
    history = fit(model, dataset, validation, **train_cfg.loop_kwargs())
    return model, history


def backbone_train(dataset, schema, tower_cfg, train_cfg, validation=None):
    return train_baseline(Baseline(BaselineKind.BACKBONE), dataset, schema, tower_cfg, train_cfg, validation)


def fixed_position_train_and_serve(dataset, schema, tower_cfg, train_cfg, validation=None):
    return train_baseline(Baseline(BaselineKind.FIXED_POSITION), dataset, schema, tower_cfg, train_cfg, validation)


def pos_dropout_train_and_serve(dataset, schema, tower_cfg, train_cfg, validation=None, rate=POS_DROPOUT_RATE):
    return train_baseline(
        Baseline(BaselineKind.POS_DROPOUT, rate), dataset, schema, tower_cfg, train_cfg, validation
    )


def pal_train(dataset, schema, tower_cfg, train_cfg, validation=None):
    return train_baseline(Baseline(BaselineKind.PAL), dataset, schema, tower_cfg, train_cfg, validation)
