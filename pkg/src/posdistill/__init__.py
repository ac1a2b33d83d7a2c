"""Position-bias modeling for CTR prediction via teacher-student distillation."""

from .baselines import Baseline, BaselineKind, PALModel, PositionFeatureModel, BackboneModel
from .data import Dataset, DatasetSplit, FeatureSchema, GenConfig, generate, load_jsonl
from .distill import DistillMode, DistillModel, TrainConfig, Variant, serve, sweep_lambda, train
from .metrics import MetricsReport, auc, compare_models, logloss
from .model import CTRNet, TowerConfig

__version__ = "0.1.0"
