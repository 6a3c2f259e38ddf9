"""Multi-head Gramian attention classifiers on a small residual backbone."""

from .backbone import Backbone, BackboneConfig, build_backbone
from .diagnostics import DiagnosticsReport, VoteTable, diagnose
from .ensemble import EnsembleModel, ModelConfig, PredictionSet, build_model, forward_all, prune_heads, total_loss
from .errors import ConfigError, DimensionError, FormatError, TapeError, TrainingError
from .heads import GapFcHead, GramHead, HeadConfig, TokenHead, build_head
from .train import TrainConfig, evaluate, sweep, train

__version__ = "0.1.0"
