"""Attribute-aware graph enhancement for session-based recommenders, on a small numpy autograd."""

from .data import DatasetBundle, SessionExample, preprocess, subsample_train, synth_generate
from .errors import (AttrGAUError, ConfigError, DatasetError, DegenerateRowError, GraphConstructionError,
                     IngestionError, ShapeError, TrainingDivergedError)
from .graph import AttributedGraph, AttributeRecords, build_graph, propagate
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, TrainReport, ablation_switches, evaluate, fit

__version__ = "0.1.0"
