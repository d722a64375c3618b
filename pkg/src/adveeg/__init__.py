"""Adversarially censored feature learning for event-related EEG epochs.

A compact convolutional encoder is trained jointly with a target classifier and
against an adversary that tries to recover a nuisance label (recording block,
a proxy for drowsiness) from the features. Everything runs on plain numpy.
"""

from .dataset import EpochSet, SplitSpec, load_bundle, normalize, save_bundle, split
from .errors import ConfigError, DimensionError, FormatError, MetricError, NumericError, UsageError
from .evaluation import EvalReport, RocCurve, auc, evaluate_run, roc_curve, wilcoxon_signed_rank
from .model import ModelSpec, ModelState, build, encode, load_model, param_count, save_model
from .synth import SynthConfig, bayes_auc_oracle, generate
from .train import TrainConfig, TrainLog, leakage, train

__version__ = "0.1.0"

__all__ = [
    "EpochSet", "SplitSpec", "load_bundle", "normalize", "save_bundle", "split",
    "ConfigError", "DimensionError", "FormatError", "MetricError", "NumericError", "UsageError",
    "EvalReport", "RocCurve", "auc", "evaluate_run", "roc_curve", "wilcoxon_signed_rank",
    "ModelSpec", "ModelState", "build", "encode", "load_model", "param_count", "save_model",
    "SynthConfig", "bayes_auc_oracle", "generate",
    "TrainConfig", "TrainLog", "leakage", "train",
]
