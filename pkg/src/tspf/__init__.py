"""Two-stage pretraining/finetuning CATE estimation with hidden confounding."""

from tspf.data import Dataset, DatasetBundle, build_bundle
from tspf.evalkit import MetricsReport, ate_error, evaluate, pehe
from tspf.model import Stage1Model, Stage2Model, TrainConfig, fit_tspf

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DatasetBundle",
    "MetricsReport",
    "Stage1Model",
    "Stage2Model",
    "TrainConfig",
    "ate_error",
    "build_bundle",
    "evaluate",
    "fit_tspf",
    "pehe",
]
