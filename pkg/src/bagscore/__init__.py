"""Kernel-density aggregation (Bagging Score) for seeded neural-network ensembles."""

from .core import (
    BaggingResult,
    DensityGrid,
    KdeConfig,
    PredictionSet,
    aggregate_mean,
    aggregate_median,
    bagging_score,
    estimate_density,
    kernel,
    population_std,
)
from .errors import (
    BagScoreError,
    DegenerateSpreadError,
    IngestionError,
    InvalidBandwidthError,
    InvalidInputError,
    ModelFormatError,
    TrainingDivergedError,
    UndefinedVarianceError,
    ZeroTargetError,
)

__version__ = "0.1.0"
