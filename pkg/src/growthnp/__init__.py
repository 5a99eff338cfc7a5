"""Continuous-time Neural Process for stochastic image time series."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    ContextTargetBatch,
    GrowthParams,
    TimedObservation,
    Trajectory,
    build_corpus,
    normalize_trajectory,
    simulate_trajectory,
)
from .model import GaussianLatent, GrowthNP, ModelConfig  # noqa: F401
from .objective import LossConfig, training_objective  # noqa: F401
from .training import TrainConfig, load_checkpoint, save_checkpoint, train  # noqa: F401
from .evaluation import evaluate_all, write_report  # noqa: F401
