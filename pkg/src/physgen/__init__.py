"""Physics-feasible diffusion generation toolkit."""

from physgen.constraints import ConstraintSpec
from physgen.data import FieldSample, TrajectorySample
from physgen.diffusion import NoiseSchedule, build_schedule
from physgen.estimator import DiffusionGenerator
from physgen.models import ScoreModel
from physgen.tensor import Tape, Tensor, grad
from physgen.train import Checkpoint, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ConstraintSpec",
    "DiffusionGenerator",
    "FieldSample",
    "NoiseSchedule",
    "ScoreModel",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrajectorySample",
    "build_schedule",
    "grad",
    "train",
    "__version__",
]
