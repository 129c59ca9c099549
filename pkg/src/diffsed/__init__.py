"""Sound event detection by denoising event queries with a set-prediction transformer."""
from .diffusion import NoiseSchedule, ScaleParams, cosine_schedule, ddim_step, make_step_plan, q_sample
from .engine import RunConfig, load_model, predict, save_model, train
from .matching import LossWeights, hungarian, set_prediction_loss
from .metrics import Detection, EvalReport, evaluate
from .model import DiffSED, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "Detection",
    "DiffSED",
    "EvalReport",
    "LossWeights",
    "ModelConfig",
    "NoiseSchedule",
    "RunConfig",
    "ScaleParams",
    "cosine_schedule",
    "ddim_step",
    "evaluate",
    "hungarian",
    "load_model",
    "make_step_plan",
    "predict",
    "q_sample",
    "save_model",
    "set_prediction_loss",
    "train",
]
