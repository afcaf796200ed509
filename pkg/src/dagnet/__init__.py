"""Goal-conditioned multi-agent trajectory forecasting on a small numpy autodiff core."""

from .autodiff import Tensor, Tape, backward
from .data import Scene, generate_synthetic
from .engine import EvalReport, RunConfig, evaluate, run_ablation, train
from .goals import SceneGrid, extract_goals, to_absolute, to_relative
from .metrics import ade, fde
from .model import DagNet, ModelConfig, ModelVariant, rollout, training_loss

__version__ = "0.1.0"

__all__ = [
    "DagNet", "EvalReport", "ModelConfig", "ModelVariant", "RunConfig", "Scene", "SceneGrid", "Tape", "Tensor",
    "ade", "backward", "evaluate", "extract_goals", "fde", "generate_synthetic", "rollout", "run_ablation",
    "to_absolute", "to_relative", "train", "training_loss",
]
