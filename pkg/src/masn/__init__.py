"""Motion-appearance synergistic networks for video question answering, in numpy."""

from .data import EpisodeDataset, GeneratorConfig, generate_dataset, generate_episode, load_episodes, write_episodes
from .estimator import MASNVideoQA
from .model import ABLATION_VARIANTS, VARIANTS, Batch, ModelConfig, build_model_variant, init_params
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ABLATION_VARIANTS", "VARIANTS", "Batch", "EpisodeDataset", "GeneratorConfig",
    "MASNVideoQA", "ModelConfig", "TrainConfig", "build_model_variant", "evaluate",
    "generate_dataset", "generate_episode", "init_params", "load_checkpoint",
    "load_episodes", "save_checkpoint", "train", "write_episodes",
]
