"""SE(2)-equivariant joint prediction and planning on a small numpy autodiff."""
from .model import ModelConfig, init_params
from .scene import Dataset, GeneratorConfig, Scene, apply_se2, generate_synthetic, load_scenes, save_scenes
from .train import Ablation, TrainConfig

__all__ = [
    "Ablation", "Dataset", "GeneratorConfig", "ModelConfig", "Scene", "TrainConfig",
    "apply_se2", "generate_synthetic", "init_params", "load_scenes", "save_scenes",
]
__version__ = "0.1.0"
