"""Triple distribution matching for unsupervised domain adaptation.

Adversarial alignment of features, predicted class distributions and
certainty activation maps between a labeled source and an unlabeled target
domain, on top of a small reverse-mode autodiff engine.
"""

from .autodiff import Tensor, backward, detach
from .config import REGIMES, TrainConfig
from .data import DomainDataset, gen_two_moons, rotate
from .nn import GradReverse, Mlp, Models, Mode, build_models
from .trainer import evaluate, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "REGIMES",
    "DomainDataset",
    "GradReverse",
    "Mlp",
    "Mode",
    "Models",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_models",
    "detach",
    "evaluate",
    "gen_two_moons",
    "rotate",
    "run_ablation",
    "train",
]
