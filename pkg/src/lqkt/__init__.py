"""Answer-correctness sequence model with an O(L) last-query attention stage.

Layout: `numcore` (float64 ops with analytic backwards, Adam, init),
`features` (five-feature windows + embedding merge), `model` (attention,
encoder block, LSTM, head, checkpoints, MAC counters), `training` (split,
losses, AUC, loop, ensembling), `datagen` (synthetic corpus + CSV ingest),
`gradcheck` (finite-difference verification), `plots`, `cli`.
"""

__version__ = "0.1.0"

from .features import FeatureWindow, Interaction
from .model import ModelConfig, ModelParams, forward, load_checkpoint, save_checkpoint
from .training import TrainConfig, auc, ensemble_predict, evaluate, train

__all__ = [
    "FeatureWindow", "Interaction",
    "ModelConfig", "ModelParams", "forward", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "auc", "ensemble_predict", "evaluate", "train",
    "__version__",
]
