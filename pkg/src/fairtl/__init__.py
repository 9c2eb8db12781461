"""Fair generative models by transfer learning on a small balanced reference set."""

from .gan import FreezeMask, GanState, LossConfig, Stage
from .metrics import Evaluator, fairness_discrepancy, frechet_sq
from .pipeline import adapt_fairtl, adapt_fairtlpp, debias_pretrained, pretrain

__all__ = [
    "FreezeMask",
    "GanState",
    "LossConfig",
    "Stage",
    "Evaluator",
    "fairness_discrepancy",
    "frechet_sq",
    "adapt_fairtl",
    "adapt_fairtlpp",
    "debias_pretrained",
    "pretrain",
]
