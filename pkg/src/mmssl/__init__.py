"""Multi-modal self-supervised recommender.

Adversarially generated modality-aware relations, cross-modal contrastive
encoding, and multi-task pairwise-ranking training on a tape-based
differentiation substrate with finite-difference oracles throughout.
"""

from . import adversarial, autodiff, config, data, encoder, evaluation, gradcheck, model, objectives, trainer

__all__ = [
    "adversarial",
    "autodiff",
    "config",
    "data",
    "encoder",
    "evaluation",
    "gradcheck",
    "model",
    "objectives",
    "trainer",
]

__version__ = "0.1.0"
