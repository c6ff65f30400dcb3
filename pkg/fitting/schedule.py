"""Round-based relaxation of the consistency weights."""

import logging

from core_engine.config import LossWeights

logger = logging.getLogger(__name__)

RELAXED_WEIGHTS = ("w_c_diffuse", "w_c_fine")


def round_of(iteration: int, weights: LossWeights) -> int:
    return iteration // weights.round_length


def schedule_weights(weights: LossWeights, round_index: int) -> LossWeights:
    """w_c(round) = w_c(0) / halving_factor^round for the diffuse consistency weights; others unchanged."""
    if round_index < 0:
        raise ValueError(f"round must be non-negative, got {round_index}")
    factor = weights.halving_factor ** round_index
    return weights.model_copy(update={name: getattr(weights, name) / factor for name in RELAXED_WEIGHTS})
